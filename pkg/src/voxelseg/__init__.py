"""voxelseg: multimodal 3D brain tumor segmentation and survival prediction.

A self-contained numpy/scipy implementation of a residual 3D U-Net trained
with a multiclass soft Dice loss, mirror/dropout/ensemble test-time
augmentation, radiomic shape/intensity/texture features, and a random forest
plus MLP ensemble survival regressor. See the `voxelseg` console script for
the end-to-end pipeline.
"""

__version__ = "1.0.0"

from .augment import AttenuationSchedule, AugmentationConfig
from .autodiff import Tensor
from .inference import (MetricsReport, PredictionConfig, RegionMetrics,
                        confusion_metrics, dice_metric, evaluate_case,
                        hausdorff, predict)
from .network import (NetworkConfig, forward, init_parameters, load_checkpoint,
                      parameter_shapes, save_checkpoint)
from .radiomics import (FeatureVector, GLCMConfig, assemble_features,
                        canonical_feature_names, cooccurrence_matrix,
                        first_order_features, glcm_features, shape_features)
from .rng import RngStream
from .survival import (MLPEnsembleConfig, RFRConfig, SurvivalModel,
                       bin_survival, cross_validate, evaluate_survival,
                       load_survival_model, predict_combined, predict_mlp,
                       predict_rfr, save_survival_model, spearman_correlation,
                       train_survival_model)
from .synth import SyntheticCaseSpec, generate_case, generate_dataset
from .train import TrainConfig, dice_loss, lr_at, train
from .volume import (BrainMask, LabelMap, MultiModalCase, Volume3D,
                     compute_brain_mask, normalize_modality, one_hot_encode,
                     preprocess_case, read_case, region_mask, write_case)

__all__ = [
    "__version__",
    "AttenuationSchedule", "AugmentationConfig", "Tensor",
    "MetricsReport", "PredictionConfig", "RegionMetrics",
    "confusion_metrics", "dice_metric", "evaluate_case", "hausdorff",
    "predict", "NetworkConfig", "forward", "init_parameters",
    "load_checkpoint", "parameter_shapes", "save_checkpoint",
    "FeatureVector", "GLCMConfig", "assemble_features",
    "canonical_feature_names", "cooccurrence_matrix", "first_order_features",
    "glcm_features", "shape_features", "RngStream",
    "MLPEnsembleConfig", "RFRConfig", "SurvivalModel", "bin_survival",
    "cross_validate", "evaluate_survival", "load_survival_model",
    "predict_combined", "predict_mlp", "predict_rfr", "save_survival_model",
    "spearman_correlation", "train_survival_model",
    "SyntheticCaseSpec", "generate_case", "generate_dataset",
    "TrainConfig", "dice_loss", "lr_at", "train",
    "BrainMask", "LabelMap", "MultiModalCase", "Volume3D",
    "compute_brain_mask", "normalize_modality", "one_hot_encode",
    "preprocess_case", "read_case", "region_mask", "write_case",
]
