"""Whole-volume inference with test-time augmentation, plus evaluation metrics.

Prediction pads a preprocessed case to the network's divisibility constraint,
runs every enabled variant (8 mirror combinations, Monte-Carlo dropout
samples, ensemble members in sorted checkpoint order), averages the softmax
maps in float64, and argmax-decodes back to labels {0, 1, 2, 4}.

Metrics follow the benchmark conventions: overlap scores per tumor region
(whole, core, enhancing) with an explicit empty-set policy, and a symmetric
surface Hausdorff distance (95th percentile by default) in millimetres.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import CheckpointError, ConfigError, EmptyMask, ShapeMismatch
from .network import NetworkConfig, forward, load_checkpoint
from .parallel import parallel_map
from .rng import RngStream
from .volume import LabelMap, MultiModalCase, decode_one_hot, region_mask

REPORT_REGIONS = ("whole", "core", "enhancing")

# All 8 mirror combinations in a fixed order: bitmask over spatial axes.
_MIRROR_COMBOS = tuple(
    tuple(ax for ax in (0, 1, 2) if mask >> ax & 1) for mask in range(8)
)


@dataclass(frozen=True)
class PredictionConfig:
    mirror_tta: bool = False
    dropout_samples: int = 0
    ensemble_checkpoints: tuple = ()
    dropout_seed: int = 0

    def __post_init__(self):
        if self.dropout_samples < 0:
            raise ConfigError(f"dropout_samples must be >= 0, got {self.dropout_samples}")
        object.__setattr__(self, "ensemble_checkpoints",
                           tuple(self.ensemble_checkpoints))


def load_models(checkpoint_paths):
    """Load (config, params) pairs in sorted path order."""
    models = []
    for path in sorted(str(p) for p in checkpoint_paths):
        models.append(load_checkpoint(path))
    if not models:
        raise CheckpointError("no checkpoints given")
    return models


def _pad_to_divisor(x: np.ndarray, divisor: int):
    spatial = x.shape[-3:]
    pad = [(-s) % divisor for s in spatial]
    if not any(pad):
        return x, spatial
    widths = [(0, 0)] * (x.ndim - 3) + [(0, p) for p in pad]
    return np.pad(x, widths), spatial


def _member_softmax(network_config: NetworkConfig, params: dict, x: np.ndarray,
                    config: PredictionConfig, member_idx: int) -> np.ndarray:
    """Averaged softmax for one model over mirror/dropout variants, float64."""
    combos = _MIRROR_COMBOS if config.mirror_tta else (_MIRROR_COMBOS[0],)
    samples = max(1, config.dropout_samples)
    mode = "mc_dropout" if config.dropout_samples > 0 else "eval"
    root = RngStream(config.dropout_seed)
    acc = None
    for s in range(samples):
        for c, axes in enumerate(combos):
            xin = x
            for ax in axes:
                xin = np.flip(xin, axis=2 + ax)
            rng = root.substream(member_idx, s, c) if mode == "mc_dropout" else None
            _, softmax = forward(network_config, params,
                                 np.ascontiguousarray(xin), mode=mode, rng=rng)
            out = softmax.data[0].astype(np.float64)
            for ax in axes:
                out = np.flip(out, axis=1 + ax)
            acc = out.copy() if acc is None else acc + out
    return acc / (samples * len(combos))


def predict(case: MultiModalCase, model=None, config: Optional[PredictionConfig] = None):
    """Segment one preprocessed case; returns (softmax array, LabelMap).

    model may be a single (network_config, params) pair or a list of them;
    when omitted, config.ensemble_checkpoints is loaded instead. The softmax
    is the mean over all ensemble members, dropout samples and mirror
    variants; the label map is its per-voxel argmax.
    """
    if config is None:
        config = PredictionConfig()
    if model is None:
        models = load_models(config.ensemble_checkpoints)
    elif isinstance(model, tuple) and len(model) == 2 and isinstance(model[0], NetworkConfig):
        models = [model]
    else:
        models = list(model)
    divisor = max(cfg.spatial_divisor for cfg, _ in models)
    x = case.stack()[None]
    x, orig_spatial = _pad_to_divisor(x, divisor)

    def run_member(i):
        cfg, params = models[i]
        return _member_softmax(cfg, params, x, config, i)

    member_maps = parallel_map(run_member, range(len(models)))
    acc = member_maps[0].copy()
    for m in member_maps[1:]:
        acc += m
    softmax = acc / len(models)
    sl = tuple(slice(0, s) for s in orig_spatial)
    softmax = np.ascontiguousarray(softmax[(slice(None),) + sl].astype(np.float32))
    label = LabelMap(decode_one_hot(softmax))
    return softmax, label


# ---------------------------------------------------------------------------
# Metrics


def _as_bool(mask) -> np.ndarray:
    if isinstance(mask, np.ndarray):
        return mask.astype(bool)
    return np.asarray(getattr(mask, "data", mask)).astype(bool)


def dice_metric(pred_mask, ref_mask) -> float:
    """2|A n B| / (|A| + |B|); both masks empty gives the sentinel 1.0."""
    a = _as_bool(pred_mask)
    b = _as_bool(ref_mask)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    na = int(a.sum())
    nb = int(b.sum())
    if na + nb == 0:
        return 1.0
    inter = int(np.logical_and(a, b).sum())
    return 2.0 * inter / (na + nb)


def confusion_metrics(pred_mask, ref_mask):
    """(sensitivity, specificity, ppv) with the empty-set sentinel policy.

    Sensitivity and ppv degenerate when the reference (resp. prediction) is
    empty: 1.0 if the other mask is empty too, else 0.0. Specificity with no
    reference-negative voxels is 1.0.
    """
    a = _as_bool(pred_mask)
    b = _as_bool(ref_mask)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    tp = int(np.logical_and(a, b).sum())
    fp = int(np.logical_and(a, ~b).sum())
    fn = int(np.logical_and(~a, b).sum())
    tn = a.size - tp - fp - fn
    if tp + fn == 0:
        sensitivity = 1.0 if tp + fp == 0 else 0.0
    else:
        sensitivity = tp / (tp + fn)
    if tn + fp == 0:
        specificity = 1.0
    else:
        specificity = tn / (tn + fp)
    if tp + fp == 0:
        ppv = 1.0 if tp + fn == 0 else 0.0
    else:
        ppv = tp / (tp + fp)
    return sensitivity, specificity, ppv


def _boundary_points(mask: np.ndarray, spacing) -> np.ndarray:
    """Physical coordinates of 6-connectivity boundary voxel centers."""
    p = np.pad(mask, 1)
    interior = (
        p[:-2, 1:-1, 1:-1] & p[2:, 1:-1, 1:-1]
        & p[1:-1, :-2, 1:-1] & p[1:-1, 2:, 1:-1]
        & p[1:-1, 1:-1, :-2] & p[1:-1, 1:-1, 2:]
    )
    boundary = mask & ~interior
    pts = np.argwhere(boundary).astype(np.float64)
    return pts * np.asarray(spacing, dtype=np.float64)


def _directed_min_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Min Euclidean distance from each point of a to the set b."""
    out = np.empty(len(a))
    block = 2048
    for i in range(0, len(a), block):
        chunk = a[i:i + block]
        best = np.full(len(chunk), np.inf)
        for j in range(0, len(b), block):
            d = chunk[:, None, :] - b[None, j:j + block, :]
            sq = (d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1]) + d[..., 2] * d[..., 2]
            best = np.minimum(best, sq.min(axis=1))
        out[i:i + block] = np.sqrt(best)
    return out


def hausdorff(pred_mask, ref_mask, spacing, percentile: float = 95) -> float:
    """Symmetric surface distance in mm at the given percentile (95 or 100).

    Surface points are the centers of 6-connectivity boundary voxels scaled
    by spacing; each directed distance set is reduced at the percentile
    (linear interpolation; 100 is the classic maximum) and the two directions
    are combined by max.
    """
    a = _as_bool(pred_mask)
    b = _as_bool(ref_mask)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise EmptyMask("hausdorff distance needs two nonempty masks")
    pa = _boundary_points(a, spacing)
    pb = _boundary_points(b, spacing)
    d_ab = _directed_min_dists(pa, pb)
    d_ba = _directed_min_dists(pb, pa)
    if percentile >= 100:
        return float(max(d_ab.max(), d_ba.max()))
    return float(max(np.percentile(d_ab, percentile), np.percentile(d_ba, percentile)))


@dataclass(frozen=True)
class RegionMetrics:
    dice: float
    sensitivity: float
    specificity: float
    ppv: float
    hausdorff: Optional[float]
    empty_reference: bool

    def to_dict(self) -> dict:
        return {
            "dice": self.dice,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "ppv": self.ppv,
            "hausdorff": self.hausdorff,
            "empty_reference": self.empty_reference,
        }


@dataclass(frozen=True)
class MetricsReport:
    whole: RegionMetrics
    core: RegionMetrics
    enhancing: RegionMetrics

    def region(self, name: str) -> RegionMetrics:
        return getattr(self, name)

    def to_dict(self) -> dict:
        return {name: self.region(name).to_dict() for name in REPORT_REGIONS}


def evaluate_case(pred: LabelMap, ref: LabelMap, spacing,
                  hausdorff_percentile: float = 95) -> MetricsReport:
    """All metrics for the three reported tumor regions of one case.

    The Hausdorff entry is None when either mask of a region is empty.
    """
    if pred.shape != ref.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs reference {ref.shape}")
    per_region = {}
    for name in REPORT_REGIONS:
        pm = region_mask(pred, name).data
        rm = region_mask(ref, name).data
        sens, spec, ppv = confusion_metrics(pm, rm)
        hd = None
        if pm.any() and rm.any():
            hd = hausdorff(pm, rm, spacing, hausdorff_percentile)
        per_region[name] = RegionMetrics(
            dice=dice_metric(pm, rm),
            sensitivity=sens,
            specificity=spec,
            ppv=ppv,
            hausdorff=hd,
            empty_reference=not bool(rm.any()),
        )
    return MetricsReport(**per_region)


# ---------------------------------------------------------------------------
# Result emission

_CSV_HEADER = ("case_id", "region", "dice", "sensitivity", "specificity",
               "ppv", "hausdorff")
_SUMMARY_METRICS = ("dice", "sensitivity", "specificity", "ppv", "hausdorff")


def _fmt(value) -> str:
    if value is None:
        return ""
    return repr(float(value))


def write_metrics_csv(path: str, reports: dict) -> None:
    """Per-case CSV, one row per (case, region), cases in sorted order."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(_CSV_HEADER)
        for case_id in sorted(reports):
            report = reports[case_id]
            for name in REPORT_REGIONS:
                m = report.region(name)
                writer.writerow([case_id, name, _fmt(m.dice), _fmt(m.sensitivity),
                                 _fmt(m.specificity), _fmt(m.ppv), _fmt(m.hausdorff)])


def _stats(values) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    q25, median, q75 = np.percentile(arr, [25, 50, 75])
    return {
        "mean": float(arr.mean()),
        "median": float(median),
        "q25": float(q25),
        "q75": float(q75),
        "n": int(arr.size),
    }


def summarize_metrics(reports: dict) -> dict:
    """Mean/median/quartile summary per region and metric.

    Two aggregation policies are reported side by side: include_empty keeps
    cases whose reference region is empty (their overlap sentinels count),
    exclude_empty drops them. Hausdorff entries of None are always skipped.
    """
    summary = {}
    for name in REPORT_REGIONS:
        summary[name] = {}
        for metric in _SUMMARY_METRICS:
            entry = {}
            for policy in ("include_empty", "exclude_empty"):
                vals = []
                for report in reports.values():
                    m = report.region(name)
                    if policy == "exclude_empty" and m.empty_reference:
                        continue
                    v = getattr(m, metric)
                    if v is None:
                        continue
                    vals.append(v)
                entry[policy] = _stats(vals) if vals else None
            summary[name][metric] = entry
    return summary


def write_metrics_summary(path: str, reports: dict) -> None:
    with open(path, "w") as f:
        json.dump(summarize_metrics(reports), f, sort_keys=True, indent=1)
        f.write("\n")
