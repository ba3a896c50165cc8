"""Shape, first-order and texture features over tumor subregions.

The assembled vector is frozen at 517 features: 13 shape features for each
of the 5 regions (ede, enh, nec, core, whole), 19 first-order features for
{enh, nec, core} x 4 modalities, and 28 co-occurrence features for
{enh, nec} x 4 modalities; an optional age column makes 518. Canonical
feature names are `<region>_<class>_<modality>_<feature>` (shape features
carry no modality part) in the order produced by canonical_feature_names.

Surface area uses a normal-corrected face estimator: every exposed voxel
face contributes its area weighted by the component of the local surface
normal (gradient of the Gaussian-smoothed mask in physical coordinates)
along the face axis. Plain face counting overestimates curved or oblique
surfaces by up to 50%; the weighting removes that bias, so a digitized
sphere scores sphericity close to 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DegenerateGLCM, EmptyRegion, ShapeMismatch
from .volume import MODALITY_NAMES, LabelMap, MultiModalCase, region_mask

REGION_ORDER = ("ede", "enh", "nec", "core", "whole")
FIRST_ORDER_REGIONS = ("enh", "nec", "core")
GLCM_REGIONS = ("enh", "nec")

SHAPE_FEATURES = (
    "volume",
    "surface_area",
    "surface_volume_ratio",
    "sphericity",
    "max_diameter_3d",
    "max_diameter_axial",
    "max_diameter_coronal",
    "max_diameter_sagittal",
    "major_axis_length",
    "minor_axis_length",
    "least_axis_length",
    "elongation",
    "flatness",
)

FIRST_ORDER_FEATURES = (
    "energy",
    "total_energy",
    "entropy",
    "minimum",
    "percentile10",
    "percentile90",
    "maximum",
    "mean",
    "median",
    "interquartile_range",
    "range",
    "mean_absolute_deviation",
    "robust_mean_absolute_deviation",
    "root_mean_squared",
    "standard_deviation",
    "skewness",
    "kurtosis",
    "variance",
    "uniformity",
)

GLCM_FEATURES = (
    "autocorrelation",
    "joint_average",
    "cluster_prominence",
    "cluster_shade",
    "cluster_tendency",
    "contrast",
    "correlation",
    "difference_average",
    "difference_entropy",
    "difference_variance",
    "joint_energy",
    "joint_entropy",
    "imc1",
    "imc2",
    "idm",
    "idmn",
    "id",
    "idn",
    "inverse_variance",
    "mcc",
    "maximum_probability",
    "sum_average",
    "sum_entropy",
    "sum_squares",
    # Classic aliases kept for the historical 28-feature set. dissimilarity
    # duplicates difference_average, homogeneity1 duplicates id and
    # homogeneity2 duplicates idm by identity; sum_variance is distinct.
    "sum_variance",
    "dissimilarity",
    "homogeneity1",
    "homogeneity2",
)

# The 13 unique direction offsets of the 26-neighborhood after merging
# symmetric pairs, in fixed lexicographic order (dz, dy, dx).
GLCM_DIRECTIONS = (
    (0, 0, 1), (0, 1, -1), (0, 1, 0), (0, 1, 1),
    (1, -1, -1), (1, -1, 0), (1, -1, 1),
    (1, 0, -1), (1, 0, 0), (1, 0, 1),
    (1, 1, -1), (1, 1, 0), (1, 1, 1),
)

_FIRST_ORDER_BINS = 32
_SURFACE_SMOOTH_SIGMA = 1.5  # voxels; controls the normal estimate only


@dataclass(frozen=True)
class GLCMConfig:
    n_bins: int = 32
    distances: tuple = (1,)
    directions: tuple = GLCM_DIRECTIONS
    symmetric: bool = True

    def __post_init__(self):
        if self.n_bins < 2:
            raise ConfigError(f"n_bins must be >= 2, got {self.n_bins}")
        object.__setattr__(self, "distances", tuple(int(d) for d in self.distances))
        object.__setattr__(self, "directions", tuple(tuple(d) for d in self.directions))
        if min(self.distances) < 1:
            raise ConfigError(f"distances must be >= 1, got {self.distances}")

    def to_dict(self) -> dict:
        return {
            "n_bins": self.n_bins,
            "distances": list(self.distances),
            "directions": [list(d) for d in self.directions],
            "symmetric": self.symmetric,
        }


def _mask_array(mask) -> np.ndarray:
    if isinstance(mask, np.ndarray):
        return mask.astype(bool)
    return np.asarray(getattr(mask, "data", mask)).astype(bool)


def _image_array(image) -> np.ndarray:
    if isinstance(image, np.ndarray):
        return image
    return np.asarray(getattr(image, "data", image))


# ---------------------------------------------------------------------------
# Shape


def _surface_area(mask: np.ndarray, spacing) -> float:
    sz, sy, sx = (float(s) for s in spacing)
    face_area = (sy * sx, sz * sx, sz * sy)
    sigma = [_SURFACE_SMOOTH_SIGMA] * 3
    smooth = gaussian_filter(mask.astype(np.float64), sigma, mode="constant", cval=0.0)
    grad = np.gradient(smooth, sz, sy, sx)
    norm = np.sqrt(grad[0] ** 2 + grad[1] ** 2 + grad[2] ** 2)
    total = 0.0
    padded = np.pad(mask, 1)
    for ax in range(3):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[ax] = slice(0, -2)
        hi[ax] = slice(2, None)
        exposed_lo = mask & ~padded[tuple(lo)]
        exposed_hi = mask & ~padded[tuple(hi)]
        exposed = exposed_lo.astype(np.int8) + exposed_hi.astype(np.int8)
        # |normal component along this axis|, 1 where the normal vanishes
        # (isolated voxels) so a lone voxel still reports its box area.
        weight = np.ones_like(norm)
        ok = norm > 1e-12
        weight[ok] = np.abs(grad[ax][ok]) / norm[ok]
        total += face_area[ax] * float((exposed * weight).sum())
    return total


def _max_pairwise_distance(points: np.ndarray) -> float:
    if len(points) < 2:
        return 0.0
    best = 0.0
    block = 2048
    for i in range(0, len(points), block):
        chunk = points[i:i + block]
        d = chunk[:, None, :] - points[None, :, :]
        sq = (d ** 2).sum(axis=-1)
        best = max(best, float(sq.max()))
    return math.sqrt(best)


def _boundary_mask(mask: np.ndarray) -> np.ndarray:
    p = np.pad(mask, 1)
    interior = (
        p[:-2, 1:-1, 1:-1] & p[2:, 1:-1, 1:-1]
        & p[1:-1, :-2, 1:-1] & p[1:-1, 2:, 1:-1]
        & p[1:-1, 1:-1, :-2] & p[1:-1, 1:-1, 2:]
    )
    return mask & ~interior


def shape_features(mask, spacing) -> np.ndarray:
    """The 13 shape features in SHAPE_FEATURES order; intensity-independent."""
    m = _mask_array(mask)
    if not m.any():
        raise EmptyRegion("shape features need a nonempty mask")
    sz, sy, sx = (float(s) for s in spacing)
    voxel_volume = sz * sy * sx
    n = int(m.sum())
    volume = n * voxel_volume
    area = _surface_area(m, spacing)
    sphericity = (math.pi ** (1.0 / 3.0)) * (6.0 * volume) ** (2.0 / 3.0) / area

    boundary = _boundary_mask(m)
    pts = np.argwhere(boundary).astype(np.float64) * np.array([sz, sy, sx])
    max3d = _max_pairwise_distance(pts)

    # Per-orientation 2D diameter: max over slices of the in-plane max
    # pairwise distance of boundary voxels.
    diam2d = []
    for ax in range(3):
        best = 0.0
        idx = np.argwhere(boundary)
        if len(idx):
            for v in np.unique(idx[:, ax]):
                sel = idx[idx[:, ax] == v]
                plane = np.delete(sel, ax, axis=1).astype(np.float64)
                plane_sp = np.delete(np.array([sz, sy, sx]), ax)
                d = _max_pairwise_distance(
                    np.concatenate([plane * plane_sp, np.zeros((len(plane), 1))], axis=1))
                best = max(best, d)
        diam2d.append(best)

    coords = np.argwhere(m).astype(np.float64) * np.array([sz, sy, sx])
    centered = coords - coords.mean(axis=0)
    cov = centered.T @ centered / len(coords)
    eigvals = np.sort(np.linalg.eigvalsh(cov))[::-1]
    eigvals = np.clip(eigvals, 0.0, None)
    axis_lengths = 4.0 * np.sqrt(eigvals)
    if eigvals[0] > 0:
        elongation = math.sqrt(eigvals[1] / eigvals[0])
        flatness = math.sqrt(eigvals[2] / eigvals[0])
    else:
        # single voxel: treat a point as isotropic
        elongation = 1.0
        flatness = 1.0

    return np.array([
        volume,
        area,
        area / volume,
        sphericity,
        max3d,
        diam2d[0],
        diam2d[1],
        diam2d[2],
        axis_lengths[0],
        axis_lengths[1],
        axis_lengths[2],
        elongation,
        flatness,
    ], dtype=np.float64)


# ---------------------------------------------------------------------------
# First order


def _histogram_probabilities(values: np.ndarray, n_bins: int) -> np.ndarray:
    lo = values.min()
    hi = values.max()
    if hi == lo:
        return np.array([1.0])
    idx = np.minimum(((values - lo) / (hi - lo) * n_bins).astype(np.int64), n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins).astype(np.float64)
    return counts / counts.sum()


def first_order_features(image, mask) -> np.ndarray:
    """The 19 first-order features in FIRST_ORDER_FEATURES order.

    Entropy and uniformity discretize the region intensities into 32
    equal-width bins over [min, max]. Moments are population moments;
    skewness and kurtosis of a constant region are defined as 0.
    """
    data = _image_array(image)
    m = _mask_array(mask)
    if data.shape != m.shape:
        raise ShapeMismatch(f"image {data.shape} vs mask {m.shape}")
    if not m.any():
        raise EmptyRegion("first-order features need a nonempty mask")
    x = data[m].astype(np.float64)
    n = x.size
    voxel_volume = 1.0
    if hasattr(image, "spacing"):
        voxel_volume = float(np.prod(image.spacing))

    mean = x.mean()
    centered = x - mean
    m2 = float((centered ** 2).mean())
    m3 = float((centered ** 3).mean())
    m4 = float((centered ** 4).mean())
    skewness = m3 / m2 ** 1.5 if m2 > 0 else 0.0
    kurtosis = m4 / m2 ** 2 if m2 > 0 else 0.0

    p10, p25, median, p75, p90 = np.percentile(x, [10, 25, 50, 75, 90])
    robust = x[(x >= p10) & (x <= p90)]
    rmad = float(np.abs(robust - robust.mean()).mean()) if robust.size else 0.0

    probs = _histogram_probabilities(x, _FIRST_ORDER_BINS)
    nz = probs[probs > 0]
    entropy = float(-(nz * np.log2(nz)).sum())
    uniformity = float((probs ** 2).sum())

    energy = float((x ** 2).sum())
    return np.array([
        energy,
        voxel_volume * energy,
        entropy,
        float(x.min()),
        float(p10),
        float(p90),
        float(x.max()),
        float(mean),
        float(median),
        float(p75 - p25),
        float(x.max() - x.min()),
        float(np.abs(centered).mean()),
        rmad,
        math.sqrt(float((x ** 2).mean())),
        math.sqrt(m2),
        skewness,
        kurtosis,
        m2,
        uniformity,
    ], dtype=np.float64)


# ---------------------------------------------------------------------------
# GLCM


def bin_intensities(values: np.ndarray, n_bins: int) -> np.ndarray:
    """Min-max equal-width binning to levels 1..n_bins."""
    lo = values.min()
    hi = values.max()
    if hi == lo:
        return np.ones(values.shape, dtype=np.int64)
    idx = np.minimum(((values - lo) / (hi - lo) * n_bins).astype(np.int64), n_bins - 1)
    return idx + 1


def cooccurrence_matrix(binned: np.ndarray, mask: np.ndarray, offset,
                        n_bins: int, distance: int = 1) -> np.ndarray:
    """Symmetric normalized co-occurrence matrix for one direction offset.

    Counts pairs (v, v + distance*offset) with both voxels in the mask, adds
    the transpose, normalizes to sum 1. Returns the zero matrix when the
    direction has no valid pairs.
    """
    dz, dy, dx = (int(d) * distance for d in offset)
    shape = binned.shape

    def src_slice(d, size):
        if d >= 0:
            return slice(0, size - d)
        return slice(-d, size)

    def dst_slice(d, size):
        if d >= 0:
            return slice(d, size)
        return slice(0, size + d)

    src = tuple(src_slice(d, s) for d, s in zip((dz, dy, dx), shape))
    dst = tuple(dst_slice(d, s) for d, s in zip((dz, dy, dx), shape))
    valid = mask[src] & mask[dst]
    i = binned[src][valid] - 1
    j = binned[dst][valid] - 1
    if i.size == 0:
        return np.zeros((n_bins, n_bins), dtype=np.float64)
    counts = np.bincount(i * n_bins + j, minlength=n_bins * n_bins)
    mat = counts.reshape(n_bins, n_bins).astype(np.float64)
    mat = mat + mat.T
    return mat / mat.sum()


def _glcm_scalar_features(p: np.ndarray) -> dict:
    """All 28 features of one normalized symmetric co-occurrence matrix."""
    n = p.shape[0]
    levels = np.arange(1, n + 1, dtype=np.float64)
    i = levels[:, None]
    j = levels[None, :]
    px = p.sum(axis=1)
    py = p.sum(axis=0)
    mu_x = float((levels * px).sum())
    mu_y = float((levels * py).sum())
    var_x = float(((levels - mu_x) ** 2 * px).sum())
    var_y = float(((levels - mu_y) ** 2 * py).sum())

    # diagonal-band marginals
    k_sum = np.arange(2, 2 * n + 1, dtype=np.float64)
    p_sum = np.zeros(k_sum.size)
    k_diff = np.arange(0, n, dtype=np.float64)
    p_diff = np.zeros(k_diff.size)
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    np.add.at(p_sum, ii.ravel() + jj.ravel(), p.ravel())
    np.add.at(p_diff, np.abs(ii - jj).ravel(), p.ravel())

    def entropy_of(q):
        nz = q[q > 0]
        return float(-(nz * np.log2(nz)).sum())

    joint_entropy = entropy_of(p)
    hx = entropy_of(px)
    hy = entropy_of(py)
    outer = px[:, None] * py[None, :]
    nz = (p > 0) & (outer > 0)
    hxy1 = float(-(p[nz] * np.log2(outer[nz])).sum())
    nz2 = outer > 0
    hxy2 = float(-(outer[nz2] * np.log2(outer[nz2])).sum())
    denom = max(hx, hy)
    imc1 = (joint_entropy - hxy1) / denom if denom > 0 else 0.0
    imc2 = math.sqrt(max(0.0, 1.0 - math.exp(-2.0 * (hxy2 - joint_entropy))))

    diff_avg = float((k_diff * p_diff).sum())
    sum_avg = float((k_sum * p_sum).sum())

    if var_x > 0 and var_y > 0:
        correlation = (float((i * j * p).sum()) - mu_x * mu_y) / math.sqrt(var_x * var_y)
    else:
        correlation = 1.0

    # second largest eigenvalue of the transition-style matrix Q
    active = px > 0
    pa = p[np.ix_(active, active)]
    pxa = px[active]
    pya = py[active]
    if pa.shape[0] > 1:
        q = (pa / pxa[:, None]) @ (pa / pya[:, None]).T
        eigs = np.sort(np.real(np.linalg.eigvals(q)))[::-1]
        mcc = math.sqrt(min(max(float(eigs[1]), 0.0), 1.0))
    else:
        mcc = 1.0

    off = np.abs(i - j)
    inv_var_mask = off > 0
    idm = float((p / (1.0 + (i - j) ** 2)).sum())
    idmn = float((p / (1.0 + ((i - j) / n) ** 2)).sum())
    id_ = float((p / (1.0 + off)).sum())
    idn = float((p / (1.0 + off / n)).sum())
    inverse_variance = float((p[inv_var_mask] / (i - j)[inv_var_mask] ** 2).sum())

    return {
        "autocorrelation": float((i * j * p).sum()),
        "joint_average": mu_x,
        "cluster_prominence": float(((i + j - mu_x - mu_y) ** 4 * p).sum()),
        "cluster_shade": float(((i + j - mu_x - mu_y) ** 3 * p).sum()),
        "cluster_tendency": float(((i + j - mu_x - mu_y) ** 2 * p).sum()),
        "contrast": float(((i - j) ** 2 * p).sum()),
        "correlation": correlation,
        "difference_average": diff_avg,
        "difference_entropy": entropy_of(p_diff),
        "difference_variance": float(((k_diff - diff_avg) ** 2 * p_diff).sum()),
        "joint_energy": float((p ** 2).sum()),
        "joint_entropy": joint_entropy,
        "imc1": imc1,
        "imc2": imc2,
        "idm": idm,
        "idmn": idmn,
        "id": id_,
        "idn": idn,
        "inverse_variance": inverse_variance,
        "mcc": mcc,
        "maximum_probability": float(p.max()),
        "sum_average": sum_avg,
        "sum_entropy": entropy_of(p_sum),
        "sum_squares": float(((i - mu_x) ** 2 * p).sum()),
        "sum_variance": float(((k_sum - sum_avg) ** 2 * p_sum).sum()),
        "dissimilarity": diff_avg,
        "homogeneity1": id_,
        "homogeneity2": idm,
    }


def degenerate_glcm_values() -> np.ndarray:
    """Feature values in the single-gray-level limit (p is the 1x1 matrix [1]).

    Derived analytically: all spread measures vanish, all closeness measures
    saturate at 1, sum_average is 2 because the level indices start at 1.
    """
    table = {
        "autocorrelation": 1.0, "joint_average": 1.0, "cluster_prominence": 0.0,
        "cluster_shade": 0.0, "cluster_tendency": 0.0, "contrast": 0.0,
        "correlation": 1.0, "difference_average": 0.0, "difference_entropy": 0.0,
        "difference_variance": 0.0, "joint_energy": 1.0, "joint_entropy": 0.0,
        "imc1": 0.0, "imc2": 0.0, "idm": 1.0, "idmn": 1.0, "id": 1.0, "idn": 1.0,
        "inverse_variance": 0.0, "mcc": 1.0, "maximum_probability": 1.0,
        "sum_average": 2.0, "sum_entropy": 0.0, "sum_squares": 0.0,
        "sum_variance": 0.0, "dissimilarity": 0.0, "homogeneity1": 1.0,
        "homogeneity2": 1.0,
    }
    return np.array([table[name] for name in GLCM_FEATURES], dtype=np.float64)


def glcm_features(image, mask, config: Optional[GLCMConfig] = None) -> np.ndarray:
    """The 28 co-occurrence features, averaged over directions and distances.

    Raises DegenerateGLCM when the region has fewer than 2 distinct binned
    gray levels or no co-occurring voxel pair in any direction; callers that
    need a fixed-length vector substitute degenerate_glcm_values().
    """
    if config is None:
        config = GLCMConfig()
    data = _image_array(image)
    m = _mask_array(mask)
    if data.shape != m.shape:
        raise ShapeMismatch(f"image {data.shape} vs mask {m.shape}")
    if not m.any():
        raise EmptyRegion("co-occurrence features need a nonempty mask")
    values = data[m].astype(np.float64)
    if values.max() == values.min():
        raise DegenerateGLCM("region has a single gray level")
    binned = np.zeros(data.shape, dtype=np.int64)
    binned[m] = bin_intensities(values, config.n_bins)

    per_direction = []
    for distance in config.distances:
        for offset in config.directions:
            mat = cooccurrence_matrix(binned, m, offset, config.n_bins, distance)
            if mat.sum() == 0:
                continue
            feats = _glcm_scalar_features(mat)
            per_direction.append([feats[name] for name in GLCM_FEATURES])
    if not per_direction:
        raise DegenerateGLCM("no co-occurring voxel pairs in any direction")
    return np.asarray(per_direction, dtype=np.float64).mean(axis=0)


# ---------------------------------------------------------------------------
# Assembly


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    names: tuple
    present: np.ndarray

    def __len__(self):
        return len(self.values)

    def as_dict(self) -> dict:
        return dict(zip(self.names, self.values))


def canonical_feature_names(with_age: bool = False) -> tuple:
    names = []
    for region in REGION_ORDER:
        for feat in SHAPE_FEATURES:
            names.append(f"{region}_shape_{feat}")
    for region in FIRST_ORDER_REGIONS:
        for modality in MODALITY_NAMES:
            for feat in FIRST_ORDER_FEATURES:
                names.append(f"{region}_firstorder_{modality}_{feat}")
    for region in GLCM_REGIONS:
        for modality in MODALITY_NAMES:
            for feat in GLCM_FEATURES:
                names.append(f"{region}_glcm_{modality}_{feat}")
    if with_age:
        names.append("age")
    return tuple(names)


def assemble_features(case: MultiModalCase, seg: Optional[LabelMap] = None,
                      age: Optional[float] = None,
                      glcm_config: Optional[GLCMConfig] = None) -> FeatureVector:
    """Assemble the full 517-feature vector (518 with age) for one case.

    Empty regions contribute zeros with their presence flags set false, so
    the vector length never varies. Degenerate co-occurrence regions (single
    gray level) take the documented analytic limit values instead.
    """
    if glcm_config is None:
        glcm_config = GLCMConfig()
    if seg is None:
        seg = case.label
    if seg is None:
        raise EmptyRegion("feature assembly needs a segmentation")
    masks = {r: region_mask(seg, r).data for r in REGION_ORDER}
    spacing = case.spacing
    stacks = {name: vol for name, vol in zip(MODALITY_NAMES, case.modalities)}

    values = []
    present = []

    for region in REGION_ORDER:
        m = masks[region]
        if m.any():
            values.extend(shape_features(m, spacing))
            present.extend([True] * len(SHAPE_FEATURES))
        else:
            values.extend([0.0] * len(SHAPE_FEATURES))
            present.extend([False] * len(SHAPE_FEATURES))

    for region in FIRST_ORDER_REGIONS:
        m = masks[region]
        for modality in MODALITY_NAMES:
            if m.any():
                values.extend(first_order_features(stacks[modality], m))
                present.extend([True] * len(FIRST_ORDER_FEATURES))
            else:
                values.extend([0.0] * len(FIRST_ORDER_FEATURES))
                present.extend([False] * len(FIRST_ORDER_FEATURES))

    for region in GLCM_REGIONS:
        m = masks[region]
        for modality in MODALITY_NAMES:
            if m.any():
                try:
                    values.extend(glcm_features(stacks[modality], m, glcm_config))
                except DegenerateGLCM:
                    values.extend(degenerate_glcm_values())
                present.extend([True] * len(GLCM_FEATURES))
            else:
                values.extend([0.0] * len(GLCM_FEATURES))
                present.extend([False] * len(GLCM_FEATURES))

    names = canonical_feature_names(with_age=age is not None)
    if age is not None:
        values.append(float(age))
        present.append(True)
    vec = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(vec)):
        bad = [names[k] for k in np.where(~np.isfinite(vec))[0]]
        raise EmptyRegion(f"non-finite feature values for {bad[:5]}")
    return FeatureVector(vec, names, np.asarray(present, dtype=bool))
