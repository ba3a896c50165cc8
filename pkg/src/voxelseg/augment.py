"""On-the-fly spatial and intensity augmentation with linear attenuation.

Spatial transforms (rotation, scaling, elastic deformation) compose into a
single backward warp resampled once: images trilinearly, labels by nearest
neighbor, out-of-bounds filled with 0. Mirroring and gamma correction act
directly on the arrays. Every transform fires independently with its own
probability, and all randomness flows through per-sample RNG substreams so
parallel and serial augmentation agree bit-exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .errors import ConfigError, RangeError
from .parallel import parallel_map
from .rng import RngStream

_PROB_FIELDS = ("p_rotation", "p_scale", "p_elastic", "p_gamma", "p_mirror")


@dataclass(frozen=True)
class AugmentationConfig:
    """Parameter ranges and per-transform application probabilities."""

    rotation_max: float = math.radians(15.0)
    scale_range: tuple = (0.85, 1.15)
    elastic_alpha: float = 10.0
    elastic_sigma: float = 5.0
    gamma_range: tuple = (0.8, 1.2)
    mirror_axes: tuple = (0, 1, 2)
    p_rotation: float = 0.5
    p_scale: float = 0.5
    p_elastic: float = 0.5
    p_gamma: float = 0.5
    p_mirror: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "scale_range", tuple(float(v) for v in self.scale_range))
        object.__setattr__(self, "gamma_range", tuple(float(v) for v in self.gamma_range))
        object.__setattr__(self, "mirror_axes", tuple(int(a) for a in self.mirror_axes))
        if self.scale_range[0] <= 0:
            raise ConfigError(f"scale_range low must be > 0, got {self.scale_range[0]}")
        if self.gamma_range[0] <= 0:
            raise ConfigError(f"gamma_range low must be > 0, got {self.gamma_range[0]}")
        if self.scale_range[0] > self.scale_range[1]:
            raise ConfigError(f"scale_range out of order: {self.scale_range}")
        if self.gamma_range[0] > self.gamma_range[1]:
            raise ConfigError(f"gamma_range out of order: {self.gamma_range}")
        if self.rotation_max < 0:
            raise ConfigError(f"rotation_max must be >= 0, got {self.rotation_max}")
        if not set(self.mirror_axes) <= {0, 1, 2}:
            raise ConfigError(f"mirror_axes must be a subset of (0, 1, 2), got {self.mirror_axes}")
        for name in _PROB_FIELDS:
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {p}")

    def to_dict(self) -> dict:
        return {
            "rotation_max": self.rotation_max,
            "scale_range": list(self.scale_range),
            "elastic_alpha": self.elastic_alpha,
            "elastic_sigma": self.elastic_sigma,
            "gamma_range": list(self.gamma_range),
            "mirror_axes": list(self.mirror_axes),
            **{name: getattr(self, name) for name in _PROB_FIELDS},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationConfig":
        known = {f for f in cls.__dataclass_fields__}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown augmentation keys {sorted(bad)}")
        kw = dict(d)
        for key in ("scale_range", "gamma_range", "mirror_axes"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


def default_initial_config() -> AugmentationConfig:
    """Aggressive starting parameters."""
    return AugmentationConfig()


def default_final_config() -> AugmentationConfig:
    """End-of-training parameters: half the deviation of every range."""
    return AugmentationConfig(
        rotation_max=math.radians(7.5),
        scale_range=(0.925, 1.075),
        elastic_alpha=5.0,
        gamma_range=(0.9, 1.1),
    )


@dataclass(frozen=True)
class AttenuationSchedule:
    """Linear interpolation between two configs over the training run."""

    initial: AugmentationConfig
    final: AugmentationConfig
    total_epochs: int

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ConfigError(f"total_epochs must be >= 1, got {self.total_epochs}")


def attenuate(schedule: AttenuationSchedule, epoch: int) -> AugmentationConfig:
    """Config at a given epoch; every scalar interpolates linearly."""
    if not 0 <= epoch <= schedule.total_epochs:
        raise RangeError(f"epoch {epoch} outside [0, {schedule.total_epochs}]")
    t = epoch / schedule.total_epochs
    a, b = schedule.initial, schedule.final

    def lerp(x, y):
        return (1.0 - t) * x + t * y

    return replace(
        a,
        rotation_max=lerp(a.rotation_max, b.rotation_max),
        scale_range=tuple(lerp(x, y) for x, y in zip(a.scale_range, b.scale_range)),
        elastic_alpha=lerp(a.elastic_alpha, b.elastic_alpha),
        elastic_sigma=lerp(a.elastic_sigma, b.elastic_sigma),
        gamma_range=tuple(lerp(x, y) for x, y in zip(a.gamma_range, b.gamma_range)),
        **{name: lerp(getattr(a, name), getattr(b, name)) for name in _PROB_FIELDS},
    )


def mirror(stack: np.ndarray, label, axes):
    """Flip a (C, D, H, W) stack and its (D, H, W) label along spatial axes."""
    axes = tuple(sorted(set(int(a) for a in axes)))
    if not set(axes) <= {0, 1, 2}:
        raise RangeError(f"mirror axes must be a subset of (0, 1, 2), got {axes}")
    out = stack
    lab = label
    for ax in axes:
        out = np.flip(out, axis=ax + 1)
        if lab is not None:
            lab = np.flip(lab, axis=ax)
    out = np.ascontiguousarray(out)
    lab = None if lab is None else np.ascontiguousarray(lab)
    return out, lab


def _rotation_matrix(angles) -> np.ndarray:
    """Rotation about array axes 0, 1, 2 composed as R0 @ R1 @ R2."""
    a0, a1, a2 = (float(a) for a in angles)
    c, s = math.cos(a0), math.sin(a0)
    r0 = np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)
    c, s = math.cos(a1), math.sin(a1)
    r1 = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)
    c, s = math.cos(a2), math.sin(a2)
    r2 = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)
    return r0 @ r1 @ r2


def elastic_displacement(shape, alpha: float, sigma: float, rng: RngStream) -> np.ndarray:
    """Smoothed random displacement field, shape (3, D, H, W), in voxels.

    Per-voxel uniform [-1, 1] noise per axis, separable Gaussian smoothing of
    width sigma (zero-padded borders), scaled by alpha.
    """
    field = rng.uniform(-1.0, 1.0, size=(3,) + tuple(shape))
    for ax in range(3):
        field[ax] = gaussian_filter(field[ax], sigma, mode="constant", cval=0.0)
    return field * alpha


def apply_spatial(stack: np.ndarray, label, rotation=(0.0, 0.0, 0.0),
                  scale: float = 1.0, displacement: Optional[np.ndarray] = None):
    """One composed backward-warp resample of a stack and its label.

    Each output voxel q samples the input at R^T (q - c) / scale + c + d(q)
    where c is the volume center and d the displacement field. Images are
    interpolated trilinearly, labels nearest-neighbor, out-of-bounds is 0.
    """
    if scale <= 0:
        raise RangeError(f"scale must be > 0, got {scale}")
    stack = np.asarray(stack)
    spatial = stack.shape[-3:]
    center = (np.asarray(spatial, dtype=np.float64) - 1.0) / 2.0
    inv = _rotation_matrix(rotation).T / float(scale)
    grid = np.indices(spatial, dtype=np.float64).reshape(3, -1)
    coords = inv @ (grid - center[:, None]) + center[:, None]
    coords = coords.reshape((3,) + tuple(spatial))
    if displacement is not None:
        coords = coords + displacement
    # snap coordinates within rounding error of a grid point so voxel-exact
    # transforms (half turns, flips) do not bleed border values into padding
    snapped = np.rint(coords)
    near = np.abs(coords - snapped) < 1e-9
    coords[near] = snapped[near]
    out = np.empty(stack.shape, dtype=np.float32)
    for ch in range(stack.shape[0]):
        out[ch] = map_coordinates(stack[ch].astype(np.float64), coords,
                                  order=1, mode="constant", cval=0.0)
    lab = None
    if label is not None:
        lab = map_coordinates(np.asarray(label), coords, order=0,
                              mode="constant", cval=0)
    return out, lab


def gamma_augment(stack: np.ndarray, gamma: float) -> np.ndarray:
    """Per-voxel x ** gamma on data already scaled into [0, 1]."""
    if gamma <= 0:
        raise RangeError(f"gamma must be > 0, got {gamma}")
    stack = np.asarray(stack)
    if not np.all((stack >= 0.0) & (stack <= 1.0)):
        raise RangeError("gamma correction requires values in [0, 1]")
    return np.power(stack, np.float32(gamma) if stack.dtype == np.float32 else gamma)


def _augment_sample(stack, label, config: AugmentationConfig, rng: RngStream):
    """Transforms for one sample, draws consumed in a fixed documented order."""
    rotation = (0.0, 0.0, 0.0)
    scale = 1.0
    displacement = None
    if rng.random() < config.p_rotation:
        rotation = tuple(rng.uniform(-config.rotation_max, config.rotation_max, size=3))
    if rng.random() < config.p_scale:
        scale = float(rng.uniform(config.scale_range[0], config.scale_range[1]))
    if rng.random() < config.p_elastic:
        displacement = elastic_displacement(stack.shape[-3:], config.elastic_alpha,
                                            config.elastic_sigma, rng)
    if any(rotation) or scale != 1.0 or displacement is not None:
        stack, label = apply_spatial(stack, label, rotation, scale, displacement)
    flip_axes = [ax for ax in sorted(config.mirror_axes) if rng.random() < config.p_mirror]
    if flip_axes:
        stack, label = mirror(stack, label, flip_axes)
    if rng.random() < config.p_gamma:
        gamma = float(rng.uniform(config.gamma_range[0], config.gamma_range[1]))
        stack = gamma_augment(stack, gamma)
    return np.ascontiguousarray(stack, dtype=np.float32), label


def augment_batch(batch: np.ndarray, label_batch, config: AugmentationConfig,
                  rng: RngStream):
    """Independently augment each sample of a (N, C, D, H, W) batch.

    Sample i uses substream i of rng, so results do not depend on whether
    samples run serially or in parallel. The same spatial transform hits all
    channels of a sample and its label; gamma touches the images only.
    """
    batch = np.asarray(batch)
    n = batch.shape[0]
    labels = None if label_batch is None else np.asarray(label_batch)

    def one(i):
        lab = None if labels is None else labels[i]
        return _augment_sample(batch[i], lab, config, rng.substream(i))

    results = parallel_map(one, range(n))
    out = np.stack([r[0] for r in results])
    if labels is None:
        return out, None
    out_labels = np.stack([r[1] for r in results])
    return out, out_labels
