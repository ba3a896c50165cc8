"""Synthetic nested-shell tumor phantoms for desk-scale runs and tests.

A phantom is a spherical "brain" of nonzero intensity on a zero background
with three concentric tumor shells: enhancing tumor (label 4) innermost,
a necrosis ring (label 1), and an edema ring (label 2), so the composite
regions nest the way the real labels do (enhancing within core within
whole). Modalities get distinct per-shell intensity offsets plus gaussian
noise. Survival metadata is generated with a simple size-to-survival signal
so the regression stage has something to learn.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import SpecError
from .rng import RngStream
from .volume import LabelMap, MultiModalCase, Volume3D, write_case

# Per-modality intensities for (brain, edema, necrosis, enhancing), roughly
# mimicking the relative contrasts of the four MRI sequences.
INTENSITY_PROFILE = {
    "t1": (600.0, 500.0, 250.0, 800.0),
    "t1ce": (600.0, 550.0, 250.0, 1200.0),
    "t2": (500.0, 900.0, 700.0, 650.0),
    "flair": (450.0, 1000.0, 600.0, 700.0),
}


@dataclass(frozen=True)
class SyntheticCaseSpec:
    shape: tuple = (32, 32, 32)
    center: Optional[tuple] = None
    r_enh: float = 3.0
    r_core: float = 5.0
    r_whole: float = 8.0
    brain_radius_frac: float = 0.45
    noise_sigma: float = 20.0
    spacing: tuple = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if self.center is not None:
            object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if len(self.shape) != 3 or min(self.shape) < 8:
            raise SpecError(f"shape must be 3 dims of at least 8 voxels, got {self.shape}")
        if not 0 < self.r_enh <= self.r_core <= self.r_whole:
            raise SpecError(
                f"shells must nest: 0 < r_enh <= r_core <= r_whole, got "
                f"({self.r_enh}, {self.r_core}, {self.r_whole})")
        brain_r = self.brain_radius_frac * min(self.shape)
        if self.r_whole > brain_r:
            raise SpecError(f"r_whole {self.r_whole} exceeds brain radius {brain_r:.1f}")

    def to_dict(self) -> dict:
        return {
            "shape": list(self.shape),
            "center": list(self.center) if self.center else None,
            "r_enh": self.r_enh,
            "r_core": self.r_core,
            "r_whole": self.r_whole,
            "brain_radius_frac": self.brain_radius_frac,
            "noise_sigma": self.noise_sigma,
            "spacing": list(self.spacing),
            "seed": self.seed,
        }


def _distance_field(shape, center) -> np.ndarray:
    grid = np.indices(shape, dtype=np.float64)
    c = np.asarray(center, dtype=np.float64)
    return np.sqrt(((grid - c[:, None, None, None]) ** 2).sum(axis=0))


def generate_case(spec: SyntheticCaseSpec, rng: RngStream,
                  case_id: str = "case") -> MultiModalCase:
    """One phantom with raw (unnormalized) intensities and full metadata."""
    center = spec.center
    if center is None:
        center = tuple((s - 1) / 2.0 for s in spec.shape)
    dist = _distance_field(spec.shape, center)
    brain_r = spec.brain_radius_frac * min(spec.shape)
    brain = dist <= brain_r

    label = np.zeros(spec.shape, dtype=np.int16)
    label[dist <= spec.r_whole] = 2
    label[dist <= spec.r_core] = 1
    label[dist <= spec.r_enh] = 4

    volumes = []
    for m, name in enumerate(INTENSITY_PROFILE):
        base, ede, nec, enh = INTENSITY_PROFILE[name]
        data = np.zeros(spec.shape, dtype=np.float64)
        data[brain] = base
        data[label == 2] = ede
        data[label == 1] = nec
        data[label == 4] = enh
        noise = rng.substream(m).normal(0.0, spec.noise_sigma, spec.shape)
        data[brain] += noise[brain]
        # keep the background exactly zero and the brain strictly nonzero
        data[brain] = np.maximum(data[brain], 1.0)
        volumes.append(Volume3D(data.astype(np.float32), spec.spacing))

    meta_rng = rng.substream(99)
    age = float(np.round(meta_rng.uniform(40.0, 75.0), 1))
    whole_voxels = int((label != 0).sum())
    survival = float(np.round(max(
        30.0, 1800.0 - 0.6 * whole_voxels + meta_rng.normal(0.0, 60.0)), 1))
    return MultiModalCase(tuple(volumes), label=LabelMap(label), age=age,
                          survival_days=survival, case_id=case_id)


def generate_dataset(spec: SyntheticCaseSpec, n_cases: int,
                     out_dir: Optional[str] = None, jitter: bool = True) -> list:
    """n phantom cases; case i draws everything from substream i of the seed.

    With jitter on, shell radii scale together by a random factor and the
    tumor center wobbles, so cases differ in size (and therefore survival).
    Writes NIfTI case directories plus survival.csv when out_dir is given.
    """
    root = RngStream(spec.seed)
    cases = []
    for i in range(n_cases):
        sub = root.substream(i)
        case_spec = spec
        if jitter:
            geom = sub.substream(0)
            scale = float(geom.uniform(0.75, 1.2))
            center = tuple(
                (s - 1) / 2.0 + float(geom.uniform(-1.5, 1.5)) for s in spec.shape)
            case_spec = replace(spec, r_enh=spec.r_enh * scale,
                                r_core=spec.r_core * scale,
                                r_whole=spec.r_whole * scale, center=center)
        cases.append(generate_case(case_spec, sub.substream(1), f"case_{i:03d}"))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        for case in cases:
            write_case(case, os.path.join(out_dir, case.case_id), compress=True)
        write_survival_csv(os.path.join(out_dir, "survival.csv"), cases)
    return cases


def write_survival_csv(path: str, cases) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["case_id", "age", "survival_days"])
        for case in sorted(cases, key=lambda c: c.case_id):
            writer.writerow([
                case.case_id,
                "" if case.age is None else repr(float(case.age)),
                "" if case.survival_days is None else repr(float(case.survival_days)),
            ])
