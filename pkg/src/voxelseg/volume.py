"""Data model and preprocessing for multimodal 3D brain volumes.

A case holds four co-registered MRI modalities in the fixed order
(T1, T1ce, T2, FLAIR) plus an optional label map over {0, 1, 2, 4}.
Preprocessing z-scores each modality over the brain region, clips to
[-5, 5] and maps through the fixed affine (z + 5) / 10 into [0, 1],
leaving non-brain voxels exactly 0.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import (
    DegenerateIntensity,
    EmptyBrainMask,
    InvalidLabel,
    MissingModality,
    ParseError,
    ShapeMismatch,
)
from .nifti import read_nifti, write_nifti

MODALITY_NAMES = ("t1", "t1ce", "t2", "flair")
LABEL_VALUES = (0, 1, 2, 4)

# Tumor subregion definitions in terms of raw label values.
REGIONS = {
    "whole": (1, 2, 4),
    "core": (1, 4),
    "enhancing": (4,),
    "edema": (2,),
    "necrosis": (1,),
}
# Short region names used in result tables.
REGION_ALIASES = {"enh": "enhancing", "ede": "edema", "nec": "necrosis"}


@dataclass(frozen=True)
class Volume3D:
    """A single 3D scalar volume with per-axis voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeMismatch(f"Volume3D needs a 3D array, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ShapeMismatch(f"Volume3D dimensions must be >= 1, got {self.data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ShapeMismatch(f"spacing must be 3 positive floats, got {self.spacing}")
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class LabelMap:
    """Integer segmentation map; every voxel value must be in {0, 1, 2, 4}."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeMismatch(f"LabelMap needs a 3D array, got shape {self.data.shape}")
        if not np.issubdtype(self.data.dtype, np.integer):
            raise InvalidLabel(f"LabelMap needs an integer array, got dtype {self.data.dtype}")
        bad = np.setdiff1d(np.unique(self.data), LABEL_VALUES)
        if bad.size:
            raise InvalidLabel(f"illegal label values {bad.tolist()}, legal set is {list(LABEL_VALUES)}")

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class BrainMask:
    """Boolean foreground mask shared by all modalities of a case."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.dtype != np.bool_:
            raise ShapeMismatch("BrainMask needs a 3D boolean array")

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class MultiModalCase:
    """Four co-registered modalities plus optional label and survival metadata."""

    modalities: tuple
    label: Optional[LabelMap] = None
    age: Optional[float] = None
    survival_days: Optional[float] = None
    case_id: str = ""

    def __post_init__(self):
        if len(self.modalities) != 4:
            raise MissingModality(f"a case needs exactly 4 modalities, got {len(self.modalities)}")
        object.__setattr__(self, "modalities", tuple(self.modalities))
        shape = self.modalities[0].shape
        for name, vol in zip(MODALITY_NAMES, self.modalities):
            if vol.shape != shape:
                raise ShapeMismatch(f"modality {name} has shape {vol.shape}, expected {shape}")
            if vol.spacing != self.modalities[0].spacing:
                raise ShapeMismatch(f"modality {name} spacing {vol.spacing} differs from {self.modalities[0].spacing}")
        if self.label is not None and self.label.shape != shape:
            raise ShapeMismatch(f"label shape {self.label.shape} does not match volumes {shape}")

    @property
    def shape(self):
        return self.modalities[0].shape

    @property
    def spacing(self):
        return self.modalities[0].spacing

    def stack(self) -> np.ndarray:
        """Modalities as one (4, D, H, W) float32 array."""
        return np.stack([m.data.astype(np.float32, copy=False) for m in self.modalities])


def _find_file(case_dir: str, stem: str) -> Optional[str]:
    for ext in (".nii", ".nii.gz"):
        path = os.path.join(case_dir, stem + ext)
        if os.path.isfile(path):
            return path
    return None


def read_case(case_dir: str, age: float = None, survival_days: float = None) -> MultiModalCase:
    """Load `<case_dir>/{t1,t1ce,t2,flair}.nii[.gz]` plus optional seg.nii[.gz]."""
    volumes = []
    for name in MODALITY_NAMES:
        path = _find_file(case_dir, name)
        if path is None:
            raise MissingModality(f"{case_dir}: no {name}.nii or {name}.nii.gz")
        data, spacing = read_nifti(path)
        volumes.append(Volume3D(data.astype(np.float32), spacing))
    label = None
    seg_path = _find_file(case_dir, "seg")
    if seg_path is not None:
        seg, _ = read_nifti(seg_path)
        if not np.issubdtype(seg.dtype, np.integer):
            rounded = np.rint(seg)
            if not np.array_equal(rounded, seg):
                raise InvalidLabel(f"{seg_path}: non-integer label values")
            seg = rounded
        label = LabelMap(seg.astype(np.int16))
    case_id = os.path.basename(os.path.normpath(case_dir))
    return MultiModalCase(tuple(volumes), label=label, age=age,
                          survival_days=survival_days, case_id=case_id)


def write_case(case: MultiModalCase, case_dir: str, compress: bool = False) -> None:
    """Write a case back out in the directory layout read_case expects."""
    os.makedirs(case_dir, exist_ok=True)
    ext = ".nii.gz" if compress else ".nii"
    for name, vol in zip(MODALITY_NAMES, case.modalities):
        write_nifti(os.path.join(case_dir, name + ext),
                    vol.data.astype(np.float32), vol.spacing)
    if case.label is not None:
        write_nifti(os.path.join(case_dir, "seg" + ext),
                    case.label.data.astype(np.int16), case.spacing)


def compute_brain_mask(case: MultiModalCase) -> BrainMask:
    """Union over modalities of nonzero voxels."""
    mask = np.zeros(case.shape, dtype=bool)
    for vol in case.modalities:
        mask |= vol.data != 0
    if not mask.any():
        raise EmptyBrainMask("all modalities are identically zero")
    return BrainMask(mask)


def normalize_modality(vol: Volume3D, mask: BrainMask, clip: float = 5.0,
                       eps_std: float = 1e-8) -> Volume3D:
    """Z-score over the brain region, clip, then map (z + clip) / (2 clip) into [0, 1].

    Non-brain voxels are exactly 0. Uses the population standard deviation.
    """
    if vol.shape != mask.shape:
        raise ShapeMismatch(f"volume {vol.shape} vs mask {mask.shape}")
    if not mask.data.any():
        raise EmptyBrainMask("cannot normalize with an empty brain mask")
    brain = vol.data[mask.data].astype(np.float64)
    mean = brain.mean()
    std = brain.std()
    if std <= eps_std:
        raise DegenerateIntensity(f"brain-region std {std:.3g} <= {eps_std:.0e}")
    z = np.clip((vol.data.astype(np.float64) - mean) / std, -clip, clip)
    out = ((z + clip) / (2.0 * clip)).astype(np.float32)
    out[~mask.data] = 0.0
    return Volume3D(out, vol.spacing)


def preprocess_case(case: MultiModalCase):
    """Normalize all four modalities; returns (case, brain_mask)."""
    mask = compute_brain_mask(case)
    normalized = tuple(normalize_modality(v, mask) for v in case.modalities)
    return replace(case, modalities=normalized), mask


def one_hot_encode(label) -> np.ndarray:
    """(D, H, W) labels over {0,1,2,4} -> (4, D, H, W) float32 one-hot."""
    data = label.data if isinstance(label, LabelMap) else np.asarray(label)
    bad = np.setdiff1d(np.unique(data), LABEL_VALUES)
    if bad.size:
        raise InvalidLabel(f"illegal label values {bad.tolist()}")
    return np.stack([(data == v) for v in LABEL_VALUES]).astype(np.float32)


def decode_one_hot(channels: np.ndarray) -> np.ndarray:
    """(4, D, H, W) scores -> (D, H, W) int16 labels via per-voxel argmax."""
    idx = np.argmax(channels, axis=0)
    return np.asarray(LABEL_VALUES, dtype=np.int16)[idx]


def region_mask(label, region: str) -> BrainMask:
    """Boolean mask of a named tumor subregion.

    whole = {1,2,4}; core = {1,4}; enhancing = {4}; edema = {2}; necrosis = {1}.
    Short names enh/ede/nec are accepted.
    """
    key = REGION_ALIASES.get(region, region)
    if key not in REGIONS:
        raise KeyError(f"unknown region {region!r}, expected one of {sorted(REGIONS)}")
    data = label.data if isinstance(label, LabelMap) else np.asarray(label)
    return BrainMask(np.isin(data, REGIONS[key]))


# ---------------------------------------------------------------------------
# Internal interchange format: flat little-endian array + JSON sidecar.

def write_internal_volume(path_base: str, data: np.ndarray, spacing) -> None:
    data = np.ascontiguousarray(data)
    kind = "float32" if data.dtype.kind == "f" else "int16"
    blob = data.astype(np.dtype(kind).newbyteorder("<"))
    with open(path_base + ".raw", "wb") as f:
        f.write(blob.tobytes())
    meta = {
        "shape": list(data.shape),
        "spacing": [float(s) for s in spacing],
        "dtype": kind,
    }
    with open(path_base + ".json", "w") as f:
        json.dump(meta, f, sort_keys=True, indent=1)
        f.write("\n")


def read_internal_volume(path_base: str):
    with open(path_base + ".json") as f:
        meta = json.load(f)
    shape = tuple(meta["shape"])
    dt = np.dtype(meta["dtype"]).newbyteorder("<")
    with open(path_base + ".raw", "rb") as f:
        raw = f.read()
    expect = int(np.prod(shape)) * dt.itemsize
    if len(raw) != expect:
        raise ParseError(f"{path_base}.raw: {len(raw)} bytes, sidecar implies {expect}")
    data = np.frombuffer(raw, dtype=dt).reshape(shape)
    return np.ascontiguousarray(data), tuple(float(s) for s in meta["spacing"])


def write_internal_case(case: MultiModalCase, case_dir: str) -> None:
    """Write all modalities (+ label, + metadata) in the internal format."""
    os.makedirs(case_dir, exist_ok=True)
    for name, vol in zip(MODALITY_NAMES, case.modalities):
        write_internal_volume(os.path.join(case_dir, name),
                              vol.data.astype(np.float32), vol.spacing)
    if case.label is not None:
        write_internal_volume(os.path.join(case_dir, "seg"),
                              case.label.data.astype(np.int16), case.spacing)
    meta = {"case_id": case.case_id, "age": case.age, "survival_days": case.survival_days}
    with open(os.path.join(case_dir, "case.json"), "w") as f:
        json.dump(meta, f, sort_keys=True, indent=1)
        f.write("\n")


def read_internal_case(case_dir: str) -> MultiModalCase:
    volumes = []
    for name in MODALITY_NAMES:
        base = os.path.join(case_dir, name)
        if not os.path.isfile(base + ".json"):
            raise MissingModality(f"{case_dir}: no {name}.json/.raw pair")
        data, spacing = read_internal_volume(base)
        volumes.append(Volume3D(data.astype(np.float32), spacing))
    label = None
    seg_base = os.path.join(case_dir, "seg")
    if os.path.isfile(seg_base + ".json"):
        seg, _ = read_internal_volume(seg_base)
        label = LabelMap(seg.astype(np.int16))
    meta_path = os.path.join(case_dir, "case.json")
    age = survival = None
    case_id = os.path.basename(os.path.normpath(case_dir))
    if os.path.isfile(meta_path):
        with open(meta_path) as f:
            meta = json.load(f)
        age = meta.get("age")
        survival = meta.get("survival_days")
        case_id = meta.get("case_id") or case_id
    return MultiModalCase(tuple(volumes), label=label, age=age,
                          survival_days=survival, case_id=case_id)


def load_survival_table(csv_path: str) -> dict:
    """survival.csv (case_id,age,survival_days) -> {case_id: (age, days)}.

    Blank fields load as None.
    """
    table = {}
    with open(csv_path, newline="") as f:
        reader = csv.DictReader(f)
        need = {"case_id", "age", "survival_days"}
        if reader.fieldnames is None or not need.issubset(reader.fieldnames):
            raise ParseError(f"{csv_path}: header must contain {sorted(need)}")
        for row in reader:
            age = row["age"].strip()
            days = row["survival_days"].strip()
            table[row["case_id"].strip()] = (
                float(age) if age else None,
                float(days) if days else None,
            )
    return table


def list_case_dirs(root: str) -> list:
    """Sorted subdirectories of root that contain a t1 modality in either format."""
    out = []
    for name in sorted(os.listdir(root)):
        d = os.path.join(root, name)
        if not os.path.isdir(d):
            continue
        if _find_file(d, "t1") or os.path.isfile(os.path.join(d, "t1.json")):
            out.append(d)
    return out
