"""Multiclass dice loss, Adam with exponential lr decay, and the training loop.

The loss is the negated mean over classes of smoothed soft-dice ratios,
with the voxel index running over the whole batch (all samples and all
spatial positions pooled per class). Training runs a fixed number of
batches per epoch on randomly sampled, augmented patches; checkpoints and
a JSONL metrics log are the outputs. Everything downstream of the seed is
deterministic: same (seed, config, data) gives byte-identical checkpoints.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .augment import AttenuationSchedule, AugmentationConfig, attenuate, augment_batch
from .autodiff import Tensor
from .errors import ConfigError, NonFiniteGradient, EmptyDataset, ShapeMismatch
from .network import NetworkConfig, forward, init_parameters, save_checkpoint
from .rng import RngStream
from .volume import MultiModalCase, one_hot_encode

# Substream namespaces so patch sampling, augmentation, dropout and init
# never draw from the same stream.
_NS_PATCH = 0
_NS_AUG = 1
_NS_DROPOUT = 2
_NS_INIT = 3


@dataclass(frozen=True)
class TrainConfig:
    lr_init: float = 5e-4
    lr_decay: float = 0.985
    weight_decay: float = 1e-5
    batch_size: int = 2
    patch_size: tuple = (128, 128, 128)
    batches_per_epoch: int = 100
    epochs: int = 300
    dice_epsilon: float = 1e-5
    seed: int = 0
    fg_oversample_p: float = 0.5
    dice_include_background: bool = True
    checkpoint_interval: int = 0

    def __post_init__(self):
        object.__setattr__(self, "patch_size", tuple(int(p) for p in self.patch_size))
        if self.lr_init <= 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError(f"bad learning-rate settings lr_init={self.lr_init} lr_decay={self.lr_decay}")
        if self.weight_decay < 0 or self.dice_epsilon < 0:
            raise ConfigError("weight_decay and dice_epsilon must be >= 0")
        if min(self.batch_size, self.batches_per_epoch, self.epochs) < 1:
            raise ConfigError("batch_size, batches_per_epoch and epochs must be >= 1")
        if len(self.patch_size) != 3 or min(self.patch_size) < 1:
            raise ConfigError(f"patch_size must be 3 positive integers, got {self.patch_size}")
        if not 0.0 <= self.fg_oversample_p <= 1.0:
            raise ConfigError(f"fg_oversample_p must lie in [0, 1], got {self.fg_oversample_p}")
        if self.checkpoint_interval < 0:
            raise ConfigError("checkpoint_interval must be >= 0")

    def to_dict(self) -> dict:
        return {
            "lr_init": self.lr_init,
            "lr_decay": self.lr_decay,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "patch_size": list(self.patch_size),
            "batches_per_epoch": self.batches_per_epoch,
            "epochs": self.epochs,
            "dice_epsilon": self.dice_epsilon,
            "seed": self.seed,
            "fg_oversample_p": self.fg_oversample_p,
            "dice_include_background": self.dice_include_background,
            "checkpoint_interval": self.checkpoint_interval,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown train config keys {sorted(bad)}")
        kw = dict(d)
        if "patch_size" in kw:
            kw["patch_size"] = tuple(kw["patch_size"])
        return cls(**kw)


def lr_at(config: TrainConfig, epoch: int) -> float:
    """lr_init * lr_decay ** epoch."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    return config.lr_init * config.lr_decay ** epoch


def dice_loss(u: Tensor, v, epsilon: float = 1e-5, include_background: bool = True) -> Tensor:
    """Negated mean over classes of smoothed soft-dice ratios.

    u: (N, K, D, H, W) softmax output; v: matching one-hot target. For each
    class k the ratio is (2 sum_i u_ik v_ik + eps) / (sum_i u_ik + sum_i v_ik
    + eps) with i pooled over batch and space. Perfect agreement gives -1,
    total disagreement 0.
    """
    v_data = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float32)
    if u.data.shape != v_data.shape:
        raise ShapeMismatch(f"softmax {u.data.shape} vs one-hot {v_data.shape}")
    if u.data.ndim != 5:
        raise ShapeMismatch(f"expected (N, K, D, H, W), got {u.data.shape}")
    k = u.data.shape[1]
    v_const = Tensor(v_data, requires_grad=False)
    spatial_axes = (0, 2, 3, 4)
    inter = (u * v_const).sum(axis=spatial_axes)        # (K,)
    total = u.sum(axis=spatial_axes) + v_const.sum(axis=spatial_axes)
    ratio = (inter * 2.0 + epsilon) / (total + epsilon)
    weights = np.ones(k, dtype=np.float32)
    count = k
    if not include_background:
        weights[0] = 0.0
        count = k - 1
    weighted = ratio * Tensor(weights, requires_grad=False)
    return weighted.sum() * (-1.0 / count)


@dataclass
class AdamState:
    """First/second moment estimates plus step count."""

    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: dict) -> AdamState:
    zeros = lambda p: np.zeros_like(p.data)
    return AdamState(m={n: zeros(p) for n, p in params.items()},
                     v={n: zeros(p) for n, p in params.items()})


def adam_step(params: dict, state: AdamState, lr: float, weight_decay: float = 0.0) -> None:
    """One in-place Adam update from the gradients stored on the parameters.

    Weight decay enters as an additive l2 gradient term (classic, not
    decoupled). Parameter names are visited in sorted order so the update is
    reproducible.
    """
    state.t += 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name in sorted(params):
        p = params[name]
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in parameter {name}")
        g = g + np.float32(weight_decay) * p.data
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)


def zero_grads(params: dict) -> None:
    for p in params.values():
        p.grad = None


def _foreground_indices(label: np.ndarray):
    return np.argwhere(label != 0)


def _pad_to_patch(stack: np.ndarray, label, patch_size):
    spatial = stack.shape[-3:]
    pad = [max(0, p - s) for p, s in zip(patch_size, spatial)]
    if not any(pad):
        return stack, label
    widths = [(0, 0)] + [(0, w) for w in pad]
    stack = np.pad(stack, widths)
    if label is not None:
        label = np.pad(label, widths[1:])
    return stack, label


def sample_patch_arrays(stack: np.ndarray, label, patch_size, rng: RngStream,
                        fg_oversample_p: float = 0.5):
    """Crop one random patch from (4, D, H, W) data and its raw label map.

    Uniform over valid corner positions; with probability fg_oversample_p the
    patch is instead centered on a uniformly drawn foreground voxel (clamped
    to stay in bounds). Volumes smaller than the patch are zero-padded at the
    high side first.
    """
    patch_size = tuple(int(p) for p in patch_size)
    stack, label = _pad_to_patch(stack, label, patch_size)
    spatial = stack.shape[-3:]
    use_fg = rng.random() < fg_oversample_p
    start = None
    if use_fg and label is not None:
        fg = _foreground_indices(label)
        if len(fg):
            center = fg[int(rng.integers(len(fg)))]
            start = [int(np.clip(c - p // 2, 0, s - p))
                     for c, p, s in zip(center, patch_size, spatial)]
    if start is None:
        start = [int(rng.integers(0, s - p + 1)) for p, s in zip(patch_size, spatial)]
    sl = tuple(slice(a, a + p) for a, p in zip(start, patch_size))
    out = np.ascontiguousarray(stack[(slice(None),) + sl], dtype=np.float32)
    lab = None if label is None else np.ascontiguousarray(label[sl])
    return out, lab


def sample_patch(case: MultiModalCase, patch_size, rng: RngStream,
                 fg_oversample_p: float = 0.5):
    """Random patch from a preprocessed case: ((4, ...) input, one-hot target)."""
    label = None if case.label is None else case.label.data
    stack, lab = sample_patch_arrays(case.stack(), label, patch_size, rng,
                                     fg_oversample_p)
    target = None if lab is None else one_hot_encode(lab)
    return stack, target


def default_schedule(epochs: int) -> AttenuationSchedule:
    from .augment import default_final_config, default_initial_config
    return AttenuationSchedule(default_initial_config(), default_final_config(), epochs)


def _assemble_batch(dataset, config: TrainConfig, aug_config: AugmentationConfig,
                    root: RngStream, epoch: int, batch_idx: int):
    stacks = []
    labels = []
    for i in range(config.batch_size):
        sub = root.substream(_NS_PATCH, epoch, batch_idx, i)
        case = dataset[int(sub.integers(len(dataset)))]
        lab = None if case.label is None else case.label.data
        stack, lab = sample_patch_arrays(case.stack(), lab, config.patch_size,
                                         sub, config.fg_oversample_p)
        stacks.append(stack)
        labels.append(lab)
    batch = np.stack(stacks)
    label_batch = np.stack(labels)
    batch, label_batch = augment_batch(batch, label_batch, aug_config,
                                       root.substream(_NS_AUG, epoch, batch_idx))
    target = np.stack([one_hot_encode(lab) for lab in label_batch])
    return batch, target


def train(config: TrainConfig, network_config: NetworkConfig, dataset,
          out_dir: str, schedule: Optional[AttenuationSchedule] = None,
          params: Optional[dict] = None, log_fn=None):
    """Train a network on preprocessed cases; returns (params, metrics list).

    Writes `ckpt_epoch_<n>` checkpoints (always at the final epoch, plus every
    checkpoint_interval epochs when set) and appends one JSON line per epoch
    to metrics.jsonl: {epoch, lr, mean_loss, wall_time}.
    """
    if not dataset:
        raise EmptyDataset("training requires at least one case")
    for case in dataset:
        if case.label is None:
            raise EmptyDataset(f"case {case.case_id or '<unnamed>'} has no label map")
    divisor = network_config.spatial_divisor
    if any(p % divisor for p in config.patch_size):
        raise ConfigError(f"patch_size {config.patch_size} not divisible by {divisor}")
    if schedule is None:
        schedule = default_schedule(config.epochs)
    os.makedirs(out_dir, exist_ok=True)

    root = RngStream(config.seed)
    if params is None:
        params = init_parameters(network_config, root.substream(_NS_INIT))
    state = init_adam(params)
    metrics = []
    log_path = os.path.join(out_dir, "metrics.jsonl")
    with open(log_path, "w") as log:
        for epoch in range(config.epochs):
            lr = lr_at(config, epoch)
            aug_config = attenuate(schedule, epoch)
            losses = []
            for b in range(config.batches_per_epoch):
                batch, target = _assemble_batch(dataset, config, aug_config,
                                                root, epoch, b)
                zero_grads(params)
                dropout_rng = root.substream(_NS_DROPOUT, epoch, b)
                try:
                    _, softmax = forward(network_config, params, batch,
                                         mode="train", rng=dropout_rng)
                    loss = dice_loss(softmax, target, config.dice_epsilon,
                                     config.dice_include_background)
                    loss.backward()
                    adam_step(params, state, lr, config.weight_decay)
                except NonFiniteGradient as exc:
                    raise NonFiniteGradient(f"epoch {epoch} batch {b}: {exc}") from exc
                losses.append(float(loss.data))
            entry = {
                "epoch": epoch,
                "lr": lr,
                "mean_loss": float(np.mean(losses)),
                "wall_time": time.time(),
            }
            metrics.append(entry)
            log.write(json.dumps(entry, sort_keys=True) + "\n")
            log.flush()
            if log_fn is not None:
                log_fn(entry)
            last = epoch == config.epochs - 1
            interval_hit = config.checkpoint_interval and (epoch + 1) % config.checkpoint_interval == 0
            if last or interval_hit:
                save_checkpoint(os.path.join(out_dir, f"ckpt_epoch_{epoch + 1}"),
                                network_config, params)
    return params, metrics
