"""U-Net-derived 3D segmentation architecture.

Context pathway: stride-2 3x3x3 convolutions connect pre-activation residual
context modules (two 3x3x3 convs with dropout in between). Localization
pathway: repeat-upscale + channel-halving conv, concatenation with the skip,
then a localization module (3x3x3 conv followed by a channel-halving 1x1x1
conv). Class logits are tapped at several decoder levels, upscaled by voxel
repetition and summed (deep supervision). Leaky ReLU and instance
normalization follow every feature-computing convolution.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, ConfigError, ShapeMismatch
from .rng import RngStream

CHECKPOINT_FORMAT = "voxelseg-checkpoint-v1"


@dataclass
class NetworkConfig:
    levels: int = 5
    base_filters: int = 16
    num_classes: int = 4
    in_channels: int = 4
    dropout_p: float = 0.3
    lrelu_slope: float = 0.01
    instance_norm_eps: float = 1e-5
    # None -> taps at decoder levels {0,1,2} clipped to the valid range.
    deep_supervision_levels: tuple = None

    def __post_init__(self):
        if self.levels < 2:
            raise ConfigError("levels must be >= 2")
        if self.base_filters < 1:
            raise ConfigError("base_filters must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must be in [0, 1)")
        if self.deep_supervision_levels is None:
            self.deep_supervision_levels = tuple(
                l for l in (0, 1, 2) if l <= self.levels - 2)
        else:
            self.deep_supervision_levels = tuple(sorted(set(self.deep_supervision_levels)))
            bad = [l for l in self.deep_supervision_levels
                   if not (0 <= l <= self.levels - 2)]
            if bad:
                raise ConfigError(
                    f"deep_supervision_levels {bad} outside decoder range "
                    f"[0, {self.levels - 2}]")

    def filters(self, level: int) -> int:
        return self.base_filters * 2 ** level

    @property
    def spatial_divisor(self) -> int:
        return 2 ** (self.levels - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["deep_supervision_levels"] = list(self.deep_supervision_levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        if d.get("deep_supervision_levels") is not None:
            d["deep_supervision_levels"] = tuple(d["deep_supervision_levels"])
        return cls(**d)


def parameter_shapes(config: NetworkConfig) -> dict:
    """Ordered map of parameter name -> (shape, kind).

    kind is 'conv' (He init), 'gain' (ones) or 'zero' (biases/offsets).
    The order here defines initialization draw order and checkpoint layout.
    """
    c = config
    shapes = {}

    def conv(name, cin, cout, k):
        shapes[f"{name}.w"] = ((cout, cin, k, k, k), "conv")
        shapes[f"{name}.b"] = ((cout,), "zero")

    def norm(name, ch):
        shapes[f"{name}.g"] = ((ch,), "gain")
        shapes[f"{name}.o"] = ((ch,), "zero")

    def context(prefix, ch):
        norm(f"{prefix}.norm1", ch)
        conv(f"{prefix}.conv1", ch, ch, 3)
        norm(f"{prefix}.norm2", ch)
        conv(f"{prefix}.conv2", ch, ch, 3)

    conv("enc0.in", c.in_channels, c.filters(0), 3)
    context("enc0.ctx", c.filters(0))
    for l in range(1, c.levels):
        conv(f"enc{l}.down", c.filters(l - 1), c.filters(l), 3)
        context(f"enc{l}.ctx", c.filters(l))
    for l in range(c.levels - 2, -1, -1):
        f = c.filters(l)
        conv(f"dec{l}.up", 2 * f, f, 3)
        norm(f"dec{l}.up_norm", f)
        conv(f"dec{l}.loc1", 2 * f, 2 * f, 3)
        norm(f"dec{l}.loc1_norm", 2 * f)
        conv(f"dec{l}.loc2", 2 * f, f, 1)
        norm(f"dec{l}.loc2_norm", f)
    for l in sorted(config.deep_supervision_levels):
        conv(f"seg{l}", c.filters(l), c.num_classes, 1)
    return shapes


def init_parameters(config: NetworkConfig, rng: RngStream,
                    dtype=np.float32) -> dict:
    """He fan-in normal for conv weights, ones/zeros for norms and biases."""
    params = {}
    for name, (shape, kind) in parameter_shapes(config).items():
        if kind == "conv":
            fan_in = int(np.prod(shape[1:]))
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif kind == "gain":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = ad.parameter(data.astype(dtype))
    return params


def parameter_count(params: dict) -> int:
    return sum(int(p.data.size) for p in params.values())


def _conv_in_lrelu(x, params, name, config, stride=1):
    h = ad.conv3d(x, params[f"{name}.w"], params[f"{name}.b"], stride=stride)
    h = ad.instance_norm(h, params[f"{name}_norm.g"], params[f"{name}_norm.o"],
                         eps=config.instance_norm_eps)
    return ad.leaky_relu(h, config.lrelu_slope)


def context_module(x: Tensor, params: dict, prefix: str, config: NetworkConfig,
                   dropout_active: bool, rng) -> Tensor:
    """Pre-activation residual block: IN-lReLU-conv-drop-IN-lReLU-conv + skip."""
    eps, slope = config.instance_norm_eps, config.lrelu_slope
    h = ad.instance_norm(x, params[f"{prefix}.norm1.g"], params[f"{prefix}.norm1.o"], eps)
    h = ad.leaky_relu(h, slope)
    h = ad.conv3d(h, params[f"{prefix}.conv1.w"], params[f"{prefix}.conv1.b"])
    h = ad.dropout(h, config.dropout_p, rng, dropout_active)
    h = ad.instance_norm(h, params[f"{prefix}.norm2.g"], params[f"{prefix}.norm2.o"], eps)
    h = ad.leaky_relu(h, slope)
    h = ad.conv3d(h, params[f"{prefix}.conv2.w"], params[f"{prefix}.conv2.b"])
    return x + h


def upsample_module(x: Tensor, params: dict, prefix: str, config: NetworkConfig) -> Tensor:
    """Voxel-repeat upscale x2, then a 3x3x3 conv halving the channels."""
    h = ad.repeat_upsample(x, 2)
    return _conv_in_lrelu(h, params, f"{prefix}.up", config)


def localization_module(x: Tensor, params: dict, prefix: str, config: NetworkConfig) -> Tensor:
    """3x3x3 conv then a 1x1x1 conv that halves the channel count."""
    h = _conv_in_lrelu(x, params, f"{prefix}.loc1", config)
    return _conv_in_lrelu(h, params, f"{prefix}.loc2", config)


def forward(config: NetworkConfig, params: dict, x, mode: str = "eval",
            rng: RngStream = None):
    """Full forward pass.

    x: (N, in_channels, D, H, W) with spatial dims divisible by
    2^(levels-1). mode 'train' and 'mc_dropout' sample dropout masks from
    rng; 'eval' is deterministic. Returns (logits, softmax) tensors of
    shape (N, num_classes, D, H, W).
    """
    if mode not in ("train", "eval", "mc_dropout"):
        raise ConfigError(f"unknown forward mode {mode!r}")
    x = ad.as_tensor(x)
    if x.data.ndim != 5 or x.data.shape[1] != config.in_channels:
        raise ShapeMismatch(
            f"expected (N, {config.in_channels}, D, H, W), got {x.data.shape}")
    div = config.spatial_divisor
    if any(s % div != 0 for s in x.data.shape[2:]):
        raise ShapeMismatch(
            f"spatial dims {x.data.shape[2:]} not divisible by {div}")
    dropout_active = mode in ("train", "mc_dropout") and config.dropout_p > 0
    if dropout_active and rng is None:
        raise ConfigError("dropout-active forward needs an rng stream")

    skips = {}
    h = ad.conv3d(x, params["enc0.in.w"], params["enc0.in.b"])
    h = context_module(h, params, "enc0.ctx", config, dropout_active, rng)
    skips[0] = h
    for l in range(1, config.levels):
        h = ad.conv3d(h, params[f"enc{l}.down.w"], params[f"enc{l}.down.b"], stride=2)
        h = context_module(h, params, f"enc{l}.ctx", config, dropout_active, rng)
        if l < config.levels - 1:
            skips[l] = h

    logits = None
    for l in range(config.levels - 2, -1, -1):
        up = upsample_module(h, params, f"dec{l}", config)
        h = ad.concat_channels([up, skips[l]])
        h = localization_module(h, params, f"dec{l}", config)
        if l in config.deep_supervision_levels:
            seg = ad.conv3d(h, params[f"seg{l}.w"], params[f"seg{l}.b"])
            if l > 0:
                seg = ad.repeat_upsample(seg, 2 ** l)
            logits = seg if logits is None else logits + seg
    return logits, ad.softmax_channels(logits)


# -- checkpoint I/O -----------------------------------------------------------

def save_checkpoint(path_base: str, config: NetworkConfig, params: dict) -> None:
    """Write <path_base>.json manifest + <path_base>.bin little-endian float32 blob."""
    entries = []
    offset = 0
    blobs = []
    for name in params:
        arr = np.ascontiguousarray(params[name].data, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape),
                        "offset": offset, "size": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.size * 4
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": config.to_dict(),
        "dtype": "float32",
        "byte_order": "little",
        "parameters": entries,
    }
    parent = os.path.dirname(os.path.abspath(path_base))
    os.makedirs(parent, exist_ok=True)
    with open(path_base + ".json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    with open(path_base + ".bin", "wb") as f:
        f.write(b"".join(blobs))


def load_checkpoint(path_base: str):
    """Read a checkpoint pair; returns (NetworkConfig, params dict)."""
    json_path, bin_path = path_base + ".json", path_base + ".bin"
    if not os.path.exists(json_path) or not os.path.exists(bin_path):
        raise CheckpointError(f"checkpoint {path_base} not found")
    with open(json_path) as f:
        manifest = json.load(f)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unrecognized checkpoint format in {json_path}")
    config = NetworkConfig.from_dict(manifest["config"])
    blob = open(bin_path, "rb").read()
    params = {}
    for e in manifest["parameters"]:
        n = e["size"] * 4
        arr = np.frombuffer(blob[e["offset"]:e["offset"] + n], dtype="<f4")
        if arr.size != e["size"]:
            raise CheckpointError(f"blob truncated for parameter {e['name']}")
        params[e["name"]] = ad.parameter(arr.reshape(e["shape"]).copy())
    return config, params
