"""Survival regression: a from-scratch random forest plus an MLP ensemble.

The forest (1000 trees by default) grows unpruned CART regression trees on
bootstrap samples, picking the best MSE-reducing split among a random
ceil(n_features/3) feature subset per node. The MLP ensemble trains 15
members of 3x64 hidden units with batch norm, additive gaussian noise and
dropout on z-scored features and targets; members differ only by seed.
The final prediction averages the forest and the ensemble mean:
0.5 * (rfr + mlp). Trees and members train in parallel with per-index RNG
substreams, so parallel and serial runs produce identical models.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .autodiff import (Tensor, batch_norm_eval, batch_norm_train, dropout,
                       leaky_relu, linear)
from .errors import CheckpointError, ConfigError, DimensionMismatch, EmptyDataset
from .parallel import parallel_map
from .rng import RngStream
from .train import adam_step, init_adam, zero_grads

DEFAULT_BINS = (300.0, 450.0)


@dataclass(frozen=True)
class RFRConfig:
    n_trees: int = 1000
    max_features_frac: float = 1.0 / 3.0
    min_samples_leaf: int = 1
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ConfigError(f"n_trees must be >= 1, got {self.n_trees}")
        if not 0 < self.max_features_frac <= 1:
            raise ConfigError(f"max_features_frac must lie in (0, 1], got {self.max_features_frac}")
        if self.min_samples_leaf < 1:
            raise ConfigError("min_samples_leaf must be >= 1")

    def to_dict(self) -> dict:
        return {"n_trees": self.n_trees, "max_features_frac": self.max_features_frac,
                "min_samples_leaf": self.min_samples_leaf,
                "bootstrap": self.bootstrap, "seed": self.seed}


@dataclass(frozen=True)
class MLPEnsembleConfig:
    n_members: int = 15
    hidden_layers: int = 3
    units: int = 64
    dropout_p: float = 0.5
    noise_sigma: float = 0.1
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.n_members < 1:
            raise ConfigError(f"n_members must be >= 1, got {self.n_members}")
        if self.hidden_layers < 1 or self.units < 1:
            raise ConfigError("hidden_layers and units must be >= 1")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")

    def to_dict(self) -> dict:
        return {"n_members": self.n_members, "hidden_layers": self.hidden_layers,
                "units": self.units, "dropout_p": self.dropout_p,
                "noise_sigma": self.noise_sigma, "lr": self.lr,
                "epochs": self.epochs, "batch_size": self.batch_size,
                "seed": self.seed}


# ---------------------------------------------------------------------------
# Regression trees


@dataclass
class RegressionTree:
    """Flat-array CART tree: feature < 0 marks a leaf holding `value`."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        out = np.empty(len(X), dtype=np.float64)
        for r in range(len(X)):
            i = 0
            while self.feature[i] >= 0:
                if X[r, self.feature[i]] <= self.threshold[i]:
                    i = self.left[i]
                else:
                    i = self.right[i]
            out[r] = self.value[i]
        return out


def _best_split(X, y, idx, feats, min_leaf):
    """(cost, feature, threshold) minimizing child SSE, or feature -1."""
    best_cost = np.inf
    best_feat = -1
    best_thr = 0.0
    n = len(idx)
    yv = y[idx]
    for f in feats:
        xs = X[idx, f]
        order = np.argsort(xs, kind="stable")
        xs_s = xs[order]
        if xs_s[0] == xs_s[-1]:
            continue
        ys_s = yv[order]
        csum = np.cumsum(ys_s)
        csq = np.cumsum(ys_s * ys_s)
        pos = np.nonzero(xs_s[1:] != xs_s[:-1])[0] + 1
        ok = (pos >= min_leaf) & (n - pos >= min_leaf)
        pos = pos[ok]
        if not len(pos):
            continue
        nl = pos.astype(np.float64)
        nr = n - nl
        sse_l = csq[pos - 1] - csum[pos - 1] ** 2 / nl
        sse_r = (csq[-1] - csq[pos - 1]) - (csum[-1] - csum[pos - 1]) ** 2 / nr
        cost = sse_l + sse_r
        b = int(np.argmin(cost))
        if cost[b] < best_cost:
            best_cost = float(cost[b])
            best_feat = int(f)
            best_thr = float((xs_s[pos[b] - 1] + xs_s[pos[b]]) / 2.0)
    return best_cost, best_feat, best_thr


def _grow_tree(X: np.ndarray, y: np.ndarray, rng: RngStream,
               max_features: int, min_leaf: int) -> RegressionTree:
    feature = []
    threshold = []
    left = []
    right = []
    value = []
    n_features = X.shape[1]

    def build(idx) -> int:
        node = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(y[idx].mean()))
        yv = y[idx]
        if len(idx) < 2 * min_leaf or yv.max() == yv.min():
            return node
        feats = rng.choice(n_features, size=max_features, replace=False)
        _, f, thr = _best_split(X, y, idx, feats, min_leaf)
        if f < 0:
            return node
        go_left = X[idx, f] <= thr
        lid = build(idx[go_left])
        rid = build(idx[~go_left])
        feature[node] = f
        threshold[node] = thr
        left[node] = lid
        right[node] = rid
        return node

    build(np.arange(len(X)))
    return RegressionTree(np.asarray(feature, dtype=np.int32),
                          np.asarray(threshold, dtype=np.float64),
                          np.asarray(left, dtype=np.int32),
                          np.asarray(right, dtype=np.int32),
                          np.asarray(value, dtype=np.float64))


@dataclass
class Forest:
    trees: list
    config: RFRConfig
    n_features: int


def train_rfr(X: np.ndarray, y: np.ndarray, config: Optional[RFRConfig] = None) -> Forest:
    """Fit the forest; tree t draws its bootstrap and splits from substream t."""
    if config is None:
        config = RFRConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise DimensionMismatch(f"X {X.shape} vs y {y.shape}")
    if len(X) < 2:
        raise EmptyDataset("forest training needs at least 2 rows")
    if not np.all(np.isfinite(X)) or not np.all(np.isfinite(y)):
        raise EmptyDataset("non-finite values in training data")
    max_features = max(1, math.ceil(X.shape[1] * config.max_features_frac))
    root = RngStream(config.seed)

    def grow(t):
        rng = root.substream(t)
        if config.bootstrap:
            idx = rng.integers(0, len(X), size=len(X))
        else:
            idx = np.arange(len(X))
        return _grow_tree(X[idx], y[idx], rng, max_features, config.min_samples_leaf)

    trees = parallel_map(grow, range(config.n_trees))
    return Forest(trees=trees, config=config, n_features=X.shape[1])


def predict_rfr(forest: Forest, x):
    """Mean of per-tree predictions; accepts one row or a matrix."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    X = arr[None, :] if single else arr
    if X.shape[1] != forest.n_features:
        raise DimensionMismatch(f"expected {forest.n_features} features, got {X.shape[1]}")
    preds = np.stack([tree.predict(X) for tree in forest.trees])
    mean = preds.mean(axis=0)
    return float(mean[0]) if single else mean


# ---------------------------------------------------------------------------
# MLP ensemble


@dataclass
class MLPMember:
    params: dict
    running_mean: list
    running_var: list


def _init_member(n_features: int, config: MLPEnsembleConfig, rng: RngStream) -> MLPMember:
    params = {}
    fan_in = n_features
    for i in range(config.hidden_layers):
        params[f"l{i}.w"] = Tensor(
            rng.normal(0.0, math.sqrt(2.0 / fan_in), (fan_in, config.units)).astype(np.float32),
            requires_grad=True)
        params[f"l{i}.b"] = Tensor(np.zeros(config.units, dtype=np.float32), requires_grad=True)
        params[f"l{i}.g"] = Tensor(np.ones(config.units, dtype=np.float32), requires_grad=True)
        params[f"l{i}.o"] = Tensor(np.zeros(config.units, dtype=np.float32), requires_grad=True)
        fan_in = config.units
    params["out.w"] = Tensor(
        rng.normal(0.0, math.sqrt(2.0 / fan_in), (fan_in, 1)).astype(np.float32),
        requires_grad=True)
    params["out.b"] = Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)
    running_mean = [np.zeros(config.units, dtype=np.float32) for _ in range(config.hidden_layers)]
    running_var = [np.ones(config.units, dtype=np.float32) for _ in range(config.hidden_layers)]
    return MLPMember(params, running_mean, running_var)


_BN_MOMENTUM = 0.1


def _member_forward(member: MLPMember, x: Tensor, config: MLPEnsembleConfig,
                    rng: Optional[RngStream], train: bool) -> Tensor:
    h = x
    for i in range(config.hidden_layers):
        h = linear(h, member.params[f"l{i}.w"], member.params[f"l{i}.b"])
        if train:
            h, mu, var = batch_norm_train(h, member.params[f"l{i}.g"], member.params[f"l{i}.o"])
            member.running_mean[i] = ((1 - _BN_MOMENTUM) * member.running_mean[i]
                                      + _BN_MOMENTUM * mu).astype(np.float32)
            member.running_var[i] = ((1 - _BN_MOMENTUM) * member.running_var[i]
                                     + _BN_MOMENTUM * var).astype(np.float32)
        else:
            h = batch_norm_eval(h, member.params[f"l{i}.g"], member.params[f"l{i}.o"],
                                member.running_mean[i], member.running_var[i])
        h = leaky_relu(h, 0.01)
        if train:
            if config.noise_sigma > 0:
                noise = rng.normal(0.0, config.noise_sigma, h.data.shape).astype(np.float32)
                h = h + Tensor(noise)
            h = dropout(h, config.dropout_p, rng, active=True)
    return linear(h, member.params["out.w"], member.params["out.b"])


def _train_member(Xs: np.ndarray, ys: np.ndarray, config: MLPEnsembleConfig,
                  rng: RngStream) -> MLPMember:
    member = _init_member(Xs.shape[1], config, rng)
    state = init_adam(member.params)
    n = len(Xs)
    y_col = ys[:, None].astype(np.float32)
    for _ in range(config.epochs):
        order = np.arange(n)
        rng.shuffle(order)
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            if len(batch) < 2:
                continue  # batch norm needs at least 2 rows
            x = Tensor(Xs[batch])
            target = Tensor(y_col[batch])
            zero_grads(member.params)
            out = _member_forward(member, x, config, rng, train=True)
            diff = out - target
            loss = (diff * diff).mean()
            loss.backward()
            adam_step(member.params, state, config.lr)
    return member


def train_mlp_ensemble(Xs: np.ndarray, ys: np.ndarray,
                       config: Optional[MLPEnsembleConfig] = None) -> list:
    """Train all members on standardized features/targets; member i uses substream i."""
    if config is None:
        config = MLPEnsembleConfig()
    Xs = np.asarray(Xs, dtype=np.float32)
    ys = np.asarray(ys, dtype=np.float32)
    if len(Xs) < 2:
        raise EmptyDataset("ensemble training needs at least 2 rows")
    root = RngStream(config.seed)
    return parallel_map(lambda m: _train_member(Xs, ys, config, root.substream(m)),
                        range(config.n_members))


def predict_mlp_ensemble(members, X: np.ndarray, config: MLPEnsembleConfig) -> np.ndarray:
    """Mean member output with noise and dropout off, batch norm on running stats."""
    X = np.asarray(X, dtype=np.float32)
    outs = [
        _member_forward(m, Tensor(X), config, None, train=False).data[:, 0]
        for m in members
    ]
    return np.mean(np.stack(outs), axis=0).astype(np.float64)


# ---------------------------------------------------------------------------
# Combined model


@dataclass
class SurvivalModel:
    forest: Forest
    members: list
    mlp_config: MLPEnsembleConfig
    feature_mean: np.ndarray
    feature_std: np.ndarray
    target_mean: float
    target_std: float
    feature_names: Optional[tuple] = None


def _standardize_columns(X: np.ndarray):
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    return mean, std


def train_survival_model(X, y, rfr_config: Optional[RFRConfig] = None,
                         mlp_config: Optional[MLPEnsembleConfig] = None,
                         feature_names=None) -> SurvivalModel:
    """Fit forest (raw features) and MLP ensemble (z-scored features/targets)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if mlp_config is None:
        mlp_config = MLPEnsembleConfig()
    forest = train_rfr(X, y, rfr_config)
    f_mean, f_std = _standardize_columns(X)
    t_mean = float(y.mean())
    t_std = float(y.std())
    if t_std < 1e-12:
        t_std = 1.0
    Xs = (X - f_mean) / f_std
    ys = (y - t_mean) / t_std
    members = train_mlp_ensemble(Xs, ys, mlp_config)
    return SurvivalModel(forest=forest, members=members, mlp_config=mlp_config,
                         feature_mean=f_mean, feature_std=f_std,
                         target_mean=t_mean, target_std=t_std,
                         feature_names=tuple(feature_names) if feature_names else None)


def predict_mlp(model: SurvivalModel, x):
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    X = arr[None, :] if single else arr
    if X.shape[1] != model.forest.n_features:
        raise DimensionMismatch(f"expected {model.forest.n_features} features, got {X.shape[1]}")
    Xs = (X - model.feature_mean) / model.feature_std
    out = predict_mlp_ensemble(model.members, Xs, model.mlp_config)
    days = out * model.target_std + model.target_mean
    return float(days[0]) if single else days


def predict_combined(model: SurvivalModel, x):
    """0.5 * (forest prediction + ensemble mean prediction)."""
    rfr = predict_rfr(model.forest, x)
    mlp = predict_mlp(model, x)
    if np.isscalar(rfr) or (isinstance(rfr, float)):
        return 0.5 * (rfr + mlp)
    return 0.5 * (np.asarray(rfr) + np.asarray(mlp))


# ---------------------------------------------------------------------------
# Metrics


@dataclass(frozen=True)
class SurvivalMetrics:
    rmse: float
    mse: float
    mae: float
    accuracy: float
    spearman: float

    def to_dict(self) -> dict:
        return {"rmse": self.rmse, "mse": self.mse, "mae": self.mae,
                "accuracy": self.accuracy, "spearman": self.spearman}


def bin_survival(days, bins=DEFAULT_BINS) -> np.ndarray:
    """0: short (< bins[0]); 1: mid (bins[0]..bins[1] inclusive); 2: long."""
    d = np.asarray(days, dtype=np.float64)
    return np.where(d < bins[0], 0, np.where(d > bins[1], 2, 1))


def spearman_correlation(a, b) -> float:
    """Pearson correlation of average ranks; ties share their mean rank.

    Degenerate constant inputs: 1.0 when both are constant, else 0.0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ra = rankdata(a, method="average")
    rb = rankdata(b, method="average")
    sa = ra.std()
    sb = rb.std()
    if sa == 0 or sb == 0:
        return 1.0 if sa == 0 and sb == 0 else 0.0
    cov = ((ra - ra.mean()) * (rb - rb.mean())).mean()
    return float(cov / (sa * sb))


def evaluate_survival(preds, truths, bins=DEFAULT_BINS) -> SurvivalMetrics:
    preds = np.asarray(preds, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if preds.shape != truths.shape:
        raise DimensionMismatch(f"predictions {preds.shape} vs truths {truths.shape}")
    if preds.size < 2:
        raise EmptyDataset("survival evaluation needs at least 2 cases")
    err = preds - truths
    mse = float((err ** 2).mean())
    return SurvivalMetrics(
        rmse=math.sqrt(mse),
        mse=mse,
        mae=float(np.abs(err).mean()),
        accuracy=float((bin_survival(preds, bins) == bin_survival(truths, bins)).mean()),
        spearman=spearman_correlation(preds, truths),
    )


def cross_validate(X, y, k: int = 5, rfr_config: Optional[RFRConfig] = None,
                   mlp_config: Optional[MLPEnsembleConfig] = None,
                   bins=DEFAULT_BINS, seed: int = 0) -> dict:
    """Seeded k-fold CV; reports rfr / mlp / combined metrics per fold + means."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(X) < k:
        raise EmptyDataset(f"need at least k={k} rows, got {len(X)}")
    idx = np.arange(len(X))
    RngStream(seed).shuffle(idx)
    folds = np.array_split(idx, k)
    results = []
    for f, test_idx in enumerate(folds):
        train_idx = np.setdiff1d(idx, test_idx)
        model = train_survival_model(X[train_idx], y[train_idx], rfr_config, mlp_config)
        pr = predict_rfr(model.forest, X[test_idx])
        pm = predict_mlp(model, X[test_idx])
        pc = 0.5 * (pr + pm)
        entry = {"fold": f, "n_test": int(len(test_idx))}
        for name, p in (("rfr", pr), ("mlp", pm), ("combined", pc)):
            if len(test_idx) >= 2:
                entry[name] = evaluate_survival(p, y[test_idx], bins).to_dict()
            else:
                entry[name] = {"rmse": float(np.abs(p - y[test_idx])[0]),
                               "mse": float((p - y[test_idx])[0] ** 2),
                               "mae": float(np.abs(p - y[test_idx])[0]),
                               "accuracy": float(bin_survival(p, bins)[0] == bin_survival(y[test_idx], bins)[0]),
                               "spearman": 0.0}
        results.append(entry)
    mean = {}
    for name in ("rfr", "mlp", "combined"):
        mean[name] = {metric: float(np.mean([r[name][metric] for r in results]))
                      for metric in ("rmse", "mse", "mae", "accuracy", "spearman")}
    return {"folds": results, "mean": mean, "k": k, "seed": seed}


# ---------------------------------------------------------------------------
# Model archive: JSON manifest + one little-endian binary blob.

_ARCHIVE_FORMAT = "voxelseg-survival-v1"


def _collect_arrays(model: SurvivalModel) -> dict:
    arrays = {
        "scaler.feature_mean": model.feature_mean.astype(np.float64),
        "scaler.feature_std": model.feature_std.astype(np.float64),
        "forest.node_counts": np.asarray([len(t.feature) for t in model.forest.trees],
                                         dtype=np.int64),
        "forest.feature": np.concatenate([t.feature for t in model.forest.trees]),
        "forest.threshold": np.concatenate([t.threshold for t in model.forest.trees]),
        "forest.left": np.concatenate([t.left for t in model.forest.trees]),
        "forest.right": np.concatenate([t.right for t in model.forest.trees]),
        "forest.value": np.concatenate([t.value for t in model.forest.trees]),
    }
    for m, member in enumerate(model.members):
        for name, tensor in member.params.items():
            arrays[f"mlp{m:02d}.{name}"] = tensor.data
        for i, (mu, var) in enumerate(zip(member.running_mean, member.running_var)):
            arrays[f"mlp{m:02d}.bn{i}.mean"] = mu
            arrays[f"mlp{m:02d}.bn{i}.var"] = var
    return arrays


def save_survival_model(path_base: str, model: SurvivalModel) -> None:
    arrays = _collect_arrays(model)
    entries = []
    blob = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        data = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.name,
                        "shape": list(arr.shape), "offset": len(blob)})
        blob += data
    manifest = {
        "format": _ARCHIVE_FORMAT,
        "rfr_config": model.forest.config.to_dict(),
        "mlp_config": model.mlp_config.to_dict(),
        "n_features": model.forest.n_features,
        "target_mean": model.target_mean,
        "target_std": model.target_std,
        "feature_names": list(model.feature_names) if model.feature_names else None,
        "arrays": entries,
    }
    os.makedirs(os.path.dirname(os.path.abspath(path_base)), exist_ok=True)
    with open(path_base + ".json", "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")
    with open(path_base + ".bin", "wb") as f:
        f.write(bytes(blob))


def load_survival_model(path_base: str) -> SurvivalModel:
    json_path = path_base + ".json"
    bin_path = path_base + ".bin"
    if not os.path.isfile(json_path) or not os.path.isfile(bin_path):
        raise CheckpointError(f"missing survival model archive at {path_base}")
    with open(json_path) as f:
        manifest = json.load(f)
    if manifest.get("format") != _ARCHIVE_FORMAT:
        raise CheckpointError(f"unexpected archive format {manifest.get('format')!r}")
    with open(bin_path, "rb") as f:
        blob = f.read()
    arrays = {}
    for entry in manifest["arrays"]:
        dt = np.dtype(entry["dtype"]).newbyteorder("<")
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        end = start + count * dt.itemsize
        if end > len(blob):
            raise CheckpointError(f"array {entry['name']} overruns the blob")
        arrays[entry["name"]] = np.frombuffer(blob[start:end], dtype=dt).reshape(
            entry["shape"]).astype(np.dtype(entry["dtype"]))

    rfr_config = RFRConfig(**manifest["rfr_config"])
    mlp_config = MLPEnsembleConfig(**manifest["mlp_config"])
    counts = arrays["forest.node_counts"]
    bounds = np.concatenate([[0], np.cumsum(counts)])
    trees = []
    for t in range(len(counts)):
        s = slice(int(bounds[t]), int(bounds[t + 1]))
        trees.append(RegressionTree(arrays["forest.feature"][s],
                                    arrays["forest.threshold"][s],
                                    arrays["forest.left"][s],
                                    arrays["forest.right"][s],
                                    arrays["forest.value"][s]))
    forest = Forest(trees=trees, config=rfr_config,
                    n_features=int(manifest["n_features"]))
    members = []
    for m in range(mlp_config.n_members):
        prefix = f"mlp{m:02d}."
        params = {}
        for i in range(mlp_config.hidden_layers):
            for suffix in ("w", "b", "g", "o"):
                key = f"l{i}.{suffix}"
                params[key] = Tensor(arrays[prefix + key].copy(), requires_grad=True)
        params["out.w"] = Tensor(arrays[prefix + "out.w"].copy(), requires_grad=True)
        params["out.b"] = Tensor(arrays[prefix + "out.b"].copy(), requires_grad=True)
        running_mean = [arrays[f"{prefix}bn{i}.mean"].copy()
                        for i in range(mlp_config.hidden_layers)]
        running_var = [arrays[f"{prefix}bn{i}.var"].copy()
                       for i in range(mlp_config.hidden_layers)]
        members.append(MLPMember(params, running_mean, running_var))
    names = manifest.get("feature_names")
    return SurvivalModel(forest=forest, members=members, mlp_config=mlp_config,
                         feature_mean=arrays["scaler.feature_mean"],
                         feature_std=arrays["scaler.feature_std"],
                         target_mean=float(manifest["target_mean"]),
                         target_std=float(manifest["target_std"]),
                         feature_names=tuple(names) if names else None)
