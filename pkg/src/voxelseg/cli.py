"""Command-line entry point: synth, preprocess, train, predict, evaluate,
features, survival-train, survival-predict, cv.

Configuration comes from an optional JSON file (sections: network, train,
augmentation, prediction, glcm, rfr, mlp, synth) layered over a profile
(`desk` by default, `paper` for the full-scale settings); explicit CLI flags
win over both. Every command validates its config before touching data and
writes a manifest.json snapshot next to its outputs.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure,
5 I/O or checkpoint error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np
import scipy

from . import __version__
from .augment import AttenuationSchedule, AugmentationConfig
from .errors import (CheckpointError, ConfigError, DegenerateGLCM,
                     DegenerateIntensity, DimensionMismatch, EmptyBrainMask,
                     EmptyDataset, EmptyMask, EmptyRegion, InvalidLabel,
                     MissingModality, NonFiniteGradient, ParseError,
                     RangeError, ShapeMismatch, SpecError)
from .inference import (PredictionConfig, evaluate_case, load_models, predict,
                        write_metrics_csv, write_metrics_summary)
from .network import NetworkConfig
from .nifti import read_nifti, write_nifti
from .parallel import get_num_threads, parallel_map, set_num_threads, threads_from_env
from .radiomics import GLCMConfig, assemble_features, canonical_feature_names
from .rng import RngStream
from .survival import (MLPEnsembleConfig, RFRConfig, load_survival_model,
                       predict_combined, save_survival_model,
                       train_survival_model)
from .synth import SyntheticCaseSpec, generate_dataset, write_survival_csv
from .train import TrainConfig, default_schedule, train
from .volume import (REGIONS, LabelMap, list_case_dirs, load_survival_table,
                     preprocess_case, read_case, read_internal_case,
                     read_internal_volume, write_internal_case)

PROFILES = {
    "desk": {
        "network": {"levels": 3, "base_filters": 8},
        "train": {"patch_size": [32, 32, 32], "epochs": 20, "batches_per_epoch": 10},
    },
    "paper": {
        "network": {"levels": 5, "base_filters": 16},
        "train": {"patch_size": [128, 128, 128], "epochs": 300, "batches_per_epoch": 100},
    },
}

_CONFIG_ERRORS = (ConfigError, SpecError)
_DATA_ERRORS = (MissingModality, ShapeMismatch, ParseError, EmptyBrainMask,
                DegenerateIntensity, InvalidLabel, EmptyDataset, EmptyMask,
                EmptyRegion, DegenerateGLCM, DimensionMismatch, RangeError)


def _load_config(path) -> dict:
    if not path:
        return {}
    try:
        with open(path) as f:
            cfg = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return cfg


def _section(config: dict, profile: str, name: str, overrides: dict) -> dict:
    base = dict(PROFILES.get(profile, {}).get(name, {}))
    base.update(config.get(name, {}))
    base.update({k: v for k, v in overrides.items() if v is not None})
    return base


def _write_manifest(out_dir: str, command: str, payload: dict) -> None:
    manifest = {
        "command": command,
        "versions": {"voxelseg": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__},
        "threads": get_num_threads(),
        "wall_time": time.time(),
    }
    manifest.update(payload)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")


def _schedule_from_config(config: dict, epochs: int) -> AttenuationSchedule:
    aug = config.get("augmentation")
    if not aug:
        return default_schedule(epochs)
    initial = AugmentationConfig.from_dict(aug.get("initial", {}))
    final = AugmentationConfig.from_dict(aug.get("final", aug.get("initial", {})))
    return AttenuationSchedule(initial, final, epochs)


def _load_case_any(case_dir: str):
    if os.path.isfile(os.path.join(case_dir, "t1.json")):
        return read_internal_case(case_dir)
    return read_case(case_dir)


def _attach_metadata(case, table):
    if table is None or case.case_id not in table:
        return case
    age, days = table[case.case_id]
    return replace(case, age=age, survival_days=days)


def _fmt_float(x) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(args) -> int:
    config = _load_config(args.config)
    overrides = {
        "shape": [args.shape] * 3 if args.shape else None,
        "r_enh": args.r_enh,
        "r_core": args.r_core,
        "r_whole": args.r_whole,
        "noise_sigma": args.noise_sigma,
        "seed": args.seed,
    }
    spec = SyntheticCaseSpec(**_section(config, args.profile, "synth", overrides))
    generate_dataset(spec, args.cases, args.out, jitter=not args.no_jitter)
    _write_manifest(args.out, "synth", {
        "config": {"synth": spec.to_dict()},
        "n_cases": args.cases,
        "jitter": not args.no_jitter,
        "seed": spec.seed,
    })
    print(f"wrote {args.cases} synthetic cases to {args.out}")
    return 0


def cmd_preprocess(args) -> int:
    case_dirs = list_case_dirs(args.input)
    if not case_dirs:
        raise EmptyDataset(f"no case directories under {args.input}")
    table = None
    table_path = os.path.join(args.input, "survival.csv")
    if os.path.isfile(table_path):
        table = load_survival_table(table_path)

    def process(case_dir):
        case = _attach_metadata(read_case(case_dir), table)
        processed, _ = preprocess_case(case)
        write_internal_case(processed, os.path.join(args.output, processed.case_id))
        return processed

    os.makedirs(args.output, exist_ok=True)
    processed = parallel_map(process, case_dirs)
    if table is not None:
        write_survival_csv(os.path.join(args.output, "survival.csv"), processed)
    _write_manifest(args.output, "preprocess", {
        "input": args.input,
        "n_cases": len(processed),
        "cases": [c.case_id for c in processed],
        "config": {"normalization": {"clip": 5.0, "rescale": "(z+5)/10",
                                     "std": "population", "eps_std": 1e-8}},
    })
    print(f"preprocessed {len(processed)} cases into {args.output}")
    return 0


def _load_preprocessed(data_dir: str):
    case_dirs = list_case_dirs(data_dir)
    if not case_dirs:
        raise EmptyDataset(f"no case directories under {data_dir}")
    cases = [read_internal_case(d) for d in case_dirs]
    for case in cases:
        stack = case.stack()
        if stack.min() < 0.0 or stack.max() > 1.0:
            raise RangeError(
                f"case {case.case_id}: intensities outside [0, 1]; run preprocess first")
    return cases


def _resolve_train_configs(args):
    config = _load_config(args.config)
    net = NetworkConfig.from_dict(_section(config, args.profile, "network", {
        "levels": args.levels,
        "base_filters": args.base_filters,
    }))
    tr = TrainConfig.from_dict(_section(config, args.profile, "train", {
        "epochs": args.epochs,
        "batches_per_epoch": args.batches,
        "batch_size": args.batch_size,
        "patch_size": [args.patch] * 3 if args.patch else None,
        "seed": args.seed,
        "checkpoint_interval": args.checkpoint_interval,
    }))
    schedule = _schedule_from_config(config, tr.epochs)
    return config, net, tr, schedule


def cmd_train(args) -> int:
    config, net, tr, schedule = _resolve_train_configs(args)
    cases = _load_preprocessed(args.data)
    train(tr, net, cases, args.out, schedule=schedule)
    final = f"ckpt_epoch_{tr.epochs}"
    _write_manifest(args.out, "train", {
        "config": {
            "network": net.to_dict(),
            "train": tr.to_dict(),
            "augmentation": {"initial": schedule.initial.to_dict(),
                             "final": schedule.final.to_dict()},
        },
        "seed": tr.seed,
        "data": args.data,
        "n_cases": len(cases),
        "final_checkpoint": final,
    })
    print(f"training finished; final checkpoint {os.path.join(args.out, final)}")
    return 0


def cmd_predict(args) -> int:
    models = load_models(args.checkpoints)
    pconfig = PredictionConfig(
        mirror_tta=bool(args.mirror_tta),
        dropout_samples=args.dropout_samples or 0,
        ensemble_checkpoints=tuple(sorted(args.checkpoints)),
        dropout_seed=args.seed or 0,
    )
    cases = _load_preprocessed(args.data)
    os.makedirs(args.out, exist_ok=True)

    def run(case):
        _, label = predict(case, models, pconfig)
        write_nifti(os.path.join(args.out, case.case_id + ".nii.gz"),
                    label.data.astype(np.int16), case.spacing)
        return case.case_id

    ids = parallel_map(run, cases)
    _write_manifest(args.out, "predict", {
        "config": {"prediction": {
            "mirror_tta": pconfig.mirror_tta,
            "dropout_samples": pconfig.dropout_samples,
            "ensemble_checkpoints": list(pconfig.ensemble_checkpoints),
            "dropout_seed": pconfig.dropout_seed,
        }},
        "cases": ids,
    })
    print(f"predicted {len(ids)} cases into {args.out}")
    return 0


def _load_label_file(path: str) -> tuple:
    data, spacing = read_nifti(path)
    if not np.issubdtype(data.dtype, np.integer):
        rounded = np.rint(data)
        if not np.array_equal(rounded, data):
            raise InvalidLabel(f"{path}: non-integer label values")
        data = rounded.astype(np.int16)
    return LabelMap(data.astype(np.int16)), spacing


def _find_reference(ref_root: str, case_id: str):
    case_dir = os.path.join(ref_root, case_id)
    internal = os.path.join(case_dir, "seg")
    if os.path.isfile(internal + ".json"):
        data, spacing = read_internal_volume(internal)
        return LabelMap(data.astype(np.int16)), spacing
    for ext in (".nii", ".nii.gz"):
        path = os.path.join(case_dir, "seg" + ext)
        if os.path.isfile(path):
            return _load_label_file(path)
    raise MissingModality(f"no reference segmentation for case {case_id} under {ref_root}")


def cmd_evaluate(args) -> int:
    pred_files = {}
    for name in sorted(os.listdir(args.pred)):
        base = None
        if name.endswith(".nii.gz"):
            base = name[:-7]
        elif name.endswith(".nii"):
            base = name[:-4]
        if base:
            pred_files[base] = os.path.join(args.pred, name)
    if not pred_files:
        raise EmptyDataset(f"no .nii[.gz] predictions under {args.pred}")

    def evaluate_one(item):
        case_id, path = item
        pred, _ = _load_label_file(path)
        ref, spacing = _find_reference(args.ref, case_id)
        return case_id, evaluate_case(pred, ref, spacing, args.hausdorff_percentile)

    pairs = parallel_map(evaluate_one, sorted(pred_files.items()))
    reports = dict(pairs)
    os.makedirs(args.out, exist_ok=True)
    write_metrics_csv(os.path.join(args.out, "metrics.csv"), reports)
    write_metrics_summary(os.path.join(args.out, "summary.json"), reports)
    _write_manifest(args.out, "evaluate", {
        "pred": args.pred,
        "ref": args.ref,
        "hausdorff_percentile": args.hausdorff_percentile,
        "n_cases": len(reports),
    })
    print(f"evaluated {len(reports)} cases; metrics.csv and summary.json in {args.out}")
    return 0


def cmd_features(args) -> int:
    config = _load_config(args.config)
    glcm = GLCMConfig(**_section(config, args.profile, "glcm", {}))
    case_dirs = list_case_dirs(args.data)
    if not case_dirs:
        raise EmptyDataset(f"no case directories under {args.data}")
    table = None
    if args.survival:
        table = load_survival_table(args.survival)
    else:
        default_table = os.path.join(args.data, "survival.csv")
        if os.path.isfile(default_table):
            table = load_survival_table(default_table)

    def load(case_dir):
        case = _load_case_any(case_dir)
        return _attach_metadata(case, table)

    cases = parallel_map(load, case_dirs)
    for case in cases:
        if case.label is None:
            raise EmptyDataset(f"case {case.case_id} has no segmentation")
    ages = [case.age for case in cases]
    with_age = all(a is not None for a in ages)
    if not with_age and any(a is not None for a in ages):
        raise ConfigError("some cases have ages and some do not; "
                          "provide a complete survival.csv or none")

    def extract(case):
        vec = assemble_features(case, age=case.age if with_age else None,
                                glcm_config=glcm)
        return case.case_id, vec

    rows = parallel_map(extract, cases)
    names = canonical_feature_names(with_age)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "features.csv")
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("case_id",) + names)
        for case_id, vec in sorted(rows, key=lambda r: r[0]):
            writer.writerow([case_id] + [_fmt_float(v) for v in vec.values])
    regions_present = {
        case.case_id: {r: bool(np.isin(case.label.data, REGIONS[r]).any())
                       for r in sorted(REGIONS)}
        for case in cases
    }
    _write_manifest(args.out, "features", {
        "config": {"glcm": glcm.to_dict()},
        "with_age": with_age,
        "n_features": len(names),
        "regions_present": regions_present,
        "empty_region_policy": "all features 0, presence flag false",
    })
    print(f"wrote {len(rows)} feature rows x {len(names)} columns to {csv_path}")
    return 0


def _read_features_csv(path: str):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[0] != "case_id":
            raise ParseError(f"{path}: first column must be case_id")
        names = tuple(header[1:])
        ids = []
        rows = []
        for row in reader:
            if len(row) != len(header):
                raise ParseError(f"{path}: row width {len(row)} != header width {len(header)}")
            ids.append(row[0])
            rows.append([float(v) for v in row[1:]])
    if not ids:
        raise EmptyDataset(f"{path}: no feature rows")
    return ids, names, np.asarray(rows, dtype=np.float64)


def cmd_survival_train(args) -> int:
    config = _load_config(args.config)
    rfr = RFRConfig(**_section(config, args.profile, "rfr", {
        "n_trees": args.trees, "seed": args.seed}))
    mlp = MLPEnsembleConfig(**_section(config, args.profile, "mlp", {
        "n_members": args.members, "epochs": args.mlp_epochs, "seed": args.seed}))
    ids, names, X = _read_features_csv(args.features)
    table = load_survival_table(args.survival)
    keep = []
    y = []
    for i, case_id in enumerate(ids):
        entry = table.get(case_id)
        if entry is None or entry[1] is None:
            continue
        keep.append(i)
        y.append(entry[1])
    if len(keep) < 2:
        raise EmptyDataset("need at least 2 cases with survival days")
    model = train_survival_model(X[keep], np.asarray(y), rfr, mlp, feature_names=names)
    save_survival_model(args.out, model)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    _write_manifest(out_dir, "survival-train", {
        "config": {"rfr": rfr.to_dict(), "mlp": mlp.to_dict()},
        "features": args.features,
        "survival": args.survival,
        "n_cases": len(keep),
        "n_features": X.shape[1],
        "model": os.path.basename(args.out),
    })
    print(f"trained survival model on {len(keep)} cases -> {args.out}.json/.bin")
    return 0


def cmd_survival_predict(args) -> int:
    model = load_survival_model(args.model)
    ids, names, X = _read_features_csv(args.features)
    if model.feature_names and tuple(names) != tuple(model.feature_names):
        raise DimensionMismatch(
            "feature columns do not match the model's training features")
    preds = predict_combined(model, X)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)) or ".", exist_ok=True)
    with open(args.out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["case_id", "predicted_days"])
        for case_id, p in zip(ids, preds):
            writer.writerow([case_id, _fmt_float(p)])
    _write_manifest(os.path.dirname(os.path.abspath(args.out)) or ".",
                    "survival-predict", {
                        "model": args.model,
                        "features": args.features,
                        "n_cases": len(ids),
                        "output": os.path.basename(args.out),
                    })
    print(f"wrote {len(ids)} predictions to {args.out}")
    return 0


def cmd_cv(args) -> int:
    config, net, tr, schedule = _resolve_train_configs(args)
    cases = _load_preprocessed(args.data)
    k = args.folds
    if len(cases) < k:
        raise EmptyDataset(f"cross-validation needs at least {k} cases, got {len(cases)}")
    idx = np.arange(len(cases))
    RngStream(tr.seed).shuffle(idx)
    folds = np.array_split(idx, k)
    os.makedirs(args.out, exist_ok=True)
    reports = {}
    fold_assignment = {}
    for f, test_idx in enumerate(folds):
        fold_dir = os.path.join(args.out, f"fold_{f}")
        train_cases = [cases[i] for i in idx if i not in set(test_idx)]
        test_cases = [cases[i] for i in test_idx]
        train(tr, net, train_cases, fold_dir, schedule=schedule)
        model = load_models([os.path.join(fold_dir, f"ckpt_epoch_{tr.epochs}")])
        for case in test_cases:
            fold_assignment[case.case_id] = f
            _, label = predict(case, model, PredictionConfig())
            if case.label is not None:
                reports[case.case_id] = evaluate_case(label, case.label, case.spacing)
    write_metrics_csv(os.path.join(args.out, "metrics.csv"), reports)
    write_metrics_summary(os.path.join(args.out, "summary.json"), reports)
    _write_manifest(args.out, "cv", {
        "config": {
            "network": net.to_dict(),
            "train": tr.to_dict(),
            "augmentation": {"initial": schedule.initial.to_dict(),
                             "final": schedule.final.to_dict()},
        },
        "seed": tr.seed,
        "folds": k,
        "fold_assignment": fold_assignment,
        "n_cases": len(cases),
    })
    print(f"{k}-fold cross-validation done; per-fold models under {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--profile", choices=sorted(PROFILES), default="desk",
                   help="parameter profile (default: desk)")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: VOXELSEG_THREADS or 1)")
    p.add_argument("--seed", type=int, default=None, help="master seed")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batches", type=int, default=None, help="batches per epoch")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--patch", type=int, default=None, help="cubic patch edge length")
    p.add_argument("--levels", type=int, default=None, help="network depth")
    p.add_argument("--base-filters", type=int, default=None)
    p.add_argument("--checkpoint-interval", type=int, default=None,
                   help="also checkpoint every N epochs (default: final only)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxelseg",
        description="Brain tumor segmentation and survival prediction toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic phantom cases")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--cases", type=int, required=True)
    p.add_argument("--shape", type=int, default=None, help="cubic volume edge length")
    p.add_argument("--r-enh", type=float, default=None)
    p.add_argument("--r-core", type=float, default=None)
    p.add_argument("--r-whole", type=float, default=None)
    p.add_argument("--noise-sigma", type=float, default=None)
    p.add_argument("--no-jitter", action="store_true",
                   help="use the exact spec geometry for every case")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="normalize cases into the internal format")
    _add_common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train the segmentation network")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--data", required=True, help="preprocessed case root")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="segment preprocessed cases")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", "--ensemble", dest="checkpoints", nargs="+",
                   required=True, help="checkpoint path base(s)")
    p.add_argument("--mirror-tta", action="store_true")
    p.add_argument("--dropout-samples", type=int, default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against references")
    _add_common(p)
    p.add_argument("--pred", required=True, help="directory of <case_id>.nii[.gz]")
    p.add_argument("--ref", required=True, help="root of case dirs with seg volumes")
    p.add_argument("--out", required=True)
    p.add_argument("--hausdorff-percentile", type=float, default=95.0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("features", help="extract radiomics features")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--survival", default=None,
                   help="survival.csv for ages (default: <data>/survival.csv)")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("survival-train", help="fit the survival regressors")
    _add_common(p)
    p.add_argument("--features", required=True, help="features.csv")
    p.add_argument("--survival", required=True, help="survival.csv")
    p.add_argument("--out", required=True, help="model path base")
    p.add_argument("--trees", type=int, default=None)
    p.add_argument("--members", type=int, default=None)
    p.add_argument("--mlp-epochs", type=int, default=None)
    p.set_defaults(func=cmd_survival_train)

    p = sub.add_parser("survival-predict", help="predict survival days")
    _add_common(p)
    p.add_argument("--features", required=True)
    p.add_argument("--model", required=True, help="model path base")
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_survival_predict)

    p = sub.add_parser("cv", help="k-fold segmentation cross-validation")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.set_defaults(func=cmd_cv)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    set_num_threads(args.threads if args.threads else threads_from_env(1))
    try:
        return args.func(args)
    except _CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NonFiniteGradient as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except (CheckpointError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
