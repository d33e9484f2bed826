"""Command-line entry point: ``tcnet <command> [options]``.

Exit status is 0 on success, 1 on a runtime failure (one line on stderr of
the form ``error: <kind>: <message>``) and 2 on a usage error.  Every command
writes ``repro.json`` (config hash, seed, package version) beside its outputs.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys

import numpy as np

from . import __version__

SEED_ENV = "TCNET_SEED"


class CommandError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


# -- shared helpers ----------------------------------------------------------

def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise CommandError("invalid input", f"{SEED_ENV}={raw!r} is not an integer") from None


def int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def write_json(path: str, data) -> None:
    from .io import atomic_write

    atomic_write(path, lambda fh: fh.write(json.dumps(data, indent=2, sort_keys=True) + "\n"), mode="w")


def write_text(path: str, text: str) -> None:
    from .io import atomic_write

    atomic_write(path, lambda fh: fh.write(text), mode="w")


def write_repro(path: str, command: str, seed: int, config: dict) -> None:
    """Record what is needed to rerun a command: its resolved config, seed and build."""
    canonical = json.dumps(config, sort_keys=True, default=str).encode()
    from .forest import BACKEND

    write_json(path, {
        "command": command,
        "config": config,
        "config_hash": hashlib.sha256(canonical).hexdigest(),
        "seed": seed,
        "version": __version__,
        "forest_backend": BACKEND,
        "python": platform.python_version(),
        "numpy": np.__version__,
    })


def out_dir(args) -> str:
    path = args.out or os.path.join("tcnet-runs", args.command)
    os.makedirs(path, exist_ok=True)
    return path


def resolve_config(args, required: bool):
    from .config import load_config, load_preset

    if getattr(args, "preset", None) and getattr(args, "config", None):
        raise CommandError("invalid input", "give either --preset or --config, not both")
    if getattr(args, "preset", None):
        return load_preset(args.preset)
    if getattr(args, "config", None):
        return load_config(args.config)
    if required:
        raise CommandError("invalid input", "this command needs --preset or --config")
    return None


def split_by_subjects(ds, test_subjects):
    from .io import default_test_subjects

    subjects = test_subjects if test_subjects else default_test_subjects(ds)
    train, test = ds.split_subjects(subjects)
    if len(train) == 0 or len(test) == 0:
        raise CommandError("invalid input", f"test subjects {subjects} leave an empty train or test split")
    return train, test, [int(s) for s in subjects]


def progress(args):
    if not args.verbose:
        return None
    return lambda row: print(json.dumps({k: (float(v) if isinstance(v, np.floating) else v) for k, v in row.items()}),
                             file=sys.stderr, flush=True)


def default_rf_blocks(length: int) -> list[int]:
    blocks = [m for m in (32, 128) if m <= length]
    return blocks or [length]


# -- commands ----------------------------------------------------------------

def cmd_synth(args) -> dict:
    from .io import save_dataset, synth_generate

    ds = synth_generate(n_classes=args.classes, per_class=args.per_class, n_channels=args.channels,
                        length=args.length, fs=args.fs, seed=args.seed, noise=args.noise)
    save_dataset(ds, args.out)
    write_repro(args.out + ".repro.json", "synth", args.seed, {
        "classes": args.classes, "per_class": args.per_class, "channels": args.channels, "length": args.length,
        "fs": args.fs, "noise": args.noise})
    return {"windows": len(ds), "channels": ds.n_channels, "length": ds.length, "classes": ds.n_classes,
            "path": args.out}


def cmd_import_csv(args) -> dict:
    from .io import import_csv, save_dataset

    with open(args.manifest) as fh:
        manifest = json.load(fh)
    ds = import_csv(args.dir, manifest)
    if len(ds) == 0:
        raise CommandError("invalid input", "no complete window could be cut from the CSV files")
    save_dataset(ds, args.out)
    write_repro(args.out + ".repro.json", "import-csv", args.seed, {"manifest": manifest, "dir": args.dir})
    return {"windows": len(ds), "channels": ds.n_channels, "length": ds.length, "classes": ds.n_classes,
            "dropped_rows": ds.metadata["dropped_rows"], "path": args.out}


def cmd_extract(args) -> dict:
    import csv

    from .anchors import ExtractorParams, extract_all, make_layout
    from .io import atomic_write, load_dataset
    from .model import n_blocks, unfold_blocks

    ds = load_dataset(args.data)
    stride = args.stride or args.block
    if args.block > ds.length:
        raise CommandError("invalid input", f"block size {args.block} exceeds window length {ds.length}")
    params = ExtractorParams.default(sampling_rate=ds.sampling_rate)
    layout = make_layout(params, args.block)
    n = n_blocks(ds.length, args.block, stride)

    def write(fh):
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["window", "block", "channel"] + list(layout.feature_names))
        for start in range(0, len(ds), 128):
            x = ds.windows[start:start + 128].astype(np.float64)
            z = extract_all(unfold_blocks(x, args.block, stride), params, args.mode).values.data
            for i in range(len(x)):
                for b in range(n):
                    for c in range(ds.n_channels):
                        writer.writerow([start + i, b, ds.channel_names[c]] + [repr(float(v)) for v in z[i, b, c]])

    atomic_write(args.out, write, mode="w")
    write_repro(args.out + ".repro.json", "extract", args.seed, {
        "data": args.data, "block": args.block, "stride": stride, "mode": args.mode})
    return {"rows": len(ds) * n * ds.n_channels, "features": layout.width, "path": args.out}


def cmd_train(args) -> dict:
    from .io import load_dataset
    from .model import TCNet, save_checkpoint
    from .training import metrics, predict, train

    run = resolve_config(args, required=True)
    ds = load_dataset(args.data)
    run.check_dataset(ds)
    over = {k: v for k, v in (("lr", args.lr), ("max_epochs", args.epochs), ("batch_size", args.batch_size)) if v}
    over["seed"] = args.seed
    if args.epochs:
        over["patience"] = min(run.train.get("patience", args.epochs), args.epochs)
    tcfg = run.train_config(**over)
    mcfg = run.model_config(seed=args.seed, sampling_rate=ds.sampling_rate,
                            **({"disable_correction": True} if args.disable_correction else {}))
    train_ds, test_ds, test_subjects = split_by_subjects(ds, args.test_subjects)
    model = TCNet(mcfg)
    result = train(model, train_ds.windows, train_ds.labels, tcfg, log=progress(args))
    report = metrics(predict(model, test_ds.windows).argmax(axis=1), test_ds.labels, ds.n_classes)
    folder = out_dir(args)
    save_checkpoint(model, os.path.join(folder, "model.tcnm"))
    write_text(os.path.join(folder, "history.csv"), result.history_csv())
    summary = {"test": report.to_json(), "best_epoch": result.best_epoch, "best_val_mf1": result.best_val_mf1,
               "epochs_run": len(result.history), "stopped_early": result.stopped_early,
               "test_subjects": test_subjects, "n_train": len(train_ds), "n_test": len(test_ds)}
    write_json(os.path.join(folder, "metrics.json"), summary)
    write_repro(os.path.join(folder, "repro.json"), "train", args.seed, {
        "data": args.data, "model": mcfg.to_json(), "train": vars(tcfg), "test_subjects": test_subjects})
    return {"macro_f1": report.macro_f1, "accuracy": report.accuracy, "best_epoch": result.best_epoch,
            "out": folder}


def cmd_eval(args) -> dict:
    from .correction import correction_magnitudes, write_magnitude_csv
    from .io import load_dataset
    from .model import TCNet, load_checkpoint
    from .training import metrics

    model = load_checkpoint(args.model)
    if not isinstance(model, TCNet):
        raise CommandError("invalid input", f"{args.model} holds a pretraining encoder, not a classifier")
    ds = load_dataset(args.data)
    cfg = model.cfg
    if (ds.n_channels, ds.length) != (cfg.n_channels, cfg.length):
        raise CommandError("config mismatch", f"model expects {cfg.n_channels} channels x {cfg.length} samples, "
                                              f"dataset has {ds.n_channels} x {ds.length}")
    if args.test_subjects:
        _, ds, _ = split_by_subjects(ds, args.test_subjects)
    logits, sums, count = [], {}, 0
    for start in range(0, len(ds), 128):
        out = model(ds.windows[start:start + 128].astype(np.float64))
        logits.append(out.logits.data)
        weight = len(out.logits.data)
        for bundle, raw in zip(out.bundles, out.raw):
            for fam, value in correction_magnitudes(bundle, raw).items():
                sums[fam] = sums.get(fam, 0.0) + weight * value / len(out.bundles)
        count += weight
    pred = np.concatenate(logits).argmax(axis=1)
    if int(ds.labels.max()) >= cfg.n_classes:
        raise CommandError("config mismatch", f"dataset labels exceed the model's {cfg.n_classes} classes")
    report = metrics(pred, ds.labels, cfg.n_classes)
    folder = out_dir(args)
    write_json(os.path.join(folder, "metrics.json"), report.to_json())
    name = os.path.splitext(os.path.basename(args.data))[0]
    write_magnitude_csv(os.path.join(folder, "correction_magnitudes.csv"),
                        [(fam, name, value / count) for fam, value in sums.items()])
    write_repro(os.path.join(folder, "repro.json"), "eval", args.seed, {
        "model": args.model, "data": args.data, "test_subjects": args.test_subjects})
    return {"macro_f1": report.macro_f1, "accuracy": report.accuracy, "out": folder}


def cmd_grad_check(args) -> dict:
    from .gradsuite import run_suite

    log = (lambda r: print(f"{r.module}.{r.name}: {r.max_error:.3e}", file=sys.stderr, flush=True)) \
        if args.verbose else None
    report = run_suite(args.module, n_inputs=args.inputs, seed=args.seed, tol=args.tol, log=log)
    folder = out_dir(args)
    write_json(os.path.join(folder, "gradcheck.json"), report.to_json())
    write_repro(os.path.join(folder, "repro.json"), "grad-check", args.seed, {
        "module": args.module, "inputs": args.inputs, "tol": args.tol})
    print(report.to_text())
    if not report.passed:
        failed = [f"{r.module}.{r.name}" for r in report.results if not r.passed(args.tol)]
        raise CommandError("gradient mismatch", f"{len(failed)} operation(s) above {args.tol:g}: {', '.join(failed)}")
    return None


def cmd_sensitivity(args) -> dict:
    from .anchors import ExtractorParams
    from .io import load_dataset
    from .sensitivity import PerturbationSpec, sensitivity_scan

    ds = load_dataset(args.data)
    specs = [PerturbationSpec("gaussian-noise", s) for s in args.noise]
    if ds.n_channels % 3 == 0:
        specs += [PerturbationSpec("rotation", d) for d in args.rotation]
    elif args.rotation_given:
        raise CommandError("invalid input", f"rotation needs tri-axial channel groups; dataset has {ds.n_channels}")
    specs += [PerturbationSpec("temporal-shift", f) for f in args.shift]
    windows = ds.windows.astype(np.float64)
    if args.max_windows and len(windows) > args.max_windows:
        pick = np.sort(np.random.default_rng(args.seed).choice(len(windows), args.max_windows, replace=False))
        windows = windows[pick]
    report = sensitivity_scan(windows, specs, ExtractorParams.default(sampling_rate=ds.sampling_rate),
                              mode=args.mode, seed=args.seed)
    folder = out_dir(args)
    write_text(os.path.join(folder, "sensitivity.csv"), report.to_csv())
    if args.per_feature:
        write_text(os.path.join(folder, "sensitivity_features.csv"), report.to_csv(per_feature=True))
    write_repro(os.path.join(folder, "repro.json"), "sensitivity", args.seed, {
        "data": args.data, "specs": [s.label for s in specs], "mode": args.mode, "max_windows": args.max_windows})
    return {spec.label: dict(zip(report.families, map(float, row)))
            for spec, row in zip(report.specs, report.family_change)}


def _load_embeddings(path: str):
    with np.load(path) as data:
        missing = {"features", "labels", "subjects"} - set(data.files)
        if missing:
            raise CommandError("unrecognized format", f"{path} lacks arrays {sorted(missing)}")
        return data["features"], data["labels"], data["subjects"]


def cmd_rf_baseline(args) -> dict:
    from . import forest as F
    from .anchors import ExtractorParams, make_layout
    from .io import load_dataset
    from .training import metrics

    run = resolve_config(args, required=False)
    rf = dict(run.rf) if run else {}
    trees = args.trees or rf.get("n_trees", 300)
    depth = args.depth or rf.get("max_depth", 20)
    fcfg = F.ForestConfig(n_trees=trees, max_depth=depth, class_weight=args.class_weight, seed=args.seed)
    if args.features:
        X, y, subjects = _load_embeddings(args.features)
        test_ids = args.test_subjects or sorted(set(subjects.tolist()))[-max(1, round(0.2 * len(set(subjects.tolist())))):]
        test = np.isin(subjects, test_ids)
        families, blocks, n_classes = None, None, int(y.max()) + 1
        source = {"features": args.features}
    else:
        ds = load_dataset(args.data)
        if run:
            run.check_dataset(ds)
        blocks = args.blocks or rf.get("block_sizes") or default_rf_blocks(ds.length)
        params = ExtractorParams.default(sampling_rate=ds.sampling_rate)
        X = F.extract_rf_features(ds.windows, blocks, params)
        y, subjects, n_classes = ds.labels, ds.subjects, ds.n_classes
        _, _, test_ids = split_by_subjects(ds, args.test_subjects)
        test = np.isin(subjects, test_ids)
        families = [make_layout(params, m) for m in blocks]
        source = {"data": args.data, "blocks": list(blocks)}
    if test.all() or not test.any():
        raise CommandError("invalid input", "subject split leaves an empty train or test set")
    forest = F.fit_forest(X[~test], y[~test], fcfg, n_classes)
    pred, _ = F.predict_forest(forest, X[test])
    report = metrics(pred, y[test], n_classes)
    summary = {"test": report.to_json(), "oob_score": forest.oob_score, "n_features": int(X.shape[1]),
               "n_train": int((~test).sum()), "n_test": int(test.sum()),
               "test_subjects": [int(s) for s in test_ids]}
    if families is not None:
        summary["family_importance"] = F.family_importance(forest, families)
    folder = out_dir(args)
    F.save_forest(forest, os.path.join(folder, "forest.tcrf"))
    write_json(os.path.join(folder, "metrics.json"), summary)
    write_repro(os.path.join(folder, "repro.json"), "rf-baseline", args.seed, {
        **source, "forest": vars(fcfg), "config": run.to_json() if run else None})
    return {"macro_f1": report.macro_f1, "accuracy": report.accuracy, "oob_score": forest.oob_score,
            **({"family_importance": summary["family_importance"]} if families is not None else {}), "out": folder}


def cmd_probe(args) -> dict:
    from . import forest as F
    from .anchors import ExtractorParams, make_layout
    from .io import load_dataset

    ds = load_dataset(args.data)
    if args.embeddings:
        X, _, subjects = _load_embeddings(args.embeddings)
        if len(X) != len(ds) or not np.array_equal(subjects, ds.subjects):
            raise CommandError("invalid input", "embeddings do not line up with the dataset windows")
    else:
        X = _embed(args.model, ds)
    blocks = args.blocks or default_rf_blocks(ds.length)
    params = ExtractorParams.default(sampling_rate=ds.sampling_rate)
    Y = F.extract_rf_features(ds.windows, blocks, params)
    families = [f for m in blocks for f in F.probe_target_families(make_layout(params, m), ds.n_channels)]
    _, _, test_ids = split_by_subjects(ds, args.test_subjects)
    test = np.isin(ds.subjects, test_ids)
    report = F.ridge_probe(X[~test], Y[~test], X[test], Y[test], lam=args.ridge, families=families)
    folder = out_dir(args)
    F.write_probe_csv(os.path.join(folder, "probe.csv"), report)
    write_repro(os.path.join(folder, "repro.json"), "probe", args.seed, {
        "data": args.data, "embeddings": args.embeddings, "model": args.model, "blocks": list(blocks),
        "ridge": args.ridge, "test_subjects": [int(s) for s in test_ids]})
    return {family: {"r2_train": tr, "r2_test": te} for family, tr, te in report.rows()}


def _embed(model_path: str, ds) -> np.ndarray:
    from .model import CompactEncoder, load_checkpoint
    from .training import freeze_embed

    encoder = load_checkpoint(model_path)
    if not isinstance(encoder, CompactEncoder):
        raise CommandError("invalid input", f"{model_path} is not a pretraining encoder checkpoint")
    if ds.length != encoder.cfg.length:
        raise CommandError("config mismatch", f"encoder expects {encoder.cfg.length}-sample windows, "
                                              f"dataset has {ds.length}")
    if ds.n_channels % 3:
        raise CommandError("config mismatch", f"channel count {ds.n_channels} is not divisible by 3")
    return freeze_embed(encoder, ds.windows)


def cmd_pretrain(args) -> dict:
    from .io import load_dataset
    from .model import CompactConfig, CompactEncoder, save_checkpoint
    from .training import TrainConfig, ssl_pretrain

    run = resolve_config(args, required=False)
    ssl = dict(run.ssl) if run else {}
    ds = load_dataset(args.data)
    if ds.n_channels % 3:
        raise CommandError("config mismatch", f"channel count {ds.n_channels} is not divisible by 3")
    block = args.block or ssl.get("block_size", 32)
    tcfg = TrainConfig(lr=args.lr or ssl.get("lr", 1e-3), weight_decay=ssl.get("weight_decay", 1e-4),
                       max_epochs=args.epochs or ssl.get("max_epochs", 20),
                       patience=args.epochs or ssl.get("max_epochs", 20),
                       batch_size=args.batch_size or ssl.get("batch_size", 256), seed=args.seed)
    ccfg = CompactConfig(length=ds.length, block_size=block, sampling_rate=ds.sampling_rate, seed=args.seed)
    groups = ds.windows.reshape(len(ds), ds.n_channels // 3, 3, ds.length).reshape(-1, 3, ds.length)
    encoder = CompactEncoder(ccfg)
    result = ssl_pretrain(encoder, groups, tcfg, log=progress(args))
    folder = out_dir(args)
    save_checkpoint(encoder, os.path.join(folder, "encoder.tcnm"))
    lines = ["epoch,lr,loss,acc_aot,acc_permute,acc_warp"]
    lines += [",".join(f"{row[k]:.10g}" if k != "epoch" else str(row[k])
                       for k in ("epoch", "lr", "loss", "acc_aot", "acc_permute", "acc_warp"))
              for row in result.history]
    write_text(os.path.join(folder, "history.csv"), "\n".join(lines) + "\n")
    write_repro(os.path.join(folder, "repro.json"), "pretrain", args.seed, {
        "data": args.data, "encoder": ccfg.to_json(), "train": vars(tcfg)})
    last = result.history[-1]
    return {"loss": last["loss"], "acc_aot": last["acc_aot"], "acc_permute": last["acc_permute"],
            "acc_warp": last["acc_warp"], "instances": len(groups), "out": folder}


def cmd_freeze_embed(args) -> dict:
    from .io import atomic_write, load_dataset

    ds = load_dataset(args.data)
    X = _embed(args.model, ds)
    atomic_write(args.out, lambda fh: np.savez(fh, features=X, labels=ds.labels, subjects=ds.subjects))
    write_repro(args.out + ".repro.json", "freeze-embed", args.seed, {"model": args.model, "data": args.data})
    return {"rows": int(X.shape[0]), "columns": int(X.shape[1]), "path": args.out}


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tcnet", description="Feature-anchor activity recognition toolkit.")
    parser.add_argument("--version", action="version", version=f"tcnet {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=None, help=f"random seed (default: ${SEED_ENV} or 0)")
        p.add_argument("--verbose", action="store_true", help="progress lines on stderr")
        return p

    p = command("synth", cmd_synth, "generate the seeded synthetic activity dataset")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--length", type=int, default=128)
    p.add_argument("--fs", type=float, default=50.0)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--out", required=True, help="dataset file to write")

    p = command("import-csv", cmd_import_csv, "cut windows from CSV recordings described by a JSON manifest")
    p.add_argument("--dir", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="dataset file to write")

    p = command("extract", cmd_extract, "dump anchors: one CSV row per (window, block, channel)")
    p.add_argument("--data", required=True)
    p.add_argument("--block", type=int, default=32)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--mode", choices=("hard", "soft"), default="hard")
    p.add_argument("--out", required=True, help="CSV file to write")

    p = command("train", cmd_train, "train TCNet and evaluate on held-out subjects")
    p.add_argument("--data", required=True)
    p.add_argument("--preset")
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--disable-correction", action="store_true", help="ablation: keep only the raw anchor view")
    p.add_argument("--test-subjects", type=int_list)
    p.add_argument("--out", help="output directory")

    p = command("eval", cmd_eval, "score a trained checkpoint and report correction magnitudes")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--test-subjects", type=int_list)
    p.add_argument("--out")

    p = command("grad-check", cmd_grad_check, "compare taped gradients with central differences")
    p.add_argument("--module", default="all", choices=("all", "tensor", "anchors", "correction", "model", "loss"))
    p.add_argument("--inputs", type=int, default=20, help="seeded random inputs per operation")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out")

    p = command("sensitivity", cmd_sensitivity, "relative anchor change under noise, rotation and shift")
    p.add_argument("--data", required=True)
    p.add_argument("--noise", type=float_list, default=[0.0, 0.01, 0.04, 0.1], help="sigma in signal-std units")
    p.add_argument("--rotation", type=float_list, default=None, help="degrees")
    p.add_argument("--shift", type=float_list, default=[0.0, 0.05, 0.1, 0.25], help="fraction of the window")
    p.add_argument("--mode", choices=("hard", "soft"), default="hard")
    p.add_argument("--max-windows", type=int, default=500)
    p.add_argument("--per-feature", action="store_true")
    p.add_argument("--out")

    p = command("rf-baseline", cmd_rf_baseline, "random forest on block-averaged anchors (or on embeddings)")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--data")
    source.add_argument("--features", help=".npz written by freeze-embed")
    p.add_argument("--preset")
    p.add_argument("--config")
    p.add_argument("--blocks", type=int_list)
    p.add_argument("--trees", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--class-weight", choices=("balanced", "none"), default="balanced")
    p.add_argument("--test-subjects", type=int_list)
    p.add_argument("--out")

    p = command("probe", cmd_probe, "ridge probe from embeddings to anchor families")
    p.add_argument("--data", required=True)
    emb = p.add_mutually_exclusive_group(required=True)
    emb.add_argument("--embeddings", help=".npz written by freeze-embed")
    emb.add_argument("--model", help="pretraining encoder checkpoint")
    p.add_argument("--blocks", type=int_list)
    p.add_argument("--ridge", type=float, default=1.0)
    p.add_argument("--test-subjects", type=int_list)
    p.add_argument("--out")

    p = command("pretrain", cmd_pretrain, "self-supervised pretraining of the compact encoder")
    p.add_argument("--data", required=True)
    p.add_argument("--preset")
    p.add_argument("--config")
    p.add_argument("--block", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--out")

    p = command("freeze-embed", cmd_freeze_embed, "frozen encoder features for every tri-axial group")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help=".npz file to write")
    return parser


def main(argv=None) -> int:
    from .config import ConfigMismatch
    from .io import FormatError
    from .training import TrainingError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.seed is None:
            args.seed = default_seed()
        if args.command == "sensitivity":
            args.rotation_given = args.rotation is not None
            if args.rotation is None:
                args.rotation = [0.0, 5.0, 15.0, 30.0]
        result = args.func(args)
    except CommandError as exc:
        return _fail(exc.kind, str(exc))
    except FormatError as exc:
        return _fail(exc.kind, str(exc).split(": ", 1)[-1])
    except ConfigMismatch as exc:
        return _fail("config mismatch", str(exc))
    except TrainingError as exc:
        return _fail("training failed", str(exc))
    except (ValueError, KeyError) as exc:
        return _fail("invalid input", str(exc))
    except OSError as exc:
        return _fail("io", f"{exc.strerror or exc}: {exc.filename}" if exc.filename else str(exc))
    if result is not None:
        print(json.dumps(result, indent=2, sort_keys=True, default=float))
    return 0


def _fail(kind: str, message: str) -> int:
    print(f"error: {kind}: {' '.join(message.split())}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
