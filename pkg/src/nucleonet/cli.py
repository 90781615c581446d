"""Command-line entry point: ``nucleonet <subcommand> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, NucleonetError

log = logging.getLogger("nucleonet")

VARIANT_CHOICES = ("default", "w", "wf", "wfm", "combo")
PATH_KEYS = ("manifest", "features", "out", "variant")


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def resolve_config(args):
    """Merge defaults, the JSON config file and command-line flags (in that order)."""
    from .training import ExperimentConfig

    raw = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
    raw.pop("command", None)  # recorded by write_resolved, not a setting
    paths = {k: raw.pop(k) for k in PATH_KEYS if k in raw}
    for key in ("seed", "rounds"):
        if getattr(args, key, None) is not None:
            raw[key] = getattr(args, key)
    for key in ("manifest", "features", "out", "variant"):
        if getattr(args, key, None) is not None:
            paths[key] = getattr(args, key)
    cfg = ExperimentConfig.from_dict(raw)
    return cfg, paths


def write_resolved(out_dir: Path, cfg, paths: dict, command: str):
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, **cfg.to_dict(), **{k: str(v) for k, v in paths.items()}}
    (out_dir / "resolved_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _require(paths, key):
    if paths.get(key) in (None, ""):
        raise ConfigError(f"missing config key {key!r} (set it in --config or pass --{key})")
    return paths[key]


def _variants(name):
    return ("wf", "wfm") if name == "combo" else (name,)


def _load_inputs(cfg, paths, variants):
    from .data import load_feature_file, load_images, load_manifest

    manifest = load_manifest(_require(paths, "manifest"))
    images = load_images(manifest, crop=cfg.crop, dtype=np.dtype(cfg.dtype))
    features = None
    if any(v in ("wf", "wfm") for v in variants):
        features = load_feature_file(
            _require(paths, "features"), expected_rows=len(manifest), expected_dim=cfg.feature_dim
        )
    return manifest, images, features


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_synth(args):
    from .synth import SynthParams, gen_synthetic

    out = Path(_require(vars(args), "out"))
    params = SynthParams(seed=args.seed if args.seed is not None else 0, count=args.count, side=args.side)
    manifest = gen_synthetic(params, out)
    (out / "synth_params.json").write_text(
        json.dumps({"seed": params.seed, "count": params.count, "side": params.side}, indent=2, sort_keys=True)
        + "\n"
    )
    print(f"wrote {len(manifest)} images to {out}")
    return 0


def cmd_extract_features(args):
    from .data import load_images, load_manifest, write_feature_file
    from .synth import extract_standin_features

    manifest = load_manifest(_require(vars(args), "manifest"))
    images = load_images(manifest, crop=None, dtype=np.float64)
    feats = extract_standin_features(images, args.dim)
    out = Path(_require(vars(args), "out"))
    out.parent.mkdir(parents=True, exist_ok=True)
    write_feature_file(out, feats)
    print(f"wrote {feats.shape[0]} x {feats.shape[1]} features to {out}")
    return 0


def cmd_pretrain_cae(args):
    from .checkpoint import save_checkpoint
    from .training import pretrain_cae, split_dataset

    cfg, paths = resolve_config(args)
    variant = paths.get("variant", "wfm")
    if variant == "combo":
        raise ConfigError("pretrain-cae takes a single variant")
    out = Path(_require(paths, "out"))
    write_resolved(out, cfg, paths, "pretrain-cae")
    manifest, images, _ = _load_inputs(cfg, paths, ())
    train_idx, _ = split_dataset(len(manifest), cfg.seed, cfg.split_fraction, args.round)
    ckpt, losses = pretrain_cae(
        images[train_idx], cfg.model_spec(variant), cfg, cfg.cae_weight(variant),
        round_index=args.round, log_path=out / "cae_log.tsv",
    )
    save_checkpoint(out / "cae.ckpt", ckpt)
    print(f"cae final loss {losses[-1]:.6g}" if losses else "cae: zero epochs")
    return 0


def train_variant(variant, cfg, manifest, images, features, out: Path):
    """Split, CAE-initialize and two-cycle train every round; evaluate on each held-out split."""
    from .checkpoint import save_checkpoint
    from .evaluation import evaluate
    from .training import (
        Targets, build_classifier, predict_two_cycle, pretrain_cae, split_dataset, train_two_cycle,
    )

    targets = Targets.from_manifest(manifest)
    classes = manifest.class_matrix()
    reports = []
    for r in range(cfg.rounds):
        rdir = out / variant / f"round{r}"
        rdir.mkdir(parents=True, exist_ok=True)
        train_idx, test_idx = split_dataset(len(manifest), cfg.seed, cfg.split_fraction, r)
        cae = None
        if cfg.use_cae and cfg.cae_epochs > 0:
            cae, _ = pretrain_cae(
                images[train_idx], cfg.model_spec(variant), cfg, cfg.cae_weight(variant),
                round_index=r, log_path=rdir / "cae_log.tsv",
            )
            save_checkpoint(rdir / "cae.ckpt", cae)
        net = build_classifier(variant, cfg, r, cae)
        inj = None if features is None or net.spec.injected_dim == 0 else features
        result = train_two_cycle(
            images[train_idx], targets.subset(train_idx), net, cfg,
            injected=None if inj is None else inj[train_idx], round_index=r, log_path=rdir / "train_log.tsv",
        )
        save_checkpoint(rdir / "model.ckpt", result.checkpoint)
        pred = predict_two_cycle(result.checkpoint, images[test_idx], None if inj is None else inj[test_idx])
        reports.append(evaluate(pred, classes[test_idx], targets.shapes[test_idx], round_index=r))
        log.info("%s round %d: mean AuROC %s", variant, r, reports[-1].mean_auroc)
    return reports


def cmd_train(args):
    from .evaluation import report

    cfg, paths = resolve_config(args)
    variant = _require(paths, "variant")
    if variant not in VARIANT_CHOICES:
        raise ConfigError(f"variant must be one of {VARIANT_CHOICES}, got {variant!r}")
    out = Path(_require(paths, "out"))
    write_resolved(out, cfg, paths, "train")
    variants = _variants(variant)
    manifest, images, features = _load_inputs(cfg, paths, variants)
    results = {v: train_variant(v, cfg, manifest, images, features, out) for v in variants}
    if variant == "combo":
        results["combo"] = _combo_reports(cfg, paths, out, manifest, images, features)
    _write_eval(out, results)
    summary = report(results, out)
    _print_summary(summary)
    return 0


def _predict_rounds(variant, cfg, run_dir: Path, manifest, images, features):
    from .checkpoint import load_checkpoint
    from .training import predict_two_cycle, split_dataset

    preds = []
    for r in range(cfg.rounds):
        _, test_idx = split_dataset(len(manifest), cfg.seed, cfg.split_fraction, r)
        ckpt = load_checkpoint(run_dir / variant / f"round{r}" / "model.ckpt")
        if ckpt.spec.variant != variant:
            raise DataError(f"{variant}/round{r}: checkpoint holds variant {ckpt.spec.variant!r}")
        inj = features[test_idx] if ckpt.spec.injected_dim > 0 else None
        preds.append((r, test_idx, predict_two_cycle(ckpt, images[test_idx], inj)))
    return preds


def _combo_reports(cfg, paths, run_dir, manifest, images, features):
    from .evaluation import evaluate
    from .models import combine_predictions

    classes, shapes = manifest.class_matrix(), manifest.shape_indices()
    wf = _predict_rounds("wf", cfg, run_dir, manifest, images, features)
    wfm = _predict_rounds("wfm", cfg, run_dir, manifest, images, features)
    out = []
    for (r, idx, p_wf), (_, _, p_wfm) in zip(wf, wfm):
        out.append(evaluate(combine_predictions(p_wf, p_wfm), classes[idx], shapes[idx], round_index=r))
    return out


def _write_eval(out: Path, results):
    for v, reps in results.items():
        doc = [r.to_dict(with_curves=True) for r in reps]
        (out / f"eval_{v}.json").write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _read_eval(path: Path):
    from .evaluation import EvaluationReport

    if not path.is_file():
        raise DataError(f"evaluation file not found: {path}")
    try:
        docs = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    reps = []
    for d in docs:
        d = dict(d)
        d["curves"] = {k: np.asarray(v) for k, v in d.get("curves", {}).items()}
        reps.append(EvaluationReport(**d))
    return reps


def _print_summary(summary):
    from .evaluation import _fmt

    for v, s in summary.items():
        print(
            f"{v}: mean AuROC {_fmt(s['mean_auroc']) or 'n/a'}, shapes {_fmt(s['mean_shape_auroc']) or 'n/a'}, "
            f"attr error {s['attr_error']:.4f}, shape error {s['shape_error']:.4f}"
        )


def cmd_eval(args):
    """Re-evaluate a finished training run's checkpoints on their held-out splits."""
    from .evaluation import _fmt, evaluate

    cfg, paths = resolve_config(args)
    variant = _require(paths, "variant")
    run_dir = Path(args.run)
    out = Path(paths.get("out") or run_dir)
    write_resolved(out, cfg, paths, "eval")
    variants = _variants(variant)
    manifest, images, features = _load_inputs(cfg, paths, variants)
    results = {}
    if variant == "combo":
        results["combo"] = _combo_reports(cfg, paths, run_dir, manifest, images, features)
    else:
        classes, shapes = manifest.class_matrix(), manifest.shape_indices()
        results[variant] = [
            evaluate(p, classes[idx], shapes[idx], round_index=r)
            for r, idx, p in _predict_rounds(variant, cfg, run_dir, manifest, images, features)
        ]
    _write_eval(out, results)
    for v, reps in results.items():
        for rep in reps:
            print(f"{v} round {rep.round_index}: mean AuROC {_fmt(rep.mean_auroc) or 'n/a'}")
    return 0


def cmd_report(args):
    from .evaluation import report

    results = {}
    for path in args.inputs:
        path = Path(path)
        name = path.stem[len("eval_"):] if path.stem.startswith("eval_") else path.stem
        results[name] = _read_eval(path)
    out = Path(_require(vars(args), "out"))
    _print_summary(report(results, out))
    return 0


def cmd_predict(args):
    from .checkpoint import load_checkpoint, restore_cnn
    from .data import ATTRIBUTES, SHAPES, load_feature_file, load_images, load_manifest
    from .models import predict
    from .training import predict_two_cycle

    ckpt = load_checkpoint(args.checkpoint)
    manifest = load_manifest(_require(vars(args), "manifest"))
    crop = ckpt.spec.input_shape[-1]
    images = load_images(manifest, crop=crop)
    inj = None
    if ckpt.spec.injected_dim > 0:
        inj = load_feature_file(
            _require(vars(args), "features"), expected_rows=len(manifest), expected_dim=ckpt.spec.injected_dim
        )
    if ckpt.kind == "two_cycle":
        pred = predict_two_cycle(ckpt, images, inj)
    elif ckpt.kind == "cnn":
        pred = predict(restore_cnn(ckpt), images, inj)
    else:
        raise DataError(f"cannot predict with a {ckpt.kind!r} checkpoint")
    out = Path(_require(vars(args), "out"))
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path"] + [f"attr.{a}" for a in ATTRIBUTES] + [f"shape.{s}" for s in SHAPES])
        for i, p in enumerate(manifest.paths):
            w.writerow([p] + [f"{v:.6g}" for v in pred.attributes[i]] + [f"{v:.6g}" for v in pred.shapes[i]])
    print(f"wrote predictions for {len(manifest)} images to {out}")
    return 0


def cmd_gradcheck(args):
    from .gradcheck import TOLERANCE, check_cae, check_variant, run_all

    if args.all:
        results = run_all(seed=args.seed or 0)
    else:
        results = [(f"model.{args.model}", check_variant(args.model, args.seed or 0))]
        if args.model == "default":
            results.append(("model.cae", check_cae(args.seed or 0)))
    worst = 0.0
    for name, err in results:
        status = "ok" if err < TOLERANCE else "FAIL"
        print(f"{name:20s} {err:.3e}  {status}")
        worst = max(worst, err)
    print(f"max relative error {worst:.3e} (tolerance {TOLERANCE:g})")
    return 0 if worst < TOLERANCE else 3


# ---------------------------------------------------------------------------
# Parser and main
# ---------------------------------------------------------------------------


def _common(p, *, variant=True, rounds=True):
    p.add_argument("--config", help="JSON file with experiment settings and paths")
    p.add_argument("--seed", type=int, help="experiment seed (u64)")
    if rounds:
        p.add_argument("--rounds", type=int, help="number of random train/test splits")
    if variant:
        p.add_argument("--variant", choices=VARIANT_CHOICES)
    p.add_argument("--out", help="output directory")
    p.add_argument("--manifest", help="manifest CSV")
    p.add_argument("--features", help="NFV1 injected-feature file")


def build_parser():
    parser = _Parser(prog="nucleonet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synth", help="write a synthetic labeled image set")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=2078)
    p.add_argument("--side", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("extract-features", help="stand-in injected features for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--out", required=True, help="output NFV1 file")
    p.set_defaults(func=cmd_extract_features)

    p = sub.add_parser("pretrain-cae", help="train the autoencoder on one round's training split")
    _common(p, rounds=False)
    p.add_argument("--round", type=int, default=0)
    p.set_defaults(func=cmd_pretrain_cae)

    p = sub.add_parser("train", help="split, pretrain, two-cycle train and evaluate every round")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="per-image probabilities from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--features")
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="evaluate a training run on its held-out splits")
    _common(p)
    p.add_argument("--run", required=True, help="output directory of a train run")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="aggregate eval_<variant>.json files into report tables")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--all", action="store_true", help="every layer, loss and variant")
    g.add_argument("--model", choices=("default", "w", "wf", "wfm"))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _thread_limit():
    raw = os.environ.get("NUCLEONET_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"NUCLEONET_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError("NUCLEONET_THREADS must be >= 0")
    from threadpoolctl import threadpool_limits

    # 0 selects the deterministic single-threaded mode
    return threadpool_limits(limits=max(1, n))


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s"
        )
        with _thread_limit() if args.command != "gen-synth" else contextlib.nullcontext():
            return args.func(args)
    except NucleonetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
