"""Command line entry point: ``fdia-imaging <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data or validation error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .attack_engine import AttackError, AttackSpec, apply_attack, craft_fdia
from .config import ConfigError, PipelineConfig, load_config, parse_config
from .dataset import DatasetError, save_dataset
from .encoders import write_pgm
from .evaluation import ConfusionMatrix, confusion_image
from .grid_case import CaseSyntaxError, CaseValidationError, build_dc_model, bundled_case57, load_case
from .nn import CheckpointError, TrainingError
from .state_estimation import PowerFlowError, UnobservableError, WlsEstimator, bdd_residual, dc_power_flow

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

DATA_ERRORS = (ConfigError, DatasetError, CaseSyntaxError, CaseValidationError, AttackError,
               CheckpointError, TrainingError, PowerFlowError, UnobservableError, ValueError, OSError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _config_args(p: argparse.ArgumentParser, out_help="output directory (overrides output.directory)"):
    p.add_argument("--config", default="desk", help="config file, or a shipped preset name: desk, paper")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config key; repeatable")
    p.add_argument("--out", help=out_help)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fdia-imaging", description="Imaging-based FDIA detection and localization.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)

    p = sub.add_parser("parse-case", help="parse a MATPOWER case file and print its size")
    p.add_argument("case", nargs="?", help="case .m file (default: bundled 57-bus case)")

    p = sub.add_parser("gen-data", help="generate the labeled dataset")
    _config_args(p)

    p = sub.add_parser("encode", help="encode a dataset into images (.npy) plus one PGM per class")
    _config_args(p)
    p.add_argument("--dataset", help="dataset file (default: <out>/dataset.fdia)")

    p = sub.add_parser("train", help="split, encode and train the configured network")
    _config_args(p)
    p.add_argument("--dataset", help="dataset file (default: <out>/dataset.fdia)")

    p = sub.add_parser("eval", help="score a trained model and the baselines on the test split")
    _config_args(p)
    p.add_argument("--dataset", help="dataset file (default: <out>/dataset.fdia)")
    p.add_argument("--model-dir", help="directory holding model.fdnn (default: <out>)")

    p = sub.add_parser("attack-demo", help="show the residual is unchanged by a crafted attack")
    p.add_argument("--target", type=int, default=25, help="bus to attack")
    p.add_argument("--scale", type=float, default=1.1, help="angle scale factor")
    p.add_argument("--sigma", type=float, default=0.02, help="meter noise standard deviation (pu)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--case", help="case .m file (default: bundled 57-bus case)")

    p = sub.add_parser("render", help="write a PGM of a confusion CSV or of one encoded sample")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--confusion", help="confusion matrix CSV written by eval")
    src.add_argument("--dataset", help="dataset file; encodes the sample given by --index")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--config", default="desk", help="encoder settings for --dataset")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--cell", type=int, default=16, help="pixels per confusion cell")
    p.add_argument("--out", required=True, help="output .pgm path")

    p = sub.add_parser("pipeline", help="run every stage and write a manifest")
    _config_args(p)
    return parser


def _cfg(args) -> tuple[PipelineConfig, Path]:
    cfg = load_config(args.config, args.overrides)
    out = Path(args.out) if getattr(args, "out", None) else cfg.resolve(cfg.output_dir)
    return cfg, out


def _dataset(args, out: Path):
    return pl.read_dataset(Path(args.dataset) if args.dataset else out / pl.DATASET_FILE)


def _load_case(path):
    return load_case(path) if path else bundled_case57()


def cmd_parse_case(args) -> int:
    print(_load_case(args.case).summary())
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg, out = _cfg(args)
    out.mkdir(parents=True, exist_ok=True)
    ds = pl.make_dataset(cfg)
    path = save_dataset(ds, out / pl.DATASET_FILE)
    print(f"{len(ds)} samples, {ds.n_features} features, {ds.n_classes} classes -> {path}")
    return EXIT_OK


def cmd_encode(args) -> int:
    cfg, out = _cfg(args)
    ds = _dataset(args, out)
    out.mkdir(parents=True, exist_ok=True)
    n, s = len(ds), cfg.encoder.image_size or ds.n_features
    path = out / "images.npy"
    images = np.lib.format.open_memmap(path, mode="w+", dtype=np.float32, shape=(n, 1, s, s))
    for start in range(0, n, 512):
        images[start:start + 512] = pl.encode(cfg, ds.features[start:start + 512])
    images.flush()
    del images
    pgms = pl.export_samples(cfg, ds, out)
    print(f"{n} images of {s}x{s} -> {path}; {len(pgms)} sample PGMs in {out / 'images'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, out = _cfg(args)
    train_ds, _ = pl.split(cfg, _dataset(args, out))
    res = pl.run_training(cfg, train_ds, out)
    last = res.history[-1] if res.history else {}
    print(f"trained {res.model.epochs_done} epochs, final train accuracy {last.get('train_acc', float('nan')):.4f}"
          f" -> {out / pl.MODEL_FILE}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, out = _cfg(args)
    train_ds, test_ds = pl.split(cfg, _dataset(args, out))
    model, scaler = pl.load_trained(Path(args.model_dir) if args.model_dir else out)
    reports = pl.run_evaluation(cfg, train_ds, test_ds, model, scaler, out)
    for name, rep in reports.items():
        p, r, f = rep.macro
        print(f"{name:>8}  precision {p:.4f}  recall {r:.4f}  f1 {f:.4f}")
    return EXIT_OK


def cmd_attack_demo(args) -> int:
    case = _load_case(args.case)
    model = build_dc_model(case, args.sigma)
    est = WlsEstimator(model)
    _, flows = dc_power_flow(case, case.nominal_loads_pu())
    z = flows + np.random.default_rng(args.seed).normal(0.0, args.sigma, size=model.m)
    x_hat = est.estimate(z)
    atk = craft_fdia(model, x_hat, AttackSpec(frozenset([args.target]), args.scale))
    z_a = apply_attack(z, atk)
    x_a = est.estimate(z_a)
    r, r_a = float(bdd_residual(model, z, x_hat)), float(bdd_residual(model, z_a, x_a))
    delta = abs(r_a - r)
    j = model.state_position(args.target)
    print(f"target bus {args.target}, scale {args.scale}")
    print(f"estimated angle   {x_hat[j]:+.6f} -> {x_a[j]:+.6f} rad")
    print(f"injected |a|      {np.linalg.norm(atk.a):.6e}")
    print(f"residual before   {r:.12e}")
    print(f"residual after    {r_a:.12e}")
    print(f"residual delta    {delta:.3e}  ({'stealthy' if delta <= 1e-8 else 'NOT stealthy'})")
    return EXIT_OK if delta <= 1e-8 else EXIT_DATA


def _read_confusion_csv(path) -> ConfusionMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 3:
        raise ValueError(f"{path}: not a confusion matrix CSV")
    try:
        counts = np.array([[int(v) for v in row[1:]] for row in rows[1:]])
    except ValueError:
        raise ValueError(f"{path}: non-integer count") from None
    if counts.shape[0] != counts.shape[1]:
        raise ValueError(f"{path}: matrix is not square")
    return ConfusionMatrix(counts)


def cmd_render(args) -> int:
    if args.confusion:
        path = write_pgm(args.out, confusion_image(_read_confusion_csv(args.confusion), args.cell), 0.0, 1.0)
    else:
        cfg = load_config(args.config, args.overrides)
        ds = pl.read_dataset(args.dataset)
        if not 0 <= args.index < len(ds):
            raise ValueError(f"index {args.index} outside 0..{len(ds) - 1}")
        img = pl.encode(cfg, ds.features[args.index:args.index + 1])[0, 0]
        lo = -1.0 if cfg.encoder.kind == "gaf" else 0.0
        path = write_pgm(args.out, img, lo, 1.0)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg, out = _cfg(args)
    manifest = pl.run_pipeline(cfg, out)
    for name, m in manifest["macro"].items():
        print(f"{name:>8}  f1 {m['f1']:.4f}")
    print(f"artifacts in {out}")
    return EXIT_OK


COMMANDS = {
    "parse-case": cmd_parse_case,
    "gen-data": cmd_gen_data,
    "encode": cmd_encode,
    "train": cmd_train,
    "eval": cmd_eval,
    "attack-demo": cmd_attack_demo,
    "render": cmd_render,
    "pipeline": cmd_pipeline,
}


def run_subcommand(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run_subcommand())


__all__ = ["run_subcommand", "main", "build_parser", "parse_config"]
