"""Command-line front door.

Every subcommand accepts ``--config``, ``--seed`` and ``--out``. The output
root defaults to ``$CKDLAB_OUT`` when set, then to the config's
``[experiment] out``, then to ``./ckdlab-runs``. Failures print one JSON
object on stderr, ``{"error": <category>, "message": ...}``, and exit with
the category's code from ``EXIT_CODES``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import theory
from .checkpoint import CheckpointError
from .config import ConfigError, ExperimentConfig, load_config, write_config
from .data import DatasetFormatError, generate_dataset, load_dataset, save_dataset
from .evaluate import evaluate_model
from .experiment import (MissingArtifactsError, RunSpec, ablation_grid, dataset_path,
                         experiment_report)
from .trainer import VARIANTS, TrainingDivergedError, load_state, run_training

ENV_OUT = "CKDLAB_OUT"
DEFAULT_OUT = "ckdlab-runs"

EXIT_CODES = {
    "internal": 1,
    "usage": 2,
    "config": 3,
    "data_format": 4,
    "missing_artifacts": 5,
    "training_diverged": 6,
    "verification_failed": 7,
    "io": 8,
}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        self.category = category
        super().__init__(message)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", f"{self.prog}: {message}")


def _seeds(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file (defaults apply when omitted)")
    p.add_argument("--seed", type=_seeds, help="seed or comma-separated seeds; overrides the config")
    p.add_argument("--out", help=f"output root (default: ${ENV_OUT}, config, or ./{DEFAULT_OUT})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ckdlab", description="Consistent knowledge distillation desk lab.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate and save the synthetic dataset per seed")
    _common(p)

    p = sub.add_parser("train", help="train one variant")
    _common(p)
    p.add_argument("--variant", choices=sorted(VARIANTS), help="overrides [train] variant")
    p.add_argument("--data", help="dataset file; generated from the config when omitted")

    p = sub.add_parser("ablate", help="train and evaluate the ablation grid")
    _common(p)
    p.add_argument("--workers", type=int, help="parallel processes (overrides the config)")
    p.add_argument("--variants", help="comma-separated variant list (overrides the config)")
    p.add_argument("--taus", help="comma-separated temperatures to sweep (default: [train] tau)")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset file; generated from the checkpoint seed when omitted")

    p = sub.add_parser("verify-theory", help="run the numerical theory checks")
    _common(p)
    p.add_argument("--trials", type=int, default=1000)

    p = sub.add_parser("report", help="collate a finished grid into per-figure CSVs")
    _common(p)
    return parser


def _out_root(args, cfg: ExperimentConfig) -> Path:
    root = args.out or os.environ.get(ENV_OUT) or cfg.out or DEFAULT_OUT
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed:
        cfg = cfg.with_seeds(args.seed)
    return cfg


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def cmd_gen_data(args) -> None:
    cfg = _config(args)
    root = _out_root(args, cfg)
    (root / "data").mkdir(exist_ok=True)
    for seed in cfg.seeds:
        path = save_dataset(generate_dataset(cfg.generator(seed)), dataset_path(root, seed))
        _emit({"dataset": str(path), "seed": seed})
    write_config(cfg, root / "config.ini")


def _dataset_for(cfg: ExperimentConfig, seed: int, data_arg, root: Path):
    if data_arg:
        return load_dataset(data_arg)
    path = dataset_path(root, seed)
    if path.is_file():
        return load_dataset(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ds = generate_dataset(cfg.generator(seed))
    save_dataset(ds, path)
    return ds


def cmd_train(args) -> None:
    cfg = _config(args)
    if args.variant:
        cfg = replace(cfg, train=replace(cfg.train, variant=args.variant))
    variant = cfg.train.variant
    cfg.validate([variant])
    root = _out_root(args, cfg)
    write_config(cfg, root / "config.ini")
    for seed in cfg.seeds:
        ds = _dataset_for(cfg, seed, args.data, root)
        spec = RunSpec(variant, seed, cfg.train.tau)
        run_dir = root / "runs" / spec.name
        result = run_training(cfg.model_for(variant, seed), cfg.train_for(variant, seed), ds, out_dir=run_dir)
        last = result.log[-1] if result.log else {}
        _emit({"run": str(run_dir), "variant": variant, "seed": seed,
               "train_loss": last.get("train_loss"), "val_class_loss": last.get("val_class_loss")})


def cmd_eval(args) -> None:
    cfg = _config(args)
    state, train_cfg, _ = load_state(args.checkpoint)
    seed = args.seed[0] if args.seed else train_cfg.seed
    root = _out_root(args, cfg)
    if args.data:
        ds = load_dataset(args.data)
    else:
        ds = generate_dataset(replace(cfg.data, seed=seed))
    report = evaluate_model(state, ds, train_cfg.variant, seed, train_cfg.tau)
    path = root / "metrics.json"
    path.write_text(report.to_json() + "\n")
    _emit({"metrics": str(path), "variant": train_cfg.variant, "rank1": report.rank1, "eer": report.eer})


def cmd_ablate(args) -> None:
    cfg = _config(args)
    if args.variants:
        cfg = replace(cfg, variants=tuple(v.strip() for v in args.variants.split(",") if v.strip()))
    taus = None
    if args.taus:
        try:
            taus = [float(t) for t in args.taus.split(",") if t.strip()]
        except ValueError:
            raise CliError("usage", f"--taus must be comma-separated numbers, got {args.taus!r}") from None
    root = _out_root(args, cfg)
    grid = ablation_grid(cfg, root, workers=args.workers, taus=taus)
    for row in grid.table:
        _emit(row)


def cmd_verify_theory(args) -> None:
    cfg = _config(args)
    root = _out_root(args, cfg)
    report = theory.run_all(seed=cfg.seeds[0], trials=args.trials)
    report.save(root / "theory.json")
    theory.regularizer_grid().write_csv(root / "regularizer_grid.csv")
    for e in report.entries:
        _emit({"claim": e.claim, "passed": e.passed,
               "checks": {c.name: c.residual for c in e.checks}})
    if not report.passed:
        failed = [e.claim for e in report.entries if not e.passed]
        raise CliError("verification_failed", f"theory checks failed: {failed}")


def cmd_report(args) -> None:
    cfg = _config(args)
    root = _out_root(args, cfg)
    for name, path in experiment_report(root).items():
        _emit({name: str(path)})


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
    "verify-theory": cmd_verify_theory,
    "report": cmd_report,
}


def _category(exc: BaseException) -> str:
    if isinstance(exc, CliError):
        return exc.category
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, MissingArtifactsError):
        return "missing_artifacts"
    if isinstance(exc, (DatasetFormatError, CheckpointError)):
        return "data_format"
    if isinstance(exc, TrainingDivergedError):
        return "training_diverged"
    if isinstance(exc, OSError):
        return "io"
    if isinstance(exc, ValueError):
        return "config"
    return "internal"


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        COMMANDS[args.command](args)
    except Exception as exc:  # every failure leaves as one parsable line
        cat = _category(exc)
        print(json.dumps({"error": cat, "message": str(exc)}), file=sys.stderr)
        return EXIT_CODES[cat]
    return 0


if __name__ == "__main__":
    sys.exit(main())
