"""Ablation grids over variants, temperatures and seeds, and the report builder.

A grid directory looks like::

    config.ini                  resolved config, defaults expanded
    manifest.json               ordered list of runs
    data/seed_<s>.ckds          one dataset per seed
    runs/<run>/epoch_log.csv    per-epoch losses (see trainer.LOG_COLUMNS)
    runs/<run>/checkpoint.ckdc
    runs/<run>/metrics.json     MetricReport
    reports.csv                 one flat row per run
    table1.csv                  seed-averaged rank-1, EER and Gain per variant

``experiment_report`` reads that layout (plus an optional ``theory.json``)
and writes ``report/`` with one CSV per figure channel and ``summary.json``.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import metrics as M
from .config import ExperimentConfig, write_config
from .data import Dataset, generate_dataset, load_dataset, save_dataset
from .evaluate import evaluate_model
from .trainer import LOG_COLUMNS, run_training

RUN_FILES = ("epoch_log.csv", "checkpoint.ckdc", "metrics.json")
TABLE_COLUMNS = ("variant", "tau", "seeds", "rank1", "eer", "gain_id", "gain_ver")


class MissingArtifactsError(FileNotFoundError):
    def __init__(self, missing):
        self.missing = sorted(str(m) for m in missing)
        super().__init__("missing run artifacts: " + ", ".join(self.missing))


@dataclass(frozen=True)
class RunSpec:
    variant: str
    seed: int
    tau: float

    @property
    def name(self) -> str:
        return f"{self.variant}-tau{self.tau:g}-seed{self.seed}"


def grid_specs(cfg: ExperimentConfig, taus=None) -> list[RunSpec]:
    taus = tuple(taus) if taus else (cfg.train.tau,)
    return [RunSpec(v, s, float(t)) for s in cfg.seeds for t in taus for v in cfg.variants]


def dataset_path(root, seed: int) -> Path:
    return Path(root) / "data" / f"seed_{seed}.ckds"


def run_one(cfg: ExperimentConfig, spec: RunSpec, root, dataset: Dataset | None = None) -> M.MetricReport:
    """Train and evaluate one grid row inside ``root/runs/<name>``."""
    root = Path(root)
    if dataset is None:
        dataset = load_dataset(dataset_path(root, spec.seed))
    model_cfg = cfg.model_for(spec.variant, spec.seed)
    train_cfg = replace(cfg.train_for(spec.variant, spec.seed), tau=spec.tau)
    run_dir = root / "runs" / spec.name
    result = run_training(model_cfg, train_cfg, dataset, out_dir=run_dir)
    report = evaluate_model(result.state, dataset, spec.variant, spec.seed, spec.tau)
    report.extra["tau"] = spec.tau
    report.extra["run"] = spec.name
    (run_dir / "metrics.json").write_text(report.to_json() + "\n")
    return report


def _run_star(args) -> M.MetricReport:
    return run_one(*args)


def attach_gains(reports: list[M.MetricReport]) -> None:
    """Per-seed Gain against that seed's CE and CE_FACE rows, when both exist."""
    groups: dict[tuple, dict[str, M.MetricReport]] = {}
    for r in reports:
        groups.setdefault((r.seed, r.extra.get("tau")), {})[r.variant] = r
    for rows in groups.values():
        lo, hi = rows.get("CE"), rows.get("CE_FACE")
        if lo is None or hi is None:
            continue
        for r in rows.values():
            r.gain_id = _gain(r.rank1, lo.rank1, hi.rank1)
            r.gain_ver = _gain(r.eer, lo.eer, hi.eer)


def _gain(c, p, f):
    try:
        return M.relative_gain(c, p, f)
    except ValueError:
        return None


def summary_table(reports: list[M.MetricReport]) -> list[dict]:
    """Seed-averaged rank-1 and EER per (variant, tau); Gain from those averages."""
    keys: list[tuple] = []
    by_key: dict[tuple, list[M.MetricReport]] = {}
    for r in reports:
        k = (r.variant, r.extra.get("tau"))
        if k not in by_key:
            keys.append(k)
        by_key.setdefault(k, []).append(r)
    avg = {k: (float(np.mean([r.rank1 for r in v])), float(np.mean([r.eer for r in v])))
           for k, v in by_key.items()}
    rows = []
    for variant, tau in keys:
        rank1, eer = avg[(variant, tau)]
        lo, hi = avg.get(("CE", tau)), avg.get(("CE_FACE", tau))
        rows.append({
            "variant": variant, "tau": tau, "seeds": len(by_key[(variant, tau)]),
            "rank1": rank1, "eer": eer,
            "gain_id": _gain(rank1, lo[0], hi[0]) if lo and hi else None,
            "gain_ver": _gain(eer, lo[1], hi[1]) if lo and hi else None,
        })
    return rows


def _fmt(v):
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def write_rows(path, columns, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])
    return path


@dataclass
class GridResult:
    root: Path
    reports: list[M.MetricReport]
    table: list[dict]


def ablation_grid(cfg: ExperimentConfig, root, workers: int | None = None, taus=None) -> GridResult:
    """Train every (seed, tau, variant) row and write the grid directory.

    Every row is validated before anything trains. Rows are independent and
    may run in ``workers`` processes; results are gathered in grid order, so
    the summary does not depend on scheduling.
    """
    cfg.validate()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    specs = grid_specs(cfg, taus)
    write_config(cfg, root / "config.ini")
    (root / "manifest.json").write_text(json.dumps(
        {"runs": [s.name for s in specs], "taus": sorted({s.tau for s in specs})}, indent=2) + "\n")
    (root / "data").mkdir(exist_ok=True)
    for seed in cfg.seeds:
        save_dataset(generate_dataset(cfg.generator(seed)), dataset_path(root, seed))

    workers = workers or cfg.workers
    jobs = [(cfg, s, root) for s in specs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_run_star, jobs))
    else:
        reports = [_run_star(j) for j in jobs]

    attach_gains(reports)
    for r in reports:
        (root / "runs" / r.extra["run"] / "metrics.json").write_text(r.to_json() + "\n")
    M.write_reports_csv(reports, root / "reports.csv")
    table = summary_table(reports)
    write_rows(root / "table1.csv", TABLE_COLUMNS, table)
    return GridResult(root, reports, table)


# ------------------------------------------------------------------ report

def _require(paths) -> None:
    missing = [p for p in paths if not Path(p).is_file()]
    if missing:
        raise MissingArtifactsError(missing)


def load_grid(root) -> tuple[list[str], list[M.MetricReport]]:
    root = Path(root)
    _require([root / "config.ini", root / "manifest.json", root / "table1.csv"])
    names = json.loads((root / "manifest.json").read_text())["runs"]
    _require([root / "runs" / n / f for n in names for f in RUN_FILES])
    reports = [M.MetricReport.from_dict(json.loads((root / "runs" / n / "metrics.json").read_text()))
               for n in names]
    return names, reports


def _read_log(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


FIG6_COLUMNS = ("variant", "tau", "seed", "entropy", "non_target_entropy", "rank1")
FIG7_COLUMNS = ("variant", "tau", "seed", "hellinger", "mutual_information", "ece", "mce")
FIG8_COLUMNS = ("variant", "tau", "seed", "channel", "bin_lo", "bin_hi", "count")
FIG9_CURVE_COLUMNS = ("variant", "tau", "seed") + LOG_COLUMNS
FIG9_DBI_COLUMNS = ("variant", "tau", "seed", "dbi", "gram_difference")


def experiment_report(root) -> dict[str, Path]:
    """Write per-figure CSVs and ``summary.json`` under ``root/report``.

    Output depends only on the grid's files, so re-running it rewrites
    identical bytes.
    """
    root = Path(root)
    names, reports = load_grid(root)
    out = root / "report"
    out.mkdir(exist_ok=True)

    def base(r):
        return {"variant": r.variant, "tau": r.extra.get("tau"), "seed": r.seed}

    fig6 = [{**base(r), "entropy": r.entropy, "non_target_entropy": r.non_target_entropy,
             "rank1": r.rank1} for r in reports if r.entropy is not None]
    fig7 = [{**base(r), "hellinger": r.hellinger, "mutual_information": r.mutual_information,
             "ece": r.ece, "mce": r.mce} for r in reports]
    fig8 = []
    for r in reports:
        hist = r.extra.get("gram_hist")
        if not hist:
            continue
        for channel in ("face", "peri", "difference"):
            edges = hist["difference_edges" if channel == "difference" else "similarity_edges"]
            for lo, hi, n in zip(edges[:-1], edges[1:], hist[channel]):
                fig8.append({**base(r), "channel": channel, "bin_lo": lo, "bin_hi": hi, "count": n})
    fig9 = []
    for name, r in zip(names, reports):
        for row in _read_log(root / "runs" / name / "epoch_log.csv"):
            fig9.append({**base(r), **row})
    fig9_dbi = [{**base(r), "dbi": r.dbi, "gram_difference": r.gram_difference} for r in reports]

    paths = {
        "fig6_entropy": write_rows(out / "fig6_entropy.csv", FIG6_COLUMNS, fig6),
        "fig7_bars": write_rows(out / "fig7_bars.csv", FIG7_COLUMNS, fig7),
        "fig8_gram": write_rows(out / "fig8_gram.csv", FIG8_COLUMNS, fig8),
        "fig9_curves": write_rows(out / "fig9_curves.csv", FIG9_CURVE_COLUMNS, fig9),
        "fig9_dbi": write_rows(out / "fig9_dbi.csv", FIG9_DBI_COLUMNS, fig9_dbi),
    }
    with (root / "table1.csv").open(newline="") as fh:
        table = list(csv.DictReader(fh))
    summary = {
        "config": (root / "config.ini").read_text(),
        "table1": table,
        "reports": [r.to_dict() for r in reports],
        "theory": json.loads((root / "theory.json").read_text()) if (root / "theory.json").is_file() else None,
        "files": {k: p.name for k, p in sorted(paths.items())},
    }
    paths["summary"] = out / "summary.json"
    paths["summary"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return paths

