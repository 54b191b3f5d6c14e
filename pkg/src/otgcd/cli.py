"""Command-line entry points: ``gen``, ``train``, ``eval``, ``sinkhorn``, ``sweep``, ``figure``.

Exit status is 0 on success and 1 on a usage or data error.  ``sweep`` exits
with 0 only if every run succeeded, 1 if some failed and 2 if all failed.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as datamod
from .benchmarks import ABLATIONS, ablation_overrides
from .errors import ConfigInvalid, CorruptFile, LengthMismatch, MissingRun, OTGCDError
from .metrics import class_count_report, evaluate
from .sinkhorn import TransportProblem, sinkhorn_plan
from .trainer import TrainConfig, train

SUMMARY_METRICS = ("acc_all", "acc_known", "acc_unknown_aware", "acc_unknown_agnostic",
                   "prior_l1_error")
SWEEP_AXES = ("rho", "ablation")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise MissingRun(f"{path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise CorruptFile(f"{path}: invalid JSON ({exc})") from exc


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- evaluation

def evaluate_predictions(dataset: datamod.Dataset, predictions, prior=None) -> dict:
    """Score predictions for the unlabeled pool (in pool order)."""
    pred = np.asarray(predictions, dtype=np.int64)
    truth = dataset.labels[dataset.unlabeled_index]
    if pred.ndim != 1 or pred.shape[0] != truth.shape[0]:
        raise LengthMismatch(f"expected {truth.shape[0]} predictions, got {pred.shape}")
    if pred.size and (pred.min() < 0 or pred.max() >= dataset.num_classes):
        raise ConfigInvalid(f"predictions must lie in [0, {dataset.num_classes})")
    report = evaluate(pred, truth, dataset.known_classes, dataset.num_classes,
                      prior=prior, true_prior=dataset.unlabeled_prior)
    return report.to_dict()


def emit_figure_data(run_dir, out=None) -> Path:
    """Per-class truth vs predicted counts of a finished run, as CSV.

    Reads ``report.json`` and ``predictions.json`` from ``run_dir`` and writes
    ``class_counts.csv`` there unless ``out`` is given.
    """
    run_dir = Path(run_dir)
    report_path, pred_path = run_dir / "report.json", run_dir / "predictions.json"
    if not report_path.is_file() or not pred_path.is_file():
        raise MissingRun(f"{run_dir}: not a completed run (report.json/predictions.json missing)")
    report = _read_json(report_path)
    truth = np.asarray(report["truth_class_counts"], dtype=np.int64)
    predicted = class_count_report(np.asarray(_read_json(pred_path), dtype=np.int64),
                                   truth.size)
    out = Path(out) if out is not None else run_dir / "class_counts.csv"
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["class", "truth_count", "predicted_count", "abs_deviation"])
        for k, (t, p) in enumerate(zip(truth, predicted)):
            writer.writerow([k, int(t), int(p), int(abs(t - p))])
    return out


# --------------------------------------------------------------------- sweep

@dataclass
class ExperimentConfig:
    """A grid of training runs over one axis and several seeds.

    ``dataset`` holds either ``{"spec": {...}}`` (regenerated per seed, with
    the seed overridden) or ``{"path": dir}`` (used as is).  The ``rho`` axis
    needs a spec.  ``axis_values`` are floats for ``rho`` and ablation names
    for ``ablation``.
    """

    dataset: dict
    train: dict = field(default_factory=dict)
    axis: str = "ablation"
    axis_values: list = field(default_factory=lambda: ["full"])
    seeds: list = field(default_factory=lambda: [0])
    out: str = "sweep"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigInvalid("seeds must be non-empty")
        if not self.axis_values:
            raise ConfigInvalid("axis_values must be non-empty")
        if self.axis not in SWEEP_AXES:
            raise ConfigInvalid(f"axis must be one of {SWEEP_AXES}, got {self.axis!r}")
        if ("spec" in self.dataset) == ("path" in self.dataset):
            raise ConfigInvalid("dataset needs exactly one of 'spec' or 'path'")
        if "path" in self.dataset:
            if self.axis == "rho":
                raise ConfigInvalid("a rho sweep needs a dataset spec, not a path")
            if not Path(self.dataset["path"]).is_dir():
                raise ConfigInvalid(f"dataset path {self.dataset['path']} does not exist")
        if self.axis == "ablation":
            bad = [v for v in self.axis_values if v not in ABLATIONS]
            if bad:
                raise ConfigInvalid(f"unknown ablations {bad}; choose from {ABLATIONS}")
        TrainConfig.from_dict(dict(self.train))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigInvalid(str(exc)) from exc


def _run_dir_name(axis: str, value, seed: int) -> str:
    label = str(value).replace("/", "").replace(" ", "_")
    return f"{axis}={label}/seed={seed}"


def _one_run(config: ExperimentConfig, value, seed: int, run_dir: Path) -> dict:
    if "spec" in config.dataset:
        spec = dict(config.dataset["spec"], seed=seed)
        if config.axis == "rho":
            spec["rho"] = float(value)
        ds = datamod.generate(datamod.SyntheticSpec(**spec))
        datamod.save(ds, run_dir / "dataset")
    else:
        ds = datamod.load(config.dataset["path"])
    params = dict(config.train, seed=seed)
    if config.axis == "ablation":
        params.update(ablation_overrides(value))
    cfg = TrainConfig.from_dict(params)
    result = train(ds, cfg, out_dir=run_dir / "run")
    report = evaluate_predictions(ds, result.predictions, prior=result.state.prior.r)
    _write_json(run_dir / "eval.json", report)
    return report


def run_sweep(config: ExperimentConfig, log=None) -> dict:
    """Run every (axis value, seed) pair; failures are recorded and skipped.

    Writes per-run artifacts, ``runs.csv`` (one line per run) and
    ``summary.csv`` (mean and population standard deviation of each metric
    per axis value, in the order given).  Returns a dict with ``rows``,
    ``runs`` and ``failed`` counts.
    """
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    runs, rows = [], []
    for value in config.axis_values:
        reports = []
        for seed in config.seeds:
            run_dir = out / _run_dir_name(config.axis, value, seed)
            entry = {"axis": config.axis, "value": value, "seed": seed, "dir": str(run_dir)}
            try:
                report = _one_run(config, value, seed, run_dir)
            except Exception as exc:  # a failed run must not stop the grid
                entry.update(status="failed", error=f"{type(exc).__name__}: {exc}")
                if log is not None:
                    log.write(f"run {run_dir} failed: {entry['error']}\n")
                    traceback.print_exc(file=log)
            else:
                entry.update(status="ok", error="")
                entry.update({m: report[m] for m in SUMMARY_METRICS})
                reports.append(report)
            runs.append(entry)
        row = {"axis": config.axis, "value": value, "runs_ok": len(reports),
               "runs_failed": len(config.seeds) - len(reports)}
        for m in SUMMARY_METRICS:
            vals = np.array([r[m] for r in reports], dtype=np.float64)
            row[f"{m}_mean"] = repr(float(vals.mean())) if vals.size else ""
            row[f"{m}_std"] = repr(float(vals.std())) if vals.size else ""
        rows.append(row)

    summary_fields = ["axis", "value", "runs_ok", "runs_failed"] + [
        f"{m}_{s}" for m in SUMMARY_METRICS for s in ("mean", "std")]
    _write_csv(out / "summary.csv", summary_fields, rows)
    _write_csv(out / "runs.csv", ["axis", "value", "seed", "status", "error", "dir",
                                  *SUMMARY_METRICS], runs)
    failed = sum(r["status"] == "failed" for r in runs)
    return {"rows": rows, "runs": len(runs), "failed": failed}


def _write_csv(path: Path, fields, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fields, restval="", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


# ------------------------------------------------------------------ commands

def cmd_gen(args) -> int:
    spec = datamod.SyntheticSpec(
        num_known=args.known, num_unknown=args.unknown, input_dim=args.dim,
        cluster_spread=args.spread, mean_scale=args.mean_scale, rho=args.rho,
        profile=args.profile, per_known_count=args.per_class,
        labeled_fraction=args.labeled_fraction, seed=args.seed)
    ds = datamod.generate(spec)
    datamod.save(ds, args.out)
    print(f"wrote {ds.features.shape[0]} rows to {args.out}")
    return 0


def cmd_train(args) -> int:
    ds = datamod.load(args.dataset)
    cfg = TrainConfig.from_dict(_read_json(args.config)) if args.config else TrainConfig()
    result = train(ds, cfg, out_dir=args.out)
    final = result.final_report
    if final is not None:
        print(f"acc_all={final.acc_all:.4f} acc_unknown_agnostic="
              f"{final.acc_unknown_agnostic:.4f} prior_l1_error={final.prior_l1_error:.4f}")
    return 0


def cmd_eval(args) -> int:
    ds = datamod.load(args.dataset)
    prior = _read_json(args.prior) if args.prior else None
    report = evaluate_predictions(ds, _read_json(args.predictions), prior=prior)
    _write_json(args.out, report)
    return 0


def cmd_sinkhorn(args) -> int:
    raw = _read_json(args.problem)
    try:
        problem = TransportProblem(
            predictions=np.asarray(raw["predictions"], dtype=np.float64),
            row_marginal=np.asarray(raw["row_marginal"], dtype=np.float64),
            col_marginal=np.asarray(raw["col_marginal"], dtype=np.float64),
            smoothing=float(raw.get("smoothing", 1.0)),
            max_iters=int(raw.get("max_iters", 100)),
            tolerance=float(raw.get("tolerance", 1e-6)))
    except KeyError as exc:
        raise ConfigInvalid(f"problem file lacks field {exc}") from exc
    _write_json(args.out, sinkhorn_plan(problem).to_dict())
    return 0


def cmd_sweep(args) -> int:
    config = ExperimentConfig.from_dict(_read_json(args.config))
    if args.out:
        config.out = args.out
    outcome = run_sweep(config, log=sys.stderr)
    print(f"{outcome['runs'] - outcome['failed']}/{outcome['runs']} runs succeeded; "
          f"summary in {Path(config.out) / 'summary.csv'}")
    if outcome["failed"] == 0:
        return 0
    return 2 if outcome["failed"] == outcome["runs"] else 1


def cmd_figure(args) -> int:
    print(emit_figure_data(args.run, args.out))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="otgcd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset directory")
    p.add_argument("--known", type=int, default=5, help="number of known classes")
    p.add_argument("--unknown", type=int, default=5, help="number of unknown classes")
    p.add_argument("--dim", type=int, default=16, help="feature dimension")
    p.add_argument("--rho", type=float, default=1.0,
                   help="known-to-unknown sample ratio in the unlabeled pool")
    p.add_argument("--profile", choices=[x.value for x in datamod.Profile], default="step")
    p.add_argument("--per-class", type=int, default=100,
                   help="unlabeled samples per known class")
    p.add_argument("--spread", type=float, default=1.0, help="within-class standard deviation")
    p.add_argument("--mean-scale", type=float, default=3.0, help="scale of the class means")
    p.add_argument("--labeled-fraction", type=float, default=0.5,
                   help="labeled samples per known class, as a fraction of --per-class")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", help="JSON file of training options (defaults if omitted)")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score unlabeled-pool predictions")
    p.add_argument("--dataset", required=True)
    p.add_argument("--predictions", required=True, help="JSON array of ints, pool order")
    p.add_argument("--prior", help="JSON array with an estimated prior "
                                   "(default: predicted class frequencies)")
    p.add_argument("--out", required=True, help="output JSON report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sinkhorn", help="solve one transport problem from JSON")
    p.add_argument("problem", help="JSON problem file")
    p.add_argument("--out", required=True, help="output JSON plan")
    p.set_defaults(func=cmd_sinkhorn)

    p = sub.add_parser("sweep", help="run a grid of experiments")
    p.add_argument("config", help="JSON experiment config")
    p.add_argument("--out", help="override the output directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("figure", help="per-class count CSV of a finished run")
    p.add_argument("run", help="run directory written by train")
    p.add_argument("--out", help="output CSV (default: <run>/class_counts.csv)")
    p.set_defaults(func=cmd_figure)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OTGCDError, ValueError, OSError) as exc:
        print(f"otgcd {args.command}: error: {exc}", file=sys.stderr)
        return 1
