"""Experiment runners: timestep sweeps, robustness curves, error correlation
and objective comparison.

Every runner returns an in-memory result and, given ``out_dir``, writes CSV
tables plus a ``manifest.json`` that records each CSV's schema name, version
and column list so downstream readers can validate what they load.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classifier import EvalPlan, error_table, evaluate
from .dataset import CorruptionSpec, corrupt
from .denoiser import Architecture, Checkpoint, DenoiserNetwork, init_network, load_checkpoint
from .errors import ArgumentError, FormatError
from .objectives import Objective
from .schedule import NoiseSchedule
from .trainer import TrainConfig, train

SCHEMA_VERSION = 1
SWEEP_COLUMNS = ("size", "n_timesteps", "accuracy", "mean_class_accuracy")
ROBUSTNESS_COLUMNS = ("corruption", "kind", "sigma", "kernel_size", "accuracy", "mean_class_accuracy")
CORRELATION_COLUMNS = ("sample_id", "label", "d_p", "d_null", "d_nonclass", "d_neg")
CORRELATION_PAIRS = (("d_p", "d_null"), ("d_p", "d_nonclass"), ("d_p", "d_neg"))
COMPARE_COLUMNS = ("objective", "seed", "size", "accuracy", "mean_class_accuracy")
COMPARE_SUMMARY_COLUMNS = ("objective", "size", "mean_accuracy", "gap")
DEFAULT_CORRELATION_SAMPLES = 300


@dataclass
class ExperimentReport:
    config: dict
    tables: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)
    manifest: list = field(default_factory=list)

    def write(self, out_dir, schemas: dict) -> Path:
        """Write each table as CSV and a manifest; ``schemas`` maps table name to columns."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.manifest = []
        for name, rows in self.tables.items():
            columns = schemas[name]
            path = out / f"{name}.csv"
            write_csv(path, columns, rows)
            self.manifest.append({"file": path.name, "schema": name, "version": SCHEMA_VERSION,
                                  "columns": list(columns), "rows": len(rows)})
        doc = {"config": self.config, "stats": self.stats, "manifest": self.manifest}
        path = out / "manifest.json"
        path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True))
        return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return "" if not math.isfinite(value) else repr(float(value))
    return str(value)


def write_csv(path, columns, rows):
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def read_report_csv(path, columns) -> list:
    """Read a report CSV, checking the header against ``columns``."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != tuple(columns):
        raise FormatError(f"{path}: header {rows[0] if rows else []} does not match {list(columns)}", 0)
    out = []
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != len(columns):
            raise FormatError(f"{path}: line {line} has {len(row)} fields, expected {len(columns)}")
        out.append(dict(zip(columns, row)))
    return out


def _model(checkpoint):
    if isinstance(checkpoint, Checkpoint):
        return checkpoint
    if isinstance(checkpoint, tuple):
        net, schedule = checkpoint[:2]
        header = checkpoint[2] if len(checkpoint) > 2 else {}
        return Checkpoint(net, schedule, header)
    return load_checkpoint(checkpoint)


def _objective(ck: Checkpoint):
    loss = ck.header.get("loss") or {}
    return Objective(loss.get("objective", "base"))


def _plan(ck, size, noise_seed, landmark=None):
    return EvalPlan.uniform(size, ck.schedule.T, _objective(ck), noise_seed=noise_seed, landmark=landmark)


# -- timestep sweep -----------------------------------------------------------

def run_timestep_sweep(checkpoint, dataset, sizes=(1, 10, 100), *, noise_seed: int = 0,
                       landmark: int | None = None, out_dir=None) -> ExperimentReport:
    """Accuracy per plan size plus the arithmetic-mean "avg" row.

    ``checkpoint`` is a path, a :class:`Checkpoint` or a ``(net, schedule)``
    pair; the 1-step landmark follows the objective stored in its header.
    """
    ck = _model(checkpoint)
    sizes = [int(s) for s in sizes]
    if not sizes:
        raise ArgumentError("need at least one plan size")
    rows = []
    for size in sizes:
        plan = _plan(ck, size, noise_seed, landmark)
        rep = evaluate(ck.net, dataset, ck.schedule, plan)
        rows.append({"size": size, "n_timesteps": len(plan.timesteps), "accuracy": rep.accuracy,
                     "mean_class_accuracy": rep.mean_class_accuracy})
    avg = {"size": "avg", "n_timesteps": "",
           "accuracy": average([r["accuracy"] for r in rows]),
           "mean_class_accuracy": average([r["mean_class_accuracy"] for r in rows])}
    report = ExperimentReport({"sizes": sizes, "noise_seed": noise_seed, "landmark": landmark,
                               "objective": _objective(ck).value},
                              {"sweep": rows + [avg]}, {"average_accuracy": avg["accuracy"]})
    if out_dir is not None:
        report.write(out_dir, {"sweep": SWEEP_COLUMNS})
    return report


def average(values) -> float:
    return float(sum(values) / len(values))


# -- robustness ---------------------------------------------------------------

def run_robustness(checkpoint, dataset, specs, *, plan_size: int = 10, noise_seed: int = 0,
                   out_dir=None) -> ExperimentReport:
    """Evaluate on the clean set, then on each corrupted copy, with one fixed plan."""
    ck = _model(checkpoint)
    plan = _plan(ck, plan_size, noise_seed)
    specs = list(specs)
    rows = []
    for spec in [None] + specs:
        if spec is None:
            ds, row = dataset, {"corruption": "clean", "kind": "clean", "sigma": 0.0, "kernel_size": ""}
        else:
            if not isinstance(spec, CorruptionSpec):
                raise ArgumentError(f"not a corruption spec: {spec!r}")
            ds = dataset.with_images(corrupt(dataset.images, spec))
            row = {"corruption": spec.label, "kind": spec.kind.value, "sigma": float(spec.sigma),
                   "kernel_size": spec.kernel_size if spec.kind.value == "gaussian_blur" else ""}
        rep = evaluate(ck.net, ds, ck.schedule, plan)
        row.update(accuracy=rep.accuracy, mean_class_accuracy=rep.mean_class_accuracy)
        rows.append(row)
    stats = {"clean_accuracy": rows[0]["accuracy"], "worst_drop": rows[0]["accuracy"] - rows[-1]["accuracy"]}
    report = ExperimentReport({"plan_size": plan_size, "noise_seed": noise_seed, "timesteps": list(plan.timesteps),
                               "specs": [s.label for s in specs]}, {"robustness": rows}, stats)
    if out_dir is not None:
        report.write(out_dir, {"robustness": ROBUSTNESS_COLUMNS})
    return report


# -- error correlation --------------------------------------------------------

def linear_fit(x, y) -> dict:
    """Pearson r and least-squares ``y = slope * x + intercept``.

    Undefined quantities (zero variance) are reported as ``None`` rather
    than 0.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ArgumentError("need two equal-length series of at least 2 points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy, sxy = float(dx @ dx), float(dy @ dy), float(dx @ dy)
    slope = sxy / sxx if sxx > 0 else None
    intercept = float(y.mean() - slope * x.mean()) if slope is not None else None
    r = sxy / math.sqrt(sxx * syy) if sxx > 0 and syy > 0 else None
    if r is not None:
        r = min(1.0, max(-1.0, r))
    return {"r": r, "slope": slope, "intercept": intercept}


def correlation_errors(net: DenoiserNetwork, images, labels, schedule: NoiseSchedule, plan: EvalPlan,
                       sample_keys=None) -> np.ndarray:
    """Per-sample plan-mean errors ``(N, 4)``: positive, null, nonclass and mean negative."""
    K = net.K
    labels = np.asarray(labels, dtype=np.intp)
    table = error_table(net, images, schedule, plan, rows=list(range(K + 2)),
                        sample_keys=sample_keys).mean(axis=2)
    n = len(labels)
    d_p = table[np.arange(n), labels]
    if K > 1:
        d_neg = (table[:, :K].sum(axis=1) - d_p) / (K - 1)
    else:
        d_neg = np.full(n, np.nan)
    return np.stack([d_p, table[:, K + 1], table[:, K], d_neg], axis=1)


def run_correlation(checkpoint, dataset, *, n_samples: int = DEFAULT_CORRELATION_SAMPLES,
                    plan_size: int = 10, noise_seed: int = 0, subset_seed: int = 0,
                    out_dir=None) -> ExperimentReport:
    """Scatter table of per-sample errors and fit statistics per prompt pair.

    The subset is a seeded random draw of ``n_samples`` items (all items when
    the dataset is smaller); noise streams stay keyed on the original index.
    """
    ck = _model(checkpoint)
    N = len(dataset.labels)
    if min(n_samples, N) < 3:
        raise ArgumentError("correlation needs at least 3 samples")
    idx = np.sort(np.random.default_rng(subset_seed).permutation(N)[:n_samples])
    plan = _plan(ck, plan_size, noise_seed)
    errs = correlation_errors(ck.net, dataset.images[idx], dataset.labels[idx], ck.schedule, plan,
                              sample_keys=idx)
    names = CORRELATION_COLUMNS[2:]
    rows = [{"sample_id": int(i), "label": int(dataset.labels[i]), **dict(zip(names, map(float, e)))}
            for i, e in zip(idx, errs)]
    cols = dict(zip(names, errs.T))
    stats = {f"{a}~{b}": linear_fit(cols[a], cols[b]) for a, b in CORRELATION_PAIRS}
    stats["means"] = {k: float(np.mean(v)) for k, v in cols.items()}
    report = ExperimentReport({"n_samples": int(len(idx)), "plan_size": plan_size, "noise_seed": noise_seed,
                               "subset_seed": subset_seed, "timesteps": list(plan.timesteps)},
                              {"correlation": rows}, stats)
    if out_dir is not None:
        report.write(out_dir, {"correlation": CORRELATION_COLUMNS})
    return report


# -- objective comparison -----------------------------------------------------

@dataclass
class ComparisonResult:
    report: ExperimentReport
    models: dict
    logs: dict = field(default_factory=dict)

    def mean_accuracy(self, objective, size) -> float:
        rows = [r for r in self.report.tables["summary"]
                if r["objective"] == Objective(objective).value and r["size"] == size]
        return rows[0]["mean_accuracy"]

    def run_accuracy(self, objective, seed, size) -> float:
        for r in self.report.tables["runs"]:
            if r["objective"] == Objective(objective).value and r["seed"] == seed and r["size"] == size:
                return r["accuracy"]
        raise KeyError((objective, seed, size))


def compare_objectives(train_set, eval_set, base_cfg: TrainConfig, objectives, seeds, *,
                       arch: Architecture, schedule: NoiseSchedule, sizes=(1, 10), noise_seed: int = 0,
                       out_dir=None) -> ComparisonResult:
    """Train one model per ``(objective, seed)`` and tabulate accuracy per plan size.

    For a given seed every objective starts from the same initialization and
    sees the same batches; only the loss differs. The summary "gap" is the
    accuracy at the largest size minus the accuracy at the smallest.
    """
    seeds = [int(s) for s in seeds]
    objectives = [Objective(o) for o in objectives]
    sizes = sorted(int(s) for s in sizes)
    if not seeds or not objectives:
        raise ArgumentError("need at least one seed and one objective")
    runs, models, logs = [], {}, {}
    for seed in seeds:
        init = init_network(arch, seed)
        for obj in objectives:
            cfg = TrainConfig.from_dict({**base_cfg.to_dict(), "seed": seed,
                                         "loss": {**base_cfg.loss.to_dict(), "objective": obj.value}})
            net = init.copy()
            run_dir = Path(out_dir) / f"{obj.value}_seed{seed}" if out_dir is not None else None
            _, logs[(obj.value, seed)] = train(net, train_set, schedule, cfg, out_dir=run_dir)
            models[(obj.value, seed)] = net
            ck = Checkpoint(net, schedule, {"loss": cfg.loss.to_dict()})
            for size in sizes:
                rep = evaluate(net, eval_set, schedule, _plan(ck, size, noise_seed))
                runs.append({"objective": obj.value, "seed": seed, "size": size, "accuracy": rep.accuracy,
                             "mean_class_accuracy": rep.mean_class_accuracy})
    summary = []
    for obj in objectives:
        means = {s: average([r["accuracy"] for r in runs if r["objective"] == obj.value and r["size"] == s])
                 for s in sizes}
        gap = means[sizes[-1]] - means[sizes[0]]
        summary.extend({"objective": obj.value, "size": s, "mean_accuracy": means[s], "gap": gap} for s in sizes)
    ranking = sorted(objectives, key=lambda o: -average(
        [r["mean_accuracy"] for r in summary if r["objective"] == o.value]))
    report = ExperimentReport({"train": base_cfg.to_dict(), "arch": arch.__dict__, "schedule": schedule.params(),
                               "objectives": [o.value for o in objectives], "seeds": seeds, "sizes": sizes,
                               "noise_seed": noise_seed},
                              {"runs": runs, "summary": summary}, {"ranking": [o.value for o in ranking]})
    if out_dir is not None:
        report.write(out_dir, {"runs": COMPARE_COLUMNS, "summary": COMPARE_SUMMARY_COLUMNS})
    return ComparisonResult(report, models, logs)
