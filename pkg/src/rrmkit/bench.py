"""Evaluation, wall-time statistics and report emission.

The report carries per-epoch wall times with a Student's-t 95% interval,
exact forward/backward pass counts per phase, and natural/adversarial
accuracy. CSV for downstream tools; a versioned JSON document for
lossless round trips.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import tensor as T
from .attacks import AdversaryBudget, multi_restart_attack
from .data import Dataset
from .errors import ConfigurationError
from .tensor import Tensor

REPORT_VERSION = 1

CSV_COLUMNS = [
    "method",
    "epochs",
    "epoch_time_mean_s",
    "epoch_time_ci95_s",
    "total_time_s",
    "total_time_with_teacher_s",
    "natural_acc",
    "adv_acc",
    "fwd_train",
    "bwd_train",
    "fwd_attack",
    "bwd_attack",
    "seed",
]


@dataclass
class RunReport:
    method: str
    epochs: int
    epoch_times: list[float] = field(default_factory=list)
    epoch_time_mean: float = 0.0
    epoch_time_ci95: float = 0.0
    total_time: float = 0.0
    teacher_time: float | None = None
    fwd_train: int = 0
    bwd_train: int = 0
    fwd_attack: int = 0
    bwd_attack: int = 0
    fwd_eval: int = 0
    bwd_eval: int = 0
    param_updates: int = 0
    natural_acc: float | None = None
    adv_acc: float | None = None
    seed: int = 0
    timer_resolution: float = 0.0
    config_echo: dict = field(default_factory=dict)

    @property
    def total_time_with_teacher(self) -> float | None:
        return None if self.teacher_time is None else self.total_time + self.teacher_time

    @property
    def total_forwards(self) -> int:
        return self.fwd_train + self.fwd_attack

    @property
    def total_backwards(self) -> int:
        return self.bwd_train + self.bwd_attack


def confidence_interval_95(samples) -> tuple[float, float]:
    """Mean and half-width of the Student's-t 95% interval."""
    values = np.asarray(list(samples), dtype=np.float64)
    if values.size < 2:
        raise ConfigurationError(f"confidence interval needs at least 2 samples, got {values.size}")
    mean = float(values.mean())
    s = float(values.std(ddof=1))
    t_crit = float(stats.t.ppf(0.975, values.size - 1))
    return mean, t_crit * s / np.sqrt(values.size)


def make_report(config, model, teacher, epoch_times: list[float], step_results) -> RunReport:
    """Assemble the report from a finished training run."""
    from .trainers import config_to_dict

    if len(epoch_times) >= 2:
        mean, half = confidence_interval_95(epoch_times)
    elif len(epoch_times) == 1:
        mean, half = epoch_times[0], 0.0
    else:
        mean, half = 0.0, 0.0
    report = RunReport(
        method=config.method,
        epochs=config.epochs,
        epoch_times=list(epoch_times),
        epoch_time_mean=mean,
        epoch_time_ci95=half,
        total_time=float(sum(epoch_times)),
        param_updates=sum(1 for r in step_results if r.updated),
        seed=config.seed,
        timer_resolution=time.get_clock_info("perf_counter").resolution,
        config_echo=config_to_dict(config),
    )
    involved = [model] + ([teacher] if teacher is not None else [])
    for m in involved:
        for phase, c in m.counters.items():
            if phase == "train":
                report.fwd_train += c.forwards
                report.bwd_train += c.backwards
            elif phase == "attack":
                report.fwd_attack += c.forwards
                report.bwd_attack += c.backwards
            else:
                report.fwd_eval += c.forwards
                report.bwd_eval += c.backwards
    return report


def evaluate(
    model,
    dataset: Dataset,
    budget: AdversaryBudget | None = None,
    rng: np.random.Generator | None = None,
    eval_batch_size: int = 512,
) -> tuple[float, float | None]:
    """Natural accuracy, and adversarial accuracy when a budget is given."""
    if len(dataset) == 0:
        raise ConfigurationError("cannot evaluate on an empty dataset")
    correct = 0
    for start in range(0, len(dataset), eval_batch_size):
        x = dataset.inputs[start : start + eval_batch_size]
        y = dataset.labels[start : start + eval_batch_size]
        with T.no_grad(), model.phase("eval"):
            preds = model.logits(Tensor(x)).data.argmax(axis=1)
        correct += int((preds == y).sum())
    natural = correct / len(dataset)
    if budget is None:
        return natural, None
    if rng is None:
        rng = np.random.default_rng(0)
    adv_correct = 0
    for start in range(0, len(dataset), eval_batch_size):
        x = dataset.inputs[start : start + eval_batch_size]
        y = dataset.labels[start : start + eval_batch_size]
        _, success = multi_restart_attack(model, x, y, budget, rng)
        with T.no_grad(), model.phase("eval"):
            preds = model.logits(Tensor(x)).data.argmax(axis=1)
        adv_correct += int(((preds == y) & ~success).sum())
    return natural, adv_correct / len(dataset)


def _fmt(value) -> str:
    return "" if value is None else repr(value) if isinstance(value, float) else str(value)


def emit_report(report: RunReport, path, format: str = "csv") -> None:
    if format == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            writer.writerow(_csv_row(report))
    elif format == "structured":
        with open(path, "w") as fh:
            json.dump(_to_dict(report), fh, indent=2, sort_keys=True)
            fh.write("\n")
    else:
        raise ConfigurationError(f"unknown report format {format!r}")


def _csv_row(report: RunReport) -> list[str]:
    return [
        report.method,
        str(report.epochs),
        _fmt(report.epoch_time_mean),
        _fmt(report.epoch_time_ci95),
        _fmt(report.total_time),
        _fmt(report.total_time_with_teacher),
        _fmt(report.natural_acc),
        _fmt(report.adv_acc),
        str(report.fwd_train),
        str(report.bwd_train),
        str(report.fwd_attack),
        str(report.bwd_attack),
        str(report.seed),
    ]


def report_csv_line(report: RunReport) -> str:
    buf = io.StringIO()
    csv.writer(buf).writerow(_csv_row(report))
    return buf.getvalue().strip()


def _to_dict(report: RunReport) -> dict:
    d = {k: getattr(report, k) for k in report.__dataclass_fields__}
    d["report_version"] = REPORT_VERSION
    return d


def parse_report(path) -> RunReport:
    """Inverse of emit_report(format='structured')."""
    with open(path) as fh:
        d = json.load(fh)
    version = d.pop("report_version", None)
    if version != REPORT_VERSION:
        raise ConfigurationError(f"unsupported report version {version}")
    return RunReport(**d)
