"""Cost benchmarking: parameter counts and wall-clock training time per spec.

Timings cover the epoch loop only (dataset loading and scaler work are
excluded) and are recorded next to a machine descriptor, since absolute
seconds are not comparable across machines.  Rows run sequentially so the
numbers within one report are.
"""

from __future__ import annotations

import csv
import json
import os
import platform
from dataclasses import dataclass
from pathlib import Path

from .data import Dataset, ScalerPair, fit_scaler
from .metrics import EvalReport, evaluate
from .packed_net import PackedSpec, Params, param_count, plan_layers
from .training import TrainConfig, TrainHistory, train, write_history_csv

__all__ = [
    "BenchCase",
    "BenchRow",
    "BenchReport",
    "machine_descriptor",
    "time_training",
    "run_benchmark",
    "write_benchmark",
]

# Human-readable headers for the four cross-simulation physics metrics.
PHYSICS_HEADERS = (
    "mean relative drag",
    "mean relative lift",
    "Spearman's correlation for drag",
    "Spearman's correlation for lift",
)


@dataclass(frozen=True)
class BenchCase:
    """One benchmark row: a spec plus its optimizer hyperparameters."""

    name: str
    spec: PackedSpec
    learning_rate: float
    weight_decay: float = 0.0


@dataclass
class BenchRow:
    case: BenchCase
    param_count: int
    train_seconds: float
    final_train_loss: float
    reports: dict[str, EvalReport]
    history: TrainHistory | None = None
    error: str | None = None


@dataclass
class BenchReport:
    rows: list[BenchRow]
    machine: dict
    split_names: tuple[str, ...]


def machine_descriptor() -> dict:
    return {
        "platform": platform.platform(),
        "machine": platform.machine(),
        "processor": platform.processor() or "unknown",
        "cpu_count": os.cpu_count(),
        "omp_num_threads": os.environ.get("OMP_NUM_THREADS", "unset"),
    }


def time_training(
    spec: PackedSpec, cfg: TrainConfig, dataset: Dataset, scaler: ScalerPair | None = None
) -> tuple[float, Params, TrainHistory]:
    """Train once and report the wall-clock seconds spent in the epoch loop.

    Early stopping must be disabled so compared runs do equal epochs.
    """
    if cfg.early_stop_enabled:
        raise ValueError("benchmark timing requires early_stop_enabled=False")
    if scaler is None:
        scaler = fit_scaler(dataset)
    params, history = train(spec, dataset, None, scaler, cfg)
    return sum(history.wall_seconds), params, history


def run_benchmark(
    cases: list[BenchCase],
    cfg: TrainConfig,
    train_split: Dataset,
    eval_splits: dict[str, Dataset],
) -> BenchReport:
    """Train each case once, evaluate on every split, and collect a report.

    A failing case is recorded with its error and the remaining cases run.
    """
    if not cases:
        raise ValueError("no benchmark cases")
    scaler = fit_scaler(train_split)
    rows = []
    for case in cases:
        plans = plan_layers(case.spec)
        row = BenchRow(
            case=case,
            param_count=param_count(plans),
            train_seconds=0.0,
            final_train_loss=float("nan"),
            reports={},
        )
        try:
            case_cfg = TrainConfig(
                learning_rate=case.learning_rate,
                weight_decay=case.weight_decay,
                max_epochs=cfg.max_epochs,
                batch_points=cfg.batch_points,
                seed=cfg.seed,
                early_stop_enabled=False,
            )
            seconds, params, history = time_training(case.spec, case_cfg, train_split, scaler)
            row.train_seconds = seconds
            row.final_train_loss = history.train_loss[-1] if history.train_loss else float("nan")
            row.history = history
            for split_name, split in eval_splits.items():
                row.reports[split_name] = evaluate(params, plans, scaler, split)
        except Exception as exc:  # keep remaining rows running
            row.error = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return BenchReport(rows=rows, machine=machine_descriptor(), split_names=tuple(eval_splits))


def _case_columns(case: BenchCase) -> tuple:
    spec = case.spec
    return (
        case.name,
        "(" + ",".join(str(w) for w in spec.hidden_widths) + ")",
        spec.num_estimators,
        spec.alpha,
        spec.gamma,
        spec.dropout_enabled,
        repr(case.learning_rate),
        repr(case.weight_decay),
    )


_CSV_HEADER = (
    "name",
    "layers",
    "num_estimators",
    "alpha",
    "gamma",
    "dropout",
    "learning_rate",
    "weight_decay",
    "param_count",
    "train_seconds",
    "final_train_loss",
    "mse_x_velocity",
    "mse_y_velocity",
    "mse_pressure",
    "mse_surface_pressure",
    "mse_turbulent_viscosity",
    "mean_relative_drag",
    "mean_relative_lift",
    "spearman_drag",
    "spearman_lift",
    "error",
)


def _report_values(report: EvalReport | None) -> list:
    if report is None:
        return [""] * 9
    d = report.to_dict()
    return [
        "" if d[key] is None else repr(d[key])
        for key in (
            "mse_x_velocity",
            "mse_y_velocity",
            "mse_pressure",
            "mse_surface_pressure",
            "mse_turbulent_viscosity",
            "mean_relative_drag",
            "mean_relative_lift",
            "spearman_drag",
            "spearman_lift",
        )
    ]


def write_benchmark(report: BenchReport, out_dir) -> None:
    """Emit one CSV and one aligned text table per split, raw per-epoch logs, and machine info."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "machine.json", "w", encoding="utf-8") as fh:
        json.dump(report.machine, fh, indent=2, sort_keys=True)
        fh.write("\n")

    logs_dir = out_dir / "logs"
    logs_dir.mkdir(exist_ok=True)
    for row in report.rows:
        if row.history is not None:
            write_history_csv(row.history, logs_dir / f"{row.case.name}_history.csv")

    for split_name in report.split_names:
        with open(out_dir / f"bench_{split_name}.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(_CSV_HEADER)
            for row in report.rows:
                writer.writerow(
                    (
                        *_case_columns(row.case),
                        row.param_count,
                        repr(row.train_seconds),
                        repr(row.final_train_loss),
                        *_report_values(row.reports.get(split_name)),
                        row.error or "",
                    )
                )
        _write_text_table(report, split_name, out_dir / f"bench_{split_name}.txt")


def _write_text_table(report: BenchReport, split_name: str, path) -> None:
    headers = [
        "model",
        "layers",
        "M",
        "alpha",
        "gamma",
        "dropout",
        "lr",
        "weight decay",
        "params",
        "train seconds",
        *PHYSICS_HEADERS,
    ]
    table = [headers]
    for row in report.rows:
        rep = row.reports.get(split_name)
        if rep is None:
            physics = ["-", "-", "-", "-"]
        else:
            physics = [
                f"{rep.mean_relative_drag:.4g}",
                f"{rep.mean_relative_lift:.4g}",
                "-" if rep.spearman_drag is None else f"{rep.spearman_drag:.4g}",
                "-" if rep.spearman_lift is None else f"{rep.spearman_lift:.4g}",
            ]
        spec = row.case.spec
        table.append(
            [
                row.case.name,
                "(" + ",".join(str(w) for w in spec.hidden_widths) + ")",
                str(spec.num_estimators),
                str(spec.alpha),
                str(spec.gamma),
                str(spec.dropout_enabled),
                f"{row.case.learning_rate:g}",
                f"{row.case.weight_decay:g}",
                str(row.param_count),
                f"{row.train_seconds:.3f}",
                *physics,
            ]
        )
    widths = [max(len(r[i]) for r in table) for i in range(len(headers))]
    lines = [f"evaluation split: {split_name}"]
    for r in table:
        lines.append("  ".join(cell.ljust(width) for cell, width in zip(r, widths)).rstrip())
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
