"""Evaluation suite: per-channel MSE, surface-pressure extraction, pressure
force coefficients, mean relative drag/lift, and Spearman rank correlations
across simulations.

Forces are pressure-only: F/rho = -sum_i (p/rho)_i * n_i * l_i over the
ordered surface polygon, normalized by the dynamic pressure |v_inlet|^2 / 2.
Skin friction is not part of the point schema, so relative and rank metrics
are the meaningful cross-simulation quantities.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, fields

import numpy as np

from .data import Dataset, ScalerPair, Simulation, apply_scaler
from .packed_net import Params, forward

__all__ = [
    "SurfacePolyline",
    "ForceCoefficients",
    "EvalReport",
    "mse_per_channel",
    "order_surface",
    "force_coefficients",
    "spearman",
    "mean_relative_error",
    "predict_simulation",
    "evaluate",
    "evaluate_predictions",
    "coefficient_table",
    "write_report_json",
    "write_coefficients_csv",
]

@dataclass(frozen=True)
class SurfacePolyline:
    """Surface points in closed-polygon order with per-point arc lengths."""

    indices: np.ndarray  # (S,) indices into the simulation's points
    segment_lengths: np.ndarray  # (S,) half-sum of the two incident edges

    def __post_init__(self):
        object.__setattr__(self, "indices", np.ascontiguousarray(self.indices, dtype=np.int64))
        object.__setattr__(
            self, "segment_lengths", np.ascontiguousarray(self.segment_lengths, dtype=np.float64)
        )
        if (self.segment_lengths <= 0).any():
            raise ValueError("segment lengths must be positive")

    @property
    def perimeter(self) -> float:
        return float(self.segment_lengths.sum())


@dataclass(frozen=True)
class ForceCoefficients:
    """Pressure force per density, normalized by dynamic pressure |v_inlet|^2/2."""

    drag: float
    lift: float


@dataclass(frozen=True)
class EvalReport:
    """The metric suite for one model on one dataset split.

    MSEs are in physical units (after inverse scaling); Spearman entries are
    None when the split has fewer than two simulations.
    """

    mse_x_velocity: float
    mse_y_velocity: float
    mse_pressure: float
    mse_surface_pressure: float
    mse_turbulent_viscosity: float
    mean_relative_drag: float
    mean_relative_lift: float
    spearman_drag: float | None
    spearman_lift: float | None

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def mse_per_channel(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Mean squared error per channel, pooled over rows."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    diff = pred - truth
    return np.mean(diff * diff, axis=0)


def order_surface(sim: Simulation) -> SurfacePolyline:
    """Order the surface points by angle around their centroid (ties by radius).

    The result is treated as a closed polygon; each point's effective arc
    length is half the sum of its two incident edge lengths, so the lengths
    sum to the polygon perimeter.  Valid for star-shaped sections.
    """
    surface_indices = np.flatnonzero(sim.surface_mask)
    if len(surface_indices) < 3:
        raise ValueError(
            f"simulation {sim.name!r}: need at least 3 surface points, have {len(surface_indices)}"
        )
    xy = sim.points[surface_indices, :2]
    centered = xy - xy.mean(axis=0)
    angles = np.arctan2(centered[:, 1], centered[:, 0])
    radii = np.hypot(centered[:, 0], centered[:, 1])
    order = np.lexsort((radii, angles))
    ordered = surface_indices[order]
    coords = xy[order]
    edges = np.hypot(*(np.roll(coords, -1, axis=0) - coords).T)  # edge i -> i+1, cyclic
    lengths = 0.5 * (edges + np.roll(edges, 1))
    return SurfacePolyline(indices=ordered, segment_lengths=lengths)


def force_coefficients(
    sim: Simulation, pressure: np.ndarray, polyline: SurfacePolyline | None = None
) -> ForceCoefficients:
    """Integrate a surface pressure field into drag and lift coefficients.

    ``pressure`` holds p/rho for the surface points in the simulation's
    original point order (one entry per surface point).  The force is
    F/rho = -sum p n l with outward unit normals; drag and lift are its x
    and y components over the dynamic pressure from the inlet velocity.
    """
    if polyline is None:
        polyline = order_surface(sim)
    surface_indices = np.flatnonzero(sim.surface_mask)
    pressure = np.asarray(pressure, dtype=np.float64)
    if pressure.shape != (len(surface_indices),):
        raise ValueError(
            f"pressure must have one entry per surface point "
            f"({len(surface_indices)}), got shape {pressure.shape}"
        )
    position = np.searchsorted(surface_indices, polyline.indices)
    p = pressure[position]
    normals = sim.points[polyline.indices, 5:7]
    force = -(p[:, None] * normals * polyline.segment_lengths[:, None]).sum(axis=0)

    inlet = sim.points[0, 2:4]
    dynamic_pressure = 0.5 * float(inlet @ inlet)
    if dynamic_pressure == 0.0:
        raise ValueError(f"simulation {sim.name!r}: zero inlet speed, coefficients undefined")
    return ForceCoefficients(
        drag=float(force[0] / dynamic_pressure), lift=float(force[1] / dynamic_pressure)
    )


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Fractional ranks (1-based); tied values get the mean of their rank range."""
    order = np.argsort(values, kind="stable")
    sorted_values = values[order]
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    n = len(values)
    while i < n:
        j = i
        while j + 1 < n and sorted_values[j + 1] == sorted_values[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(xs, ys) -> float:
    """Spearman rank correlation: Pearson correlation of fractional ranks."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError(f"inputs must be equal-length 1-D, got {xs.shape} and {ys.shape}")
    if len(xs) < 2:
        raise ValueError("need at least 2 samples")
    rx = _average_ranks(xs)
    ry = _average_ranks(ys)
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    var_x = float(dx @ dx)
    var_y = float(dy @ dy)
    if var_x == 0.0 or var_y == 0.0:
        raise ValueError("rank correlation undefined for constant input")
    return float((dx @ dy) / math.sqrt(var_x * var_y))


def mean_relative_error(pred, truth, names=None) -> float:
    """Mean over entries of |pred - truth| / |truth|."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    zero = np.flatnonzero(truth == 0.0)
    if len(zero):
        labels = [names[i] if names is not None else str(i) for i in zero]
        raise ValueError(f"relative error undefined for zero reference values at: {', '.join(labels)}")
    return float(np.mean(np.abs(pred - truth) / np.abs(truth)))


def predict_simulation(params: Params, plans, scaler: ScalerPair, sim: Simulation) -> np.ndarray:
    """Model prediction for one simulation in physical units."""
    scaled = apply_scaler(scaler, sim.points, "forward", "inputs")
    out = forward(params, plans, scaled, mode="eval")
    return apply_scaler(scaler, out.mean_output, "inverse", "targets")


def coefficient_table(
    predictions: list[np.ndarray], dataset: Dataset
) -> list[tuple[str, float, float, float, float]]:
    """Per-simulation (name, drag_pred, drag_true, lift_pred, lift_true)."""
    rows = []
    for pred, sim in zip(predictions, dataset.simulations):
        polyline = order_surface(sim)
        mask = sim.surface_mask
        predicted = force_coefficients(sim, np.asarray(pred)[mask, 2], polyline)
        actual = force_coefficients(sim, sim.targets[mask, 2], polyline)
        rows.append((sim.name, predicted.drag, actual.drag, predicted.lift, actual.lift))
    return rows


def evaluate_predictions(predictions: list[np.ndarray], dataset: Dataset) -> EvalReport:
    """Metric suite for precomputed physical-unit predictions, one per simulation."""
    if len(predictions) != len(dataset.simulations):
        raise ValueError(
            f"{len(predictions)} prediction arrays for {len(dataset.simulations)} simulations"
        )
    sq_sum = np.zeros(4)
    count = 0
    surface_sq_sum = 0.0
    surface_count = 0
    for pred, sim in zip(predictions, dataset.simulations):
        pred = np.asarray(pred, dtype=np.float64)
        if pred.shape != sim.targets.shape:
            raise ValueError(
                f"simulation {sim.name!r}: prediction shape {pred.shape} vs targets {sim.targets.shape}"
            )
        diff = pred - sim.targets
        sq_sum += (diff * diff).sum(axis=0)
        count += sim.num_points
        surface_diff = diff[sim.surface_mask, 2]
        surface_sq_sum += float(surface_diff @ surface_diff)
        surface_count += int(sim.surface_mask.sum())
    mse = sq_sum / count

    table = coefficient_table(predictions, dataset)
    names = [row[0] for row in table]
    drag_pred = np.array([row[1] for row in table])
    drag_true = np.array([row[2] for row in table])
    lift_pred = np.array([row[3] for row in table])
    lift_true = np.array([row[4] for row in table])

    if len(dataset.simulations) >= 2:
        spearman_drag = spearman(drag_pred, drag_true)
        spearman_lift = spearman(lift_pred, lift_true)
    else:
        spearman_drag = None
        spearman_lift = None

    return EvalReport(
        mse_x_velocity=float(mse[0]),
        mse_y_velocity=float(mse[1]),
        mse_pressure=float(mse[2]),
        mse_surface_pressure=surface_sq_sum / surface_count,
        mse_turbulent_viscosity=float(mse[3]),
        mean_relative_drag=mean_relative_error(drag_pred, drag_true, names),
        mean_relative_lift=mean_relative_error(lift_pred, lift_true, names),
        spearman_drag=spearman_drag,
        spearman_lift=spearman_lift,
    )


def evaluate(params: Params, plans, scaler: ScalerPair, dataset: Dataset) -> EvalReport:
    """Predict every simulation (scale, forward, inverse-scale) and score it."""
    predictions = [predict_simulation(params, plans, scaler, sim) for sim in dataset.simulations]
    return evaluate_predictions(predictions, dataset)


def write_report_json(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_coefficients_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("sim", "drag_pred", "drag_true", "lift_pred", "lift_true"))
        for name, drag_pred, drag_true, lift_pred, lift_true in rows:
            writer.writerow(
                (name, repr(drag_pred), repr(drag_true), repr(lift_pred), repr(lift_true))
            )
