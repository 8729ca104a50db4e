"""Simulation files, standardization, folds, and an analytic flow generator.

A simulation is one point cloud: per point 7 input features
(x, y, inlet_vx, inlet_vy, distance, nx, ny) and 4 regression targets
(vx, vy, p_over_rho, nu_t).  Surface points are exactly those with a
nonzero normal; they carry distance 0 and a unit normal.

On disk a simulation is a CSV with header ``x,y,inlet_vx,inlet_vy,distance,
nx,ny,vx,vy,p,nut`` (UTF-8, '.' decimal, one point per row); a dataset is a
directory of such files plus a ``manifest.json`` listing file names and the
split label.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "CSV_COLUMNS",
    "SPLIT_LABELS",
    "Simulation",
    "Dataset",
    "ScalerPair",
    "SimulationParseError",
    "load_simulation",
    "write_simulation",
    "load_dataset",
    "write_dataset",
    "fit_scaler",
    "apply_scaler",
    "kfold_split",
    "subsample",
    "CylinderFlowConfig",
    "generate_cylinder_flow",
    "cylinder_velocity",
    "bernoulli_pressure",
]

CSV_COLUMNS = ("x", "y", "inlet_vx", "inlet_vy", "distance", "nx", "ny", "vx", "vy", "p", "nut")
SPLIT_LABELS = ("train", "test", "test_ood")

_SURFACE_DISTANCE_TOL = 1e-9
_NORMAL_NORM_TOL = 1e-6
_STD_CLAMP = 1e-12
MANIFEST_NAME = "manifest.json"


class SimulationParseError(ValueError):
    """Malformed simulation CSV; carries 1-based row and column of the offense."""

    def __init__(self, path, row: int | None, column: str | None, message: str):
        location = ""
        if row is not None:
            location += f", row {row}"
        if column is not None:
            location += f", column {column!r}"
        super().__init__(f"{path}{location}: {message}")
        self.path = str(path)
        self.row = row
        self.column = column


def _frozen_array(values, shape_tail: int, what: str) -> np.ndarray:
    # own copy so freezing never touches caller state
    arr = np.array(values, dtype=np.float64, order="C")
    if arr.ndim != 2 or arr.shape[1] != shape_tail:
        raise ValueError(f"{what} must have shape (N, {shape_tail}), got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Simulation:
    """One point cloud with 7 input features and 4 targets per point."""

    name: str
    points: np.ndarray  # (N, 7)
    targets: np.ndarray  # (N, 4)

    def __post_init__(self):
        object.__setattr__(self, "points", _frozen_array(self.points, 7, "points"))
        object.__setattr__(self, "targets", _frozen_array(self.targets, 4, "targets"))
        if len(self.points) < 1:
            raise ValueError(f"simulation {self.name!r} has no points")
        if len(self.points) != len(self.targets):
            raise ValueError(
                f"simulation {self.name!r}: {len(self.points)} points vs {len(self.targets)} targets"
            )
        if not np.isfinite(self.points).all() or not np.isfinite(self.targets).all():
            raise ValueError(f"simulation {self.name!r} contains non-finite values")
        distance = self.points[:, 4]
        if (distance < 0).any():
            raise ValueError(f"simulation {self.name!r}: negative distance values")
        mask = self.surface_mask
        if np.abs(distance[mask]).max(initial=0.0) > _SURFACE_DISTANCE_TOL:
            raise ValueError(f"simulation {self.name!r}: surface points must have distance 0")
        norms = np.hypot(self.points[mask, 5], self.points[mask, 6])
        if norms.size and np.abs(norms - 1.0).max() > _NORMAL_NORM_TOL:
            raise ValueError(f"simulation {self.name!r}: surface normals must have unit norm")

    @property
    def surface_mask(self) -> np.ndarray:
        """Boolean mask of points lying on the geometry (nonzero normals)."""
        return (self.points[:, 5] != 0.0) | (self.points[:, 6] != 0.0)

    @property
    def num_points(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class Dataset:
    """Ordered simulations belonging to one split."""

    simulations: tuple[Simulation, ...]
    split_label: str

    def __post_init__(self):
        object.__setattr__(self, "simulations", tuple(self.simulations))
        if self.split_label not in SPLIT_LABELS:
            raise ValueError(f"split_label must be one of {SPLIT_LABELS}, got {self.split_label!r}")
        names = [s.name for s in self.simulations]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"duplicate simulation names in dataset: {dupes}")

    def __len__(self) -> int:
        return len(self.simulations)


@dataclass(frozen=True)
class ScalerPair:
    """Per-channel standardizers for inputs and targets, fitted on training data."""

    input_mean: np.ndarray
    input_std: np.ndarray
    target_mean: np.ndarray
    target_std: np.ndarray

    def __post_init__(self):
        for field_name, width in (("input_mean", 7), ("input_std", 7), ("target_mean", 4), ("target_std", 4)):
            arr = np.array(getattr(self, field_name), dtype=np.float64)
            if arr.shape != (width,):
                raise ValueError(f"{field_name} must have shape ({width},), got {arr.shape}")
            arr.setflags(write=False)
            object.__setattr__(self, field_name, arr)
        if (self.input_std <= 0).any() or (self.target_std <= 0).any():
            raise ValueError("scaler std entries must be positive")

    def to_dict(self) -> dict:
        return {
            "input_mean": self.input_mean.tolist(),
            "input_std": self.input_std.tolist(),
            "target_mean": self.target_mean.tolist(),
            "target_std": self.target_std.tolist(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ScalerPair":
        return cls(
            input_mean=np.asarray(obj["input_mean"], dtype=np.float64),
            input_std=np.asarray(obj["input_std"], dtype=np.float64),
            target_mean=np.asarray(obj["target_mean"], dtype=np.float64),
            target_std=np.asarray(obj["target_std"], dtype=np.float64),
        )


def load_simulation(path) -> Simulation:
    """Parse one simulation CSV, validating schema and all invariants."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SimulationParseError(path, None, None, "empty file") from None
        header = [h.strip() for h in header]
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise SimulationParseError(path, 1, missing[0], f"missing column {missing[0]!r}")
        extra = [c for c in header if c not in CSV_COLUMNS]
        if extra:
            raise SimulationParseError(path, 1, extra[0], f"unexpected column {extra[0]!r}")
        column_order = [header.index(c) for c in CSV_COLUMNS]

        rows = []
        for row_number, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_COLUMNS):
                raise SimulationParseError(
                    path, row_number, None, f"expected {len(CSV_COLUMNS)} fields, found {len(row)}"
                )
            values = []
            for cell_index, column in zip(column_order, CSV_COLUMNS):
                cell = row[cell_index]
                try:
                    value = float(cell)
                except ValueError:
                    raise SimulationParseError(
                        path, row_number, column, f"not a number: {cell!r}"
                    ) from None
                if not math.isfinite(value):
                    raise SimulationParseError(path, row_number, column, f"non-finite value: {cell!r}")
                values.append(value)
            rows.append(values)
    if not rows:
        raise SimulationParseError(path, None, None, "no data rows")
    data = np.asarray(rows, dtype=np.float64)
    try:
        return Simulation(name=path.stem, points=data[:, :7], targets=data[:, 7:])
    except ValueError as exc:
        raise SimulationParseError(path, None, None, str(exc)) from exc


def write_simulation(sim: Simulation, path) -> None:
    """Write a simulation CSV; floats use shortest round-trip decimal form."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for feat, targ in zip(sim.points, sim.targets):
            fh.write(",".join(repr(float(v)) for v in (*feat, *targ)) + "\n")


def load_dataset(directory) -> Dataset:
    """Load a dataset directory: manifest.json plus the simulation CSVs it lists."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    for key in ("split_label", "simulations"):
        if key not in manifest:
            raise ValueError(f"{manifest_path}: missing manifest key {key!r}")
    sims = tuple(load_simulation(directory / name) for name in manifest["simulations"])
    return Dataset(simulations=sims, split_label=manifest["split_label"])


def write_dataset(dataset: Dataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    file_names = []
    for sim in dataset.simulations:
        file_name = f"{sim.name}.csv"
        write_simulation(sim, directory / file_name)
        file_names.append(file_name)
    manifest = {"split_label": dataset.split_label, "simulations": file_names}
    with open(directory / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _pooled(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    return (
        np.vstack([s.points for s in dataset.simulations]),
        np.vstack([s.targets for s in dataset.simulations]),
    )


def fit_scaler(train: Dataset) -> ScalerPair:
    """Per-channel mean/std over the pooled training points (population std).

    Near-constant channels (std < 1e-12) are clamped to std 1 so the forward
    transform maps them to 0.
    """
    if len(train) == 0:
        raise ValueError("cannot fit a scaler on an empty dataset")
    points, targets = _pooled(train)

    def stats(arr):
        mean = arr.mean(axis=0)
        std = arr.std(axis=0)
        std = np.where(std < _STD_CLAMP, 1.0, std)
        return mean, std

    input_mean, input_std = stats(points)
    target_mean, target_std = stats(targets)
    return ScalerPair(input_mean, input_std, target_mean, target_std)


def apply_scaler(scaler: ScalerPair, data, direction: str, which: str) -> np.ndarray:
    """Standardize (``forward``: (v-mean)/std) or restore (``inverse``: v*std+mean)."""
    if which == "inputs":
        mean, std, width = scaler.input_mean, scaler.input_std, 7
        if isinstance(data, Simulation):
            data = data.points
    elif which == "targets":
        mean, std, width = scaler.target_mean, scaler.target_std, 4
        if isinstance(data, Simulation):
            data = data.targets
    else:
        raise ValueError(f"which must be 'inputs' or 'targets', got {which!r}")
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != width:
        raise ValueError(f"{which} array must have {width} channels, got shape {arr.shape}")
    if direction == "forward":
        return (arr - mean) / std
    if direction == "inverse":
        return arr * std + mean
    raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")


def kfold_split(dataset: Dataset, k: int, seed: int) -> list[tuple[Dataset, Dataset]]:
    """Seeded random partition into k folds at simulation granularity.

    Fold sizes differ by at most one; each simulation lands in exactly one
    validation fold.  Returns (train, validation) dataset pairs.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    n = len(dataset)
    if n < k:
        raise ValueError(f"need at least {k} simulations for {k} folds, have {n}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    base, remainder = divmod(n, k)
    folds = []
    start = 0
    for fold_index in range(k):
        size = base + (1 if fold_index < remainder else 0)
        val_idx = set(perm[start : start + size].tolist())
        start += size
        train_sims = tuple(s for i, s in enumerate(dataset.simulations) if i not in val_idx)
        val_sims = tuple(s for i, s in enumerate(dataset.simulations) if i in val_idx)
        folds.append(
            (
                Dataset(train_sims, split_label=dataset.split_label),
                Dataset(val_sims, split_label=dataset.split_label),
            )
        )
    return folds


def subsample(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """Keep ceil(fraction * #sims) simulations chosen by seeded shuffle.

    The kept simulations stay in their original order; fraction 1 is the
    identity.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    n = len(dataset)
    keep = math.ceil(fraction * n)
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.permutation(n)[:keep])
    return Dataset(
        tuple(dataset.simulations[i] for i in chosen), split_label=dataset.split_label
    )


# ---------------------------------------------------------------------------
# Synthetic flow: ideal incompressible potential flow past a circular cylinder
# with optional circulation, plus a smooth auxiliary eddy-viscosity channel.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CylinderFlowConfig:
    """Parameters for one generated dataset of cylinder flows."""

    num_sims: int
    surface_points: int
    field_points: int
    radius_range: tuple[float, float]
    inlet_speed_range: tuple[float, float]
    circulation_range: tuple[float, float]
    seed: int
    ood: bool = False

    def __post_init__(self):
        if self.num_sims < 1:
            raise ValueError("num_sims must be >= 1")
        if self.surface_points < 3 or self.field_points < 3:
            raise ValueError("surface_points and field_points must be >= 3")
        for name in ("radius_range", "inlet_speed_range", "circulation_range"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
                raise ValueError(f"{name} must be a finite (lo, hi) pair with lo <= hi")
        lo, hi = self.radius_range
        if lo <= 0:
            raise ValueError("radius_range must be positive")
        lo, hi = self.inlet_speed_range
        if lo <= 0:
            raise ValueError("inlet_speed_range must be positive")


def cylinder_velocity(
    xy: np.ndarray, radius: float, inlet_speed: float, circulation: float
) -> np.ndarray:
    """Velocity of potential flow past a cylinder at the given points.

    Freestream (inlet_speed, 0), cylinder of the given radius centred at the
    origin, point vortex of the given circulation (counterclockwise
    positive).  Points must lie on or outside the cylinder.
    """
    xy = np.asarray(xy, dtype=np.float64)
    x, y = xy[..., 0], xy[..., 1]
    r2 = x * x + y * y
    if (r2 < radius * radius * (1.0 - 1e-12)).any():
        raise ValueError("cylinder_velocity evaluated inside the cylinder")
    # u_r = U (1 - R^2/r^2) cos(t), u_t = -U (1 + R^2/r^2) sin(t) + G/(2 pi r)
    r = np.sqrt(r2)
    cos_t, sin_t = x / r, y / r
    ratio = (radius * radius) / r2
    u_r = inlet_speed * (1.0 - ratio) * cos_t
    u_t = -inlet_speed * (1.0 + ratio) * sin_t + circulation / (2.0 * np.pi * r)
    u = u_r * cos_t - u_t * sin_t
    v = u_r * sin_t + u_t * cos_t
    return np.stack([u, v], axis=-1)


def bernoulli_pressure(velocity: np.ndarray, inlet_speed: float) -> np.ndarray:
    """p/rho from Bernoulli with gauge zero at infinity: (U^2 - |u|^2) / 2."""
    velocity = np.asarray(velocity, dtype=np.float64)
    speed_sq = (velocity * velocity).sum(axis=-1)
    return 0.5 * inlet_speed * inlet_speed - 0.5 * speed_sq


def _ood_range(lo: float, hi: float) -> tuple[float, float]:
    # Shift the interval just above its own upper end, keeping its width.
    width = hi - lo
    return hi, hi + (width if width > 0 else abs(hi) + 1.0)


def _generate_one(
    name: str, config: CylinderFlowConfig, rng: np.random.Generator
) -> Simulation:
    r_lo, r_hi = config.radius_range
    u_lo, u_hi = config.inlet_speed_range
    g_lo, g_hi = config.circulation_range
    if config.ood:
        r_lo, r_hi = _ood_range(r_lo, r_hi)
        u_lo, u_hi = _ood_range(u_lo, u_hi)
        g_lo, g_hi = _ood_range(g_lo, g_hi)
    radius = rng.uniform(r_lo, r_hi)
    inlet_speed = rng.uniform(u_lo, u_hi)
    circulation = rng.uniform(g_lo, g_hi)

    # Surface ring: evenly spaced angles with a random phase.
    phase = rng.uniform(0.0, 2.0 * np.pi)
    theta = phase + 2.0 * np.pi * np.arange(config.surface_points) / config.surface_points
    surf_xy = radius * np.stack([np.cos(theta), np.sin(theta)], axis=1)
    surf_normals = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    surf_distance = np.zeros(config.surface_points)

    # Field points: annulus out to six radii.
    t = rng.uniform(0.05, 5.0, size=config.field_points)
    ang = rng.uniform(0.0, 2.0 * np.pi, size=config.field_points)
    field_r = radius * (1.0 + t)
    field_xy = np.stack([field_r * np.cos(ang), field_r * np.sin(ang)], axis=1)
    field_normals = np.zeros((config.field_points, 2))
    field_distance = field_r - radius

    xy = np.vstack([surf_xy, field_xy])
    normals = np.vstack([surf_normals, field_normals])
    distance = np.concatenate([surf_distance, field_distance])

    velocity = cylinder_velocity(xy, radius, inlet_speed, circulation)
    pressure = bernoulli_pressure(velocity, inlet_speed)
    speed = np.hypot(velocity[:, 0], velocity[:, 1])
    nu_t = 0.01 * distance * speed

    n = len(xy)
    points = np.empty((n, 7))
    points[:, 0:2] = xy
    points[:, 2] = inlet_speed
    points[:, 3] = 0.0
    points[:, 4] = distance
    points[:, 5:7] = normals
    targets = np.empty((n, 4))
    targets[:, 0:2] = velocity
    targets[:, 2] = pressure
    targets[:, 3] = nu_t

    order = rng.permutation(n)
    return Simulation(name=name, points=points[order], targets=targets[order])


def generate_cylinder_flow(config: CylinderFlowConfig, split_label: str | None = None) -> Dataset:
    """Generate a dataset of analytic cylinder flows.

    Each simulation draws a radius, inlet speed, and circulation from the
    configured ranges (``ood=True`` shifts every range above its upper end).
    Velocity comes from the potential-flow solution, pressure from Bernoulli,
    and the eddy-viscosity channel is the smooth surrogate
    ``0.01 * distance * speed``.
    """
    if split_label is None:
        split_label = "test_ood" if config.ood else "train"
    rng = np.random.default_rng(config.seed)
    sims = tuple(
        _generate_one(f"{split_label}_{i:04d}", config, rng) for i in range(config.num_sims)
    )
    return Dataset(simulations=sims, split_label=split_label)
