"""Packed-ensemble MLPs: layer planning, parameters, forward pass, exact gradients.

A packed network embeds ``num_estimators`` sub-networks ("estimators") in a
single MLP by making every affine layer block-diagonal.  Hidden widths are
scaled by the capacity factor ``alpha`` and partitioned into
``num_estimators * gamma`` groups, so each estimator is further sliced into
``gamma`` independent strands.  The first and last layers use one group per
estimator: every estimator sees the full input and emits a complete
prediction, and the network output is the arithmetic mean over estimators.

Weight arrays are stored per layer with shape
``(groups, per_group_out, per_group_in)``; the equivalent dense weight matrix
is block-diagonal with those blocks on the diagonal, in group order.  Group
channel ranges are contiguous, so estimator ``j`` owns channels
``[j * width // M, (j + 1) * width // M)`` of every layer and estimators never
share weights.  All math is float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "PackedSpec",
    "LayerPlan",
    "Params",
    "PerEstimatorOutput",
    "ShapeMismatchError",
    "plan_layers",
    "init_params",
    "forward",
    "loss_and_grad",
    "param_count",
    "make_dropout_masks",
    "save_params",
    "load_params",
]

MODEL_FORMAT_VERSION = 1
_MODEL_MAGIC = b"PKMLP1\x00\x00"


class ShapeMismatchError(ValueError):
    """An array does not match its layer plan; carries the offending layer index."""

    def __init__(self, layer: int, message: str):
        super().__init__(f"layer {layer}: {message}")
        self.layer = layer


@dataclass(frozen=True)
class PackedSpec:
    """Architecture descriptor from which layer plans are derived."""

    num_estimators: int
    alpha: int
    gamma: int
    hidden_widths: tuple[int, ...]
    in_features: int = 7
    out_features: int = 4
    dropout_enabled: bool = False
    dropout_p: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.num_estimators < 1 or self.alpha < 1 or self.gamma < 1:
            raise ValueError(
                f"num_estimators, alpha, gamma must all be >= 1, got "
                f"({self.num_estimators}, {self.alpha}, {self.gamma})"
            )
        if not self.hidden_widths:
            raise ValueError("hidden_widths must be non-empty")
        if any(w < 1 for w in self.hidden_widths):
            raise ValueError(f"hidden widths must be positive, got {self.hidden_widths}")
        if self.in_features < 1 or self.out_features < 1:
            raise ValueError("in_features and out_features must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.dropout_enabled and self.dropout_p != 0.2:
            raise ValueError("dropout probability is fixed at 0.2 when dropout is enabled")

    def to_dict(self) -> dict:
        return {
            "num_estimators": self.num_estimators,
            "alpha": self.alpha,
            "gamma": self.gamma,
            "hidden_widths": list(self.hidden_widths),
            "in_features": self.in_features,
            "out_features": self.out_features,
            "dropout_enabled": self.dropout_enabled,
            "dropout_p": self.dropout_p,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "PackedSpec":
        return cls(
            num_estimators=int(obj["num_estimators"]),
            alpha=int(obj["alpha"]),
            gamma=int(obj["gamma"]),
            hidden_widths=tuple(int(w) for w in obj["hidden_widths"]),
            in_features=int(obj.get("in_features", 7)),
            out_features=int(obj.get("out_features", 4)),
            dropout_enabled=bool(obj.get("dropout_enabled", False)),
            dropout_p=float(obj.get("dropout_p", 0.2)),
        )


@dataclass(frozen=True)
class LayerPlan:
    """One grouped affine layer: total widths plus the per-group block shape."""

    role: str  # "first" | "hidden" | "last"
    in_width: int
    out_width: int
    groups: int
    per_group_in: int
    per_group_out: int

    def __post_init__(self):
        if self.role not in ("first", "hidden", "last"):
            raise ValueError(f"unknown layer role {self.role!r}")
        if self.in_width != self.groups * self.per_group_in:
            raise ValueError(f"in_width {self.in_width} != groups*per_group_in")
        if self.out_width != self.groups * self.per_group_out:
            raise ValueError(f"out_width {self.out_width} != groups*per_group_out")

    def to_dict(self) -> dict:
        return {
            "role": self.role,
            "in_width": self.in_width,
            "out_width": self.out_width,
            "groups": self.groups,
            "per_group_in": self.per_group_in,
            "per_group_out": self.per_group_out,
        }


@dataclass
class Params:
    """Per-layer block weights ``(groups, per_group_out, per_group_in)`` and biases ``(out_width,)``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def copy(self) -> "Params":
        return Params([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "Params":
        return Params([np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases])


@dataclass(frozen=True)
class PerEstimatorOutput:
    """Stacked estimator predictions and their arithmetic mean."""

    estimator_outputs: np.ndarray  # (num_estimators, batch, out_features)
    mean_output: np.ndarray  # (batch, out_features)


def _widened_width(spec: PackedSpec, base: int) -> int:
    # Smallest multiple of num_estimators*gamma that is >= alpha*base (and >= the step itself).
    step = spec.num_estimators * spec.gamma
    return max(step, -(-(spec.alpha * base) // step) * step)


def plan_layers(spec: PackedSpec) -> list[LayerPlan]:
    """Derive the grouped layer stack for a spec.

    Hidden widths are widened to multiples of ``num_estimators * gamma`` so no
    group is ever empty.  First and last layers group per estimator (gamma is
    not applied there); interior layers use ``num_estimators * gamma`` groups.
    """
    m = spec.num_estimators
    widths = [_widened_width(spec, h) for h in spec.hidden_widths]

    plans = [
        LayerPlan(
            role="first",
            in_width=m * spec.in_features,
            out_width=widths[0],
            groups=m,
            per_group_in=spec.in_features,
            per_group_out=widths[0] // m,
        )
    ]
    groups = m * spec.gamma
    for w_in, w_out in zip(widths[:-1], widths[1:]):
        plans.append(
            LayerPlan(
                role="hidden",
                in_width=w_in,
                out_width=w_out,
                groups=groups,
                per_group_in=w_in // groups,
                per_group_out=w_out // groups,
            )
        )
    plans.append(
        LayerPlan(
            role="last",
            in_width=widths[-1],
            out_width=m * spec.out_features,
            groups=m,
            per_group_in=widths[-1] // m,
            per_group_out=spec.out_features,
        )
    )
    return plans


def param_count(plans: list[LayerPlan]) -> int:
    """Total number of stored weights and biases."""
    return sum(p.groups * p.per_group_out * p.per_group_in + p.out_width for p in plans)


def init_params(plans: list[LayerPlan], seed: int) -> Params:
    """He-style uniform init with fan-in = per-group input width; biases zero."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for plan in plans:
        bound = np.sqrt(6.0 / plan.per_group_in)
        weights.append(rng.uniform(-bound, bound, size=(plan.groups, plan.per_group_out, plan.per_group_in)))
        biases.append(np.zeros(plan.out_width))
    return Params(weights, biases)


def make_dropout_masks(
    plans: list[LayerPlan], batch_size: int, dropout_p: float, rng: np.random.Generator
) -> list[np.ndarray]:
    """Inverted-dropout masks (values 0 or 1/keep) for every activation layer.

    One mask per layer except the last; masks already carry the 1/(1-p)
    scaling so evaluation needs no rescaling.
    """
    if not 0.0 < dropout_p < 1.0:
        raise ValueError(f"dropout_p must be in (0, 1), got {dropout_p}")
    keep = 1.0 - dropout_p
    return [
        (rng.random((batch_size, plan.out_width)) < keep) / keep
        for plan in plans[:-1]
    ]


def _check_layer(i: int, plan: LayerPlan, weights: np.ndarray, biases: np.ndarray, x: np.ndarray) -> None:
    expected_w = (plan.groups, plan.per_group_out, plan.per_group_in)
    if weights.shape != expected_w:
        raise ShapeMismatchError(i, f"weights shape {weights.shape}, plan expects {expected_w}")
    if biases.shape != (plan.out_width,):
        raise ShapeMismatchError(i, f"biases shape {biases.shape}, plan expects ({plan.out_width},)")
    if x.shape[1] != plan.in_width:
        raise ShapeMismatchError(i, f"input width {x.shape[1]}, plan expects {plan.in_width}")


def _affine(plan: LayerPlan, weights: np.ndarray, biases: np.ndarray, x: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    xg = x.reshape(n, plan.groups, plan.per_group_in).transpose(1, 0, 2)
    yg = xg @ weights.transpose(0, 2, 1)  # (groups, n, per_group_out)
    return yg.transpose(1, 0, 2).reshape(n, plan.out_width) + biases


def _affine_backward(
    plan: LayerPlan, weights: np.ndarray, x: np.ndarray, dz: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = x.shape[0]
    xg = x.reshape(n, plan.groups, plan.per_group_in).transpose(1, 0, 2)
    dzg = dz.reshape(n, plan.groups, plan.per_group_out).transpose(1, 0, 2)
    grad_w = dzg.transpose(0, 2, 1) @ xg
    grad_b = dz.sum(axis=0)
    dx = (dzg @ weights).transpose(1, 0, 2).reshape(n, plan.in_width)
    return grad_w, grad_b, dx


def _resolve_masks(
    plans: list[LayerPlan],
    batch_size: int,
    mode: str,
    rng: np.random.Generator | None,
    dropout_p: float,
    dropout_masks: list[np.ndarray] | None,
) -> list[np.ndarray] | None:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode != "train" or (dropout_p == 0.0 and dropout_masks is None):
        return None
    if dropout_masks is not None:
        if len(dropout_masks) != len(plans) - 1:
            raise ValueError(
                f"expected {len(plans) - 1} dropout masks, got {len(dropout_masks)}"
            )
        return dropout_masks
    if rng is None:
        raise ValueError("training with dropout requires an rng (or explicit masks)")
    return make_dropout_masks(plans, batch_size, dropout_p, rng)


def _run_layers(
    params: Params, plans: list[LayerPlan], x: np.ndarray, masks: list[np.ndarray] | None
) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
    """Apply the full stack; returns (output, per-layer inputs, per-layer pre-activations)."""
    if len(params.weights) != len(plans) or len(params.biases) != len(plans):
        raise ShapeMismatchError(0, f"params hold {len(params.weights)} layers, plans {len(plans)}")
    inputs, preacts = [], []
    last = len(plans) - 1
    for i, plan in enumerate(plans):
        _check_layer(i, plan, params.weights[i], params.biases[i], x)
        z = _affine(plan, params.weights[i], params.biases[i], x)
        inputs.append(x)
        preacts.append(z)
        if i < last:
            x = np.maximum(z, 0.0)
            if masks is not None:
                x = x * masks[i]
        else:
            x = z
    return x, inputs, preacts


def _replicate_input(batch: np.ndarray, plans: list[LayerPlan]) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2:
        raise ShapeMismatchError(0, f"batch must be 2-D, got shape {batch.shape}")
    if batch.shape[1] != plans[0].per_group_in:
        raise ShapeMismatchError(
            0, f"batch has {batch.shape[1]} features, network expects {plans[0].per_group_in}"
        )
    if not np.isfinite(batch).all():
        raise ValueError("batch contains non-finite values")
    return np.tile(batch, (1, plans[0].groups))


def forward(
    params: Params,
    plans: list[LayerPlan],
    batch: np.ndarray,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    dropout_p: float = 0.0,
    dropout_masks: list[np.ndarray] | None = None,
) -> PerEstimatorOutput:
    """Evaluate the packed network on a batch of raw feature rows.

    The input is replicated once per estimator, every layer except the last
    is followed by ReLU, and inverted dropout is applied after each
    activation when ``mode="train"`` and ``dropout_p > 0``.  ``mode="eval"``
    is deterministic and never consumes the rng.
    """
    x0 = _replicate_input(batch, plans)
    masks = _resolve_masks(plans, x0.shape[0], mode, rng, dropout_p, dropout_masks)
    y, _, _ = _run_layers(params, plans, x0, masks)
    m = plans[0].groups
    out_features = plans[-1].per_group_out
    stacked = y.reshape(-1, m, out_features)
    estimator_outputs = np.ascontiguousarray(stacked.transpose(1, 0, 2))
    mean_output = stacked.sum(axis=1) / m
    return PerEstimatorOutput(estimator_outputs=estimator_outputs, mean_output=mean_output)


def loss_and_grad(
    params: Params,
    plans: list[LayerPlan],
    batch: np.ndarray,
    targets: np.ndarray,
    mode: str = "train",
    rng: np.random.Generator | None = None,
    dropout_p: float = 0.0,
    dropout_masks: list[np.ndarray] | None = None,
) -> tuple[float, Params]:
    """MSE of the ensemble-mean prediction and its exact parameter gradients.

    loss = mean over batch rows and output channels of (mean_output - target)^2.
    Gradients are computed by backpropagation through the same dropout masks
    as the forward pass.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if len(batch) == 0:
        raise ValueError("empty batch")
    if targets.shape != (len(batch), plans[-1].per_group_out):
        raise ShapeMismatchError(
            len(plans) - 1,
            f"targets shape {targets.shape}, expected ({len(batch)}, {plans[-1].per_group_out})",
        )
    if not np.isfinite(targets).all():
        raise ValueError("targets contain non-finite values")

    x0 = _replicate_input(batch, plans)
    n = x0.shape[0]
    masks = _resolve_masks(plans, n, mode, rng, dropout_p, dropout_masks)
    y, inputs, preacts = _run_layers(params, plans, x0, masks)

    m = plans[0].groups
    out_features = plans[-1].per_group_out
    mean_output = y.reshape(n, m, out_features).sum(axis=1) / m
    diff = mean_output - targets
    loss = float(np.mean(diff * diff))

    # d loss / d mean_output, then split equally across estimators.
    dmean = (2.0 / (n * out_features)) * diff
    dy = np.tile(dmean / m, (1, m))

    grad_w: list[np.ndarray | None] = [None] * len(plans)
    grad_b: list[np.ndarray | None] = [None] * len(plans)
    upstream = dy
    for i in range(len(plans) - 1, -1, -1):
        if i < len(plans) - 1:
            if masks is not None:
                upstream = upstream * masks[i]
            upstream = upstream * (preacts[i] > 0.0)
        grad_w[i], grad_b[i], upstream = _affine_backward(plans[i], params.weights[i], inputs[i], upstream)
    return loss, Params(list(grad_w), list(grad_b))


def _header_bytes(spec: PackedSpec, plans: list[LayerPlan]) -> bytes:
    header = {
        "format_version": MODEL_FORMAT_VERSION,
        "spec": spec.to_dict(),
        "plans": [p.to_dict() for p in plans],
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_params(path, spec: PackedSpec, params: Params) -> None:
    """Write a model file: magic, header length, JSON header, raw float64 data.

    Layout (little-endian): 8-byte magic ``PKMLP1\\x00\\x00``, uint32 header
    length, UTF-8 JSON header (format version, spec fields, layer plan
    table), then per layer in order: weights in C order, then biases.
    Round-trips are bit-exact.
    """
    plans = plan_layers(spec)
    for i, plan in enumerate(plans):
        _check_layer(i, plan, params.weights[i], params.biases[i], np.empty((0, plan.in_width)))
        if not (np.isfinite(params.weights[i]).all() and np.isfinite(params.biases[i]).all()):
            raise ValueError(f"layer {i}: non-finite parameter values cannot be saved")
    header = _header_bytes(spec, plans)
    with open(path, "wb") as fh:
        fh.write(_MODEL_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for w, b in zip(params.weights, params.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_params(path) -> tuple[PackedSpec, list[LayerPlan], Params]:
    """Read a model file written by :func:`save_params` (bit-exact)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(_MODEL_MAGIC)] != _MODEL_MAGIC:
        raise ValueError(f"{path}: not a packed model file (bad magic)")
    offset = len(_MODEL_MAGIC)
    (header_len,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    header = json.loads(blob[offset : offset + header_len].decode("utf-8"))
    offset += header_len
    if header.get("format_version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {header.get('format_version')}")
    spec = PackedSpec.from_dict(header["spec"])
    plans = plan_layers(spec)
    if [p.to_dict() for p in plans] != header["plans"]:
        raise ValueError(f"{path}: layer plan table does not match the stored spec")
    weights, biases = [], []
    for plan in plans:
        n_w = plan.groups * plan.per_group_out * plan.per_group_in
        w = np.frombuffer(blob, dtype="<f8", count=n_w, offset=offset).copy()
        offset += 8 * n_w
        b = np.frombuffer(blob, dtype="<f8", count=plan.out_width, offset=offset).copy()
        offset += 8 * plan.out_width
        weights.append(w.reshape(plan.groups, plan.per_group_out, plan.per_group_in))
        biases.append(b)
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes after parameter data")
    return spec, plans, Params(weights, biases)
