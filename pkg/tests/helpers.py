"""Shared test oracles: dense reference MLP, finite differences, naive ranks,
block-diagonal materialization, and small dataset builders.

Everything here is deliberately independent of the library's gradient and
rank code paths: the dense network is written from first principles, ranks
are computed by O(n^2) counting, and gradients come from central differences
of the loss value alone.
"""

import numpy as np

from packedflow.data import CylinderFlowConfig, Dataset, Simulation, generate_cylinder_flow
from packedflow.packed_net import _affine, forward

# ---------------------------------------------------------------------------
# Dense reference MLP (plain matrices, ReLU, mean-squared loss)
# ---------------------------------------------------------------------------


def dense_forward(weights, biases, x):
    """Plain MLP forward: ReLU after every layer except the last."""
    a = x
    for i, (w, b) in enumerate(zip(weights, biases)):
        z = a @ w.T + b
        a = np.maximum(z, 0.0) if i < len(weights) - 1 else z
    return a


def dense_loss_and_grads(weights, biases, x, y):
    """Loss mean((out - y)^2) with hand-derived backprop for the dense MLP."""
    acts = [x]
    preacts = []
    a = x
    for i, (w, b) in enumerate(zip(weights, biases)):
        z = a @ w.T + b
        preacts.append(z)
        a = np.maximum(z, 0.0) if i < len(weights) - 1 else z
        acts.append(a)
    n, c = y.shape
    diff = a - y
    loss = float(np.mean(diff * diff))
    dz = 2.0 * diff / (n * c)
    grad_w = [None] * len(weights)
    grad_b = [None] * len(weights)
    for i in range(len(weights) - 1, -1, -1):
        grad_w[i] = dz.T @ acts[i]
        grad_b[i] = dz.sum(axis=0)
        if i > 0:
            dz = (dz @ weights[i]) * (preacts[i - 1] > 0.0)
    return loss, grad_w, grad_b


def block_diagonal_matrix(plan, blocks):
    """Materialize a grouped layer's dense (out_width, in_width) matrix."""
    dense = np.zeros((plan.out_width, plan.in_width))
    for g in range(plan.groups):
        rows = slice(g * plan.per_group_out, (g + 1) * plan.per_group_out)
        cols = slice(g * plan.per_group_in, (g + 1) * plan.per_group_in)
        dense[rows, cols] = blocks[g]
    return dense


# ---------------------------------------------------------------------------
# Finite-difference gradients
# ---------------------------------------------------------------------------


def ensemble_loss(params, plans, x, y, masks=None):
    """Loss recomputed from the forward pass only (no backprop code involved)."""
    out = forward(params, plans, x, mode="train", dropout_masks=masks)
    diff = out.mean_output - y
    return float(np.mean(diff * diff))


def fd_gradients(params, plans, x, y, masks=None, step=1e-3):
    """Central-difference gradients of the ensemble loss for every parameter."""
    grad_w, grad_b = [], []
    for layer in range(len(plans)):
        for store, arr in ((grad_w, params.weights[layer]), (grad_b, params.biases[layer])):
            grads = np.empty_like(arr)
            flat, gflat = arr.ravel(), grads.ravel()
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                loss_plus = ensemble_loss(params, plans, x, y, masks)
                flat[i] = orig - step
                loss_minus = ensemble_loss(params, plans, x, y, masks)
                flat[i] = orig
                gflat[i] = (loss_plus - loss_minus) / (2.0 * step)
            store.append(grads)
    return grad_w, grad_b


def relative_error(a, b):
    """|a - b| / max(|a|, |b|, 1): relative for large entries, absolute near zero."""
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)


def nudge_biases_off_kinks(params, plans, batch, masks=None, margin=0.25):
    """Shift biases so every ReLU pre-activation sits >= margin away from zero.

    Finite differences with step 1e-3 are only valid where no pre-activation
    changes sign inside the sweep; this keeps the units genuinely mixed
    (active and inactive rows) while guaranteeing that margin.  Mutates and
    returns params.
    """
    x = np.tile(batch, (1, plans[0].groups))
    for i, plan in enumerate(plans[:-1]):
        z = _affine(plan, params.weights[i], params.biases[i], x)
        for unit in range(plan.out_width):
            col = np.sort(z[:, unit])
            gaps = np.diff(col)
            widest = int(np.argmax(gaps)) if len(gaps) else 0
            if len(gaps) and gaps[widest] >= 2.5 * margin:
                shift = -0.5 * (col[widest] + col[widest + 1])
            else:
                shift = margin - col[0]
            params.biases[i][unit] += shift
            z[:, unit] += shift
        assert np.abs(z).min() >= margin * 0.99
        x = np.maximum(z, 0.0)
        if masks is not None:
            x = x * masks[i]
    return params


# ---------------------------------------------------------------------------
# Naive rank statistics
# ---------------------------------------------------------------------------


def naive_average_ranks(values):
    """O(n^2) fractional ranks: 1 + #smaller + (#equal - 1) / 2."""
    values = np.asarray(values, dtype=np.float64)
    ranks = np.empty(len(values))
    for i, v in enumerate(values):
        smaller = int((values < v).sum())
        equal = int((values == v).sum())
        ranks[i] = 1.0 + smaller + 0.5 * (equal - 1)
    return ranks


def naive_spearman(xs, ys):
    rx = naive_average_ranks(xs)
    ry = naive_average_ranks(ys)
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    return float((dx * dy).sum() / np.sqrt((dx * dx).sum() * (dy * dy).sum()))


# ---------------------------------------------------------------------------
# Small valid datasets
# ---------------------------------------------------------------------------


def field_simulation(name, num_points, seed, inlet=(10.0, 0.0)):
    """A valid off-surface simulation with random smooth-ish values."""
    rng = np.random.default_rng(seed)
    points = np.zeros((num_points, 7))
    points[:, 0:2] = rng.uniform(-2.0, 2.0, size=(num_points, 2))
    points[:, 2] = inlet[0]
    points[:, 3] = inlet[1]
    points[:, 4] = rng.uniform(0.1, 3.0, size=num_points)
    targets = rng.normal(size=(num_points, 4))
    return Simulation(name=name, points=points, targets=targets)


def field_dataset(num_sims, num_points=8, seed=0, split_label="train"):
    sims = tuple(
        field_simulation(f"{split_label}_{i:03d}", num_points, seed + i) for i in range(num_sims)
    )
    return Dataset(simulations=sims, split_label=split_label)


def cylinder_dataset(
    num_sims,
    surface_points=32,
    field_points=32,
    seed=0,
    circulation=(-4.0, 4.0),
    radius=(0.5, 1.0),
    speed=(5.0, 15.0),
    ood=False,
    split_label=None,
):
    if isinstance(circulation, (int, float)):
        circulation = (float(circulation), float(circulation))
    if isinstance(radius, (int, float)):
        radius = (float(radius), float(radius))
    if isinstance(speed, (int, float)):
        speed = (float(speed), float(speed))
    config = CylinderFlowConfig(
        num_sims=num_sims,
        surface_points=surface_points,
        field_points=field_points,
        radius_range=radius,
        inlet_speed_range=speed,
        circulation_range=circulation,
        seed=seed,
        ood=ood,
    )
    return generate_cylinder_flow(config, split_label=split_label)


def linear_target_dataset(num_sims=4, num_points=200, seed=0):
    """Targets are a fixed affine map of the features: exactly learnable."""
    rng = np.random.default_rng(seed)
    matrix = rng.normal(size=(4, 7))
    offset = rng.normal(size=4)
    sims = []
    for i in range(num_sims):
        base = field_simulation(f"linear_{i:03d}", num_points, seed + 10 + i)
        targets = base.points @ matrix.T + offset
        sims.append(Simulation(name=base.name, points=base.points, targets=targets))
    return Dataset(simulations=tuple(sims), split_label="train")
