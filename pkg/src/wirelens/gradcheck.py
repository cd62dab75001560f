"""Central finite-difference checks for the analytic backward passes.

The numeric side perturbs leaf data in place and re-runs the forward, so it
is independent of the tape's backward code path.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .autodiff import Tape, Tensor


def numeric_grad_entry(run_loss, tensor: Tensor, flat_index: int, step: float = 1e-5) -> float:
    """Central difference d(loss)/d(tensor.flat[flat_index])."""
    old = tensor.data.flat[flat_index]
    tensor.data.flat[flat_index] = old + step
    f_plus = run_loss()
    tensor.data.flat[flat_index] = old - step
    f_minus = run_loss()
    tensor.data.flat[flat_index] = old
    return (f_plus - f_minus) / (2.0 * step)


def max_rel_error(build, leaves, *, n_coords: int = 10, seed: int = 0,
                  step: float = 1e-5, floor: float = 1e-6) -> float:
    """Worst relative disagreement between analytic and numeric gradients.

    ``build()`` must run a fresh forward pass over the (shared) ``leaves``
    and return ``(tape, loss_tensor)``. ``n_coords`` coordinates of every
    leaf are probed.
    """
    tape, loss = build()
    tape.backward(loss)
    analytic = {id(t): t.grad.copy() for t in leaves}

    def run_loss():
        return float(build()[1].data)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in leaves:
        n = min(n_coords, t.data.size)
        picks = rng.choice(t.data.size, size=n, replace=False)
        for idx in picks:
            a = analytic[id(t)].flat[idx]
            num = numeric_grad_entry(run_loss, t, idx, step=step)
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    return worst


def _rand(rng, shape):
    return rng.uniform(-1.0, 1.0, size=shape)


def primitive_gradcheck(name: str, seed: int = 0) -> float:
    """Finite-difference check of one primitive on random [-1, 1] inputs.

    Returns the max relative error over sampled coordinates; the scalar
    objective is sum(op(x) * r) with a fixed random probe r so every output
    entry participates.
    """
    rng = np.random.default_rng(seed)
    b, c, h, w = 3, 4, 6, 6

    if name == "conv2d":
        x = Tensor(_rand(rng, (b, c, h, w)), requires_grad=True)
        wt = Tensor(_rand(rng, (c, c, 3, 3)), requires_grad=True)
        probe = _rand(rng, (b, c, h, w))
        build = _probe_build(lambda t: ops.conv2d(t, x, wt, padding=1), probe)
        return max_rel_error(build, [x, wt], seed=seed)
    if name == "conv2d_grouped":
        x = Tensor(_rand(rng, (b, c, h, w)), requires_grad=True)
        wt = Tensor(_rand(rng, (c, 1, 3, 3)), requires_grad=True)
        probe = _rand(rng, (b, c, h, w))
        build = _probe_build(lambda t: ops.conv2d(t, x, wt, padding=1, groups=c), probe)
        return max_rel_error(build, [x, wt], seed=seed)
    if name == "conv2d_dilated":
        x = Tensor(_rand(rng, (b, c, h, w)), requires_grad=True)
        wt = Tensor(_rand(rng, (c, c, 3, 3)), requires_grad=True)
        probe = _rand(rng, (b, c, h, w))
        build = _probe_build(lambda t: ops.conv2d(t, x, wt, padding=2, dilation=2), probe)
        return max_rel_error(build, [x, wt], seed=seed)
    if name in ("normalize_batch", "normalize_instance", "normalize_layer"):
        kind = name.split("_", 1)[1]
        cfg = ops.NormConfig(kind=kind, eps=1e-5)
        x = Tensor(_rand(rng, (b, c, h, w)), requires_grad=True)
        probe = _rand(rng, (b, c, h, w))
        build = _probe_build(lambda t: ops.normalize(t, x, cfg), probe)
        return max_rel_error(build, [x], seed=seed)
    if name == "normalize_affine":
        cfg = ops.NormConfig(kind="batch", eps=1e-5, affine=True)
        x = Tensor(_rand(rng, (b, c, h, w)), requires_grad=True)
        gamma = Tensor(1.0 + 0.1 * _rand(rng, (c,)), requires_grad=True)
        beta = Tensor(0.1 * _rand(rng, (c,)), requires_grad=True)
        probe = _rand(rng, (b, c, h, w))
        build = _probe_build(lambda t: ops.normalize(t, x, cfg, gamma, beta), probe)
        return max_rel_error(build, [x, gamma, beta], seed=seed)
    if name == "relu":
        x = Tensor(_rand(rng, (b, c, h, w)), requires_grad=True)
        probe = _rand(rng, (b, c, h, w))
        build = _probe_build(lambda t: ops.relu(t, x), probe)
        return max_rel_error(build, [x], seed=seed)
    if name == "max_pool3x3":
        x = Tensor(_rand(rng, (b, c, h, w)), requires_grad=True)
        probe = _rand(rng, (b, c, h, w))
        build = _probe_build(lambda t: ops.max_pool3x3(t, x), probe)
        return max_rel_error(build, [x], seed=seed)
    if name == "avg_pool3x3":
        x = Tensor(_rand(rng, (b, c, h, w)), requires_grad=True)
        probe = _rand(rng, (b, c, h, w))
        build = _probe_build(lambda t: ops.avg_pool3x3(t, x), probe)
        return max_rel_error(build, [x], seed=seed)
    if name == "global_avg_pool":
        x = Tensor(_rand(rng, (b, c, h, w)), requires_grad=True)
        probe = _rand(rng, (b, c))
        build = _probe_build(lambda t: ops.global_avg_pool(t, x), probe)
        return max_rel_error(build, [x], seed=seed)
    if name == "linear":
        x = Tensor(_rand(rng, (b, c)), requires_grad=True)
        wt = Tensor(_rand(rng, (c, 5)), requires_grad=True)
        probe = _rand(rng, (b, 5))
        build = _probe_build(lambda t: ops.linear(t, x, wt), probe)
        return max_rel_error(build, [x, wt], seed=seed)
    if name == "cross_entropy":
        x = Tensor(_rand(rng, (b, 5)), requires_grad=True)
        labels = rng.integers(0, 5, size=b)

        def build():
            tape = Tape()
            loss, _ = ops.cross_entropy_with_entropy(tape, x, labels)
            return tape, loss

        return max_rel_error(build, [x], seed=seed)
    if name == "softmax_vec":
        v = Tensor(_rand(rng, (8,)), requires_grad=True)
        probe = _rand(rng, (8,))
        build = _probe_build(lambda t: ops.softmax_vec(t, v, 0.7), probe)
        return max_rel_error(build, [v], seed=seed)
    if name == "weighted_sum":
        parts = [Tensor(_rand(rng, (b, c, h, w)), requires_grad=True) for _ in range(3)]
        wv = Tensor(_rand(rng, (3,)), requires_grad=True)
        probe = _rand(rng, (b, c, h, w))
        build = _probe_build(lambda t: ops.weighted_sum(t, parts, wv), probe)
        return max_rel_error(build, parts + [wv], seed=seed)
    raise ValueError(f"unknown primitive {name!r}")


def _probe_build(apply_op, probe):
    """Reduce an op output to a scalar via a fixed random probe."""

    def build():
        tape = Tape()
        out = apply_op(tape)
        pt = Tensor(probe)
        return tape, ops.sum_all(tape, ops.multiply(tape, out, pt))

    return build


PRIMITIVES = (
    "conv2d", "conv2d_grouped", "conv2d_dilated",
    "normalize_batch", "normalize_instance", "normalize_layer", "normalize_affine",
    "relu", "max_pool3x3", "avg_pool3x3", "global_avg_pool",
    "linear", "cross_entropy", "softmax_vec", "weighted_sum",
)


def full_cell_gradcheck(seed: int = 0, *, n_coords: int = 10) -> float:
    """Finite-difference check of the full minimal-cell loss with respect
    to every parameter class (stem, edge convolutions, head)."""
    from .cells import Network, NetworkSpec, build_minimal_cell
    from .datasets import synth_dataset

    rng = np.random.default_rng(seed)
    spec = NetworkSpec(cells=(build_minimal_cell(),), stem_channels=4,
                       num_classes=5, image_size=(6, 6))
    net = Network(spec, seed=seed)
    data = synth_dataset(5, (3, 6, 6), 12, 1.0, seed=seed)
    x, labels = data.images, data.labels
    # one-hot sample covering conv, pool, and skip candidates
    sel = {(0, (0, 2)): 4, (0, (1, 2)): 5, (0, (0, 3)): 2,
           (0, (1, 3)): 1, (0, (2, 3)): 7}

    def build():
        trace = net.forward(x, sel)
        loss, _ = net.loss(trace, labels)
        return trace.tape, loss

    leaves = [net.params[name] for name in (
        "stem.conv",
        "cell0.edge0-2.sep_conv_3x3.conv",
        "cell0.edge1-2.dil_conv_3x3.conv",
        "cell0.edge2-3.sep_conv_5x5.conv",
        "head.linear",
    )]
    return max_rel_error(build, leaves, n_coords=n_coords, seed=seed)
