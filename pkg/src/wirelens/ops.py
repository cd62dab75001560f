"""Differentiable primitives recorded on a :class:`~wirelens.autodiff.Tape`.

Everything here is float64 by default, bias-free and training-mode: all
normalizers use the statistics of the current batch, which is what the
cost identities in :mod:`wirelens.certificates` rely on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import GraphError, ShapeError, Tape, Tensor

NORM_KINDS = ("batch", "instance", "layer")

# Reduction axes per normalization kind for (B, C, H, W) inputs.
_NORM_AXES = {"batch": (0, 2, 3), "instance": (2, 3), "layer": (1, 2, 3)}


@dataclass(frozen=True)
class NormConfig:
    """Normalization settings shared by every normalized site of a network.

    ``affine`` is disabled by default; when enabled, per-channel gamma/beta
    parameters are expected by :func:`normalize`.
    """

    kind: str = "batch"
    eps: float = 1e-5
    affine: bool = False

    def __post_init__(self):
        if self.kind not in NORM_KINDS:
            raise ValueError(f"unknown normalization kind {self.kind!r}")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")


def _require_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op} expects a (B, C, H, W) tensor, got shape {x.shape}")


def conv2d(tape: Tape, x: Tensor, weight: Tensor, *, stride: int = 1,
           padding: int = 0, dilation: int = 1, groups: int = 1) -> Tensor:
    """2-D cross-correlation without bias.

    Only stride 1 is supported: there are no reduction cells in this
    artifact. Grouped and dilated kernels cover the separable and dilated
    candidates.
    """
    _require_4d(x, "conv2d")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-D, got shape {weight.shape}")
    if stride != 1:
        raise ShapeError(f"conv2d stride must be 1 in this artifact, got {stride}")
    b, c_in, h, w = x.shape
    c_out, c_in_g, kh, kw = weight.shape
    if groups < 1 or c_in % groups or c_out % groups:
        raise ShapeError(
            f"channel counts (in={c_in}, out={c_out}) not divisible by groups={groups}")
    if c_in_g != c_in // groups:
        raise ShapeError(
            f"weight input-channel dim {c_in_g} != in_channels/groups = {c_in // groups}")
    h_out = h + 2 * padding - dilation * (kh - 1)
    w_out = w + 2 * padding - dilation * (kw - 1)
    if h_out <= 0 or w_out <= 0:
        raise ShapeError(
            f"spatial output {h_out}x{w_out} is empty for input {h}x{w}, "
            f"kernel {kh}x{kw}, padding {padding}, dilation {dilation}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    wd = weight.data
    t_count = kh * kw
    tap_slices = [
        (slice(i * dilation, i * dilation + h_out),
         slice(j * dilation, j * dilation + w_out))
        for i in range(kh) for j in range(kw)
    ]
    # windows: (B, C, T, H_out, W_out); one gather, reused by backward
    wins = np.stack([xp[:, :, hs, ws] for hs, ws in tap_slices], axis=2)

    def scatter(g_wins):
        g_xp = np.zeros_like(xp)
        for t, (hs, ws) in enumerate(tap_slices):
            g_xp[:, :, hs, ws] += g_wins[:, :, t]
        return g_xp[:, :, padding:padding + h, padding:padding + w]

    if groups == c_in and c_out == c_in:  # depthwise
        w_ct = wd[:, 0].reshape(c_in, t_count)
        out = np.einsum("bcthw,ct->bchw", wins, w_ct)

        def backward(g_out):
            g_w = np.einsum("bchw,bcthw->ct", g_out, wins).reshape(wd.shape)
            g_wins = g_out[:, :, None] * w_ct[None, :, :, None, None]
            return [scatter(g_wins), g_w]

    elif groups == 1:
        w2 = wd.reshape(c_out, c_in * t_count)
        wins2 = wins.reshape(b, c_in * t_count, h_out * w_out)
        out = (w2[None] @ wins2).reshape(b, c_out, h_out, w_out)

        def backward(g_out):
            g2 = g_out.reshape(b, c_out, h_out * w_out)
            g_w = np.einsum("box,bcx->oc", g2, wins2).reshape(wd.shape)
            g_wins = (w2.T[None] @ g2).reshape(b, c_in, t_count, h_out, w_out)
            return [scatter(g_wins), g_w]

    else:
        cig = c_in // groups
        cog = c_out // groups
        wg = wd.reshape(groups, cog, cig * t_count)
        wins_g = wins.reshape(b, groups, cig * t_count, h_out * w_out)
        out = np.einsum("gok,bgkx->bgox", wg, wins_g).reshape(b, c_out, h_out, w_out)

        def backward(g_out):
            g2 = g_out.reshape(b, groups, cog, h_out * w_out)
            g_w = np.einsum("bgox,bgkx->gok", g2, wins_g).reshape(wd.shape)
            g_wins = np.einsum("gok,bgox->bgkx", wg, g2).reshape(
                b, c_in, t_count, h_out, w_out)
            return [scatter(g_wins), g_w]

    return tape.record((x, weight), out, backward, name="conv2d")


def normalize(tape: Tape, x: Tensor, cfg: NormConfig,
              gamma: Tensor | None = None, beta: Tensor | None = None) -> Tensor:
    """Batch / instance / layer normalization over the current batch.

    The backward pass is the exact gradient of the computed forward,
    including the chain terms through the mean and the variance.
    """
    _require_4d(x, "normalize")
    axes = _NORM_AXES[cfg.kind]
    group = int(np.prod([x.shape[a] for a in axes]))
    if group < 2:
        raise ShapeError(
            f"{cfg.kind} normalization needs a statistics group of size >= 2, got {group}")
    mu = x.data.mean(axis=axes, keepdims=True)
    cen = x.data - mu
    var = np.mean(cen * cen, axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + cfg.eps)
    xhat = cen * inv

    if cfg.affine:
        if gamma is None or beta is None:
            raise ValueError("affine normalization requires gamma and beta")
        gb = gamma.data.reshape(1, -1, 1, 1)
        out = xhat * gb + beta.data.reshape(1, -1, 1, 1)

        def backward(g):
            g_xhat = g * gb
            dvar = np.sum(g_xhat * cen, axis=axes, keepdims=True) * (-0.5) * inv ** 3
            dmu = (-np.sum(g_xhat, axis=axes, keepdims=True) * inv
                   + dvar * (-2.0) * np.sum(cen, axis=axes, keepdims=True) / group)
            g_x = g_xhat * inv + dvar * 2.0 * cen / group + dmu / group
            g_gamma = np.sum(g * xhat, axis=(0, 2, 3))
            g_beta = np.sum(g, axis=(0, 2, 3))
            return [g_x, g_gamma, g_beta]

        return tape.record((x, gamma, beta), out, backward, name=f"norm_{cfg.kind}")

    def backward(g):
        dvar = np.sum(g * cen, axis=axes, keepdims=True) * (-0.5) * inv ** 3
        dmu = (-np.sum(g, axis=axes, keepdims=True) * inv
               + dvar * (-2.0) * np.sum(cen, axis=axes, keepdims=True) / group)
        g_x = g * inv + dvar * 2.0 * cen / group + dmu / group
        return [g_x]

    return tape.record((x,), xhat, backward, name=f"norm_{cfg.kind}")


def relu(tape: Tape, x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient at exactly 0 is 0
    return tape.record((x,), np.where(mask, x.data, 0.0),
                       lambda g: [np.where(mask, g, 0.0)], name="relu")


def _pool_geometry(x: Tensor, op: str):
    _require_4d(x, op)
    b, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError(f"{op} needs non-empty spatial dims, got {h}x{w}")
    return b, c, h, w


def max_pool3x3(tape: Tape, x: Tensor) -> Tensor:
    """3x3 max pooling, stride 1, padding 1.

    Ties go to the first maximal element in row-major window order, which
    is also row-major in input coordinates; padding never wins.
    """
    b, c, h, w = _pool_geometry(x, "max_pool3x3")
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    stacked = np.stack([xp[:, :, i:i + h, j:j + w]
                        for i in range(3) for j in range(3)])
    argk = stacked.argmax(axis=0)  # first maximal tap in row-major order
    best = np.take_along_axis(stacked, argk[None], axis=0)[0]

    def backward(g):
        g_xp = np.zeros((b, c, h + 2, w + 2), dtype=g.dtype)
        for k in range(9):
            i, j = divmod(k, 3)
            g_xp[:, :, i:i + h, j:j + w] += np.where(argk == k, g, 0.0)
        return [g_xp[:, :, 1:1 + h, 1:1 + w]]

    return tape.record((x,), best, backward, name="max_pool3x3")


def avg_pool3x3(tape: Tape, x: Tensor) -> Tensor:
    """3x3 average pooling, stride 1, padding 1.

    Padded cells are excluded from the divisor, so a constant input maps to
    the same constant everywhere.
    """
    b, c, h, w = _pool_geometry(x, "avg_pool3x3")
    ones = np.pad(np.ones((h, w)), 1)
    count = np.zeros((h, w))
    for k in range(9):
        i, j = divmod(k, 3)
        count += ones[i:i + h, j:j + w]
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    acc = np.zeros_like(x.data)
    for k in range(9):
        i, j = divmod(k, 3)
        acc += xp[:, :, i:i + h, j:j + w]
    out = acc / count

    def backward(g):
        gs = g / count
        g_xp = np.zeros((b, c, h + 2, w + 2), dtype=g.dtype)
        for k in range(9):
            i, j = divmod(k, 3)
            g_xp[:, :, i:i + h, j:j + w] += gs
        return [g_xp[:, :, 1:1 + h, 1:1 + w]]

    return tape.record((x,), out, backward, name="avg_pool3x3")


def global_avg_pool(tape: Tape, x: Tensor) -> Tensor:
    """Adaptive average pooling down to (B, C)."""
    b, c, h, w = _pool_geometry(x, "global_avg_pool")
    d = h * w

    def backward(g):
        return [np.broadcast_to((g / d)[:, :, None, None], (b, c, h, w)).copy()]

    return tape.record((x,), x.data.mean(axis=(2, 3)), backward, name="global_avg_pool")


def linear(tape: Tape, x: Tensor, weight: Tensor) -> Tensor:
    """Bias-free linear head: (B, C) @ (C, N) -> (B, N)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear expects 2-D operands, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"linear inner dims disagree: input has {x.shape[1]} features, "
            f"weight expects {weight.shape[0]}")

    def backward(g):
        return [g @ weight.data.T, x.data.T @ g]

    return tape.record((x, weight), x.data @ weight.data, backward, name="linear")


def cross_entropy_with_entropy(tape: Tape, logits: Tensor, labels) -> tuple[Tensor, float]:
    """Mean cross-entropy loss plus the mean entropy of the output.

    Returns ``(loss, entropy)``; the loss is a scalar tensor on the tape,
    the entropy is a plain float (no gradient is ever taken through it).
    Numerically stabilized by max-subtraction.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (B, N), got shape {logits.shape}")
    labels = np.asarray(labels)
    b, n = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels must have shape ({b},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= n:
        raise ValueError(
            f"label out of range [0, {n}): found {int(labels.min())}..{int(labels.max())}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    p = np.exp(logp)
    loss_val = -logp[np.arange(b), labels].mean()
    entropy = float(-(p * logp).sum(axis=1).mean())
    onehot = np.zeros_like(p)
    onehot[np.arange(b), labels] = 1.0

    def backward(g):
        return [(p - onehot) * (g / b)]

    loss = tape.record((logits,), np.asarray(loss_val), backward, name="cross_entropy")
    return loss, entropy


def softmax_vec(tape: Tape, v: Tensor, temperature: float = 1.0) -> Tensor:
    """Softmax of a 1-D logit vector at the given temperature."""
    if v.ndim != 1:
        raise ShapeError(f"softmax_vec expects a 1-D vector, got shape {v.shape}")
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = v.data / temperature
    z = z - z.max()
    e = np.exp(z)
    s = e / e.sum()

    def backward(g):
        return [s * (g - np.dot(g, s)) / temperature]

    return tape.record((v,), s, backward, name="softmax_vec")


def weighted_sum(tape: Tape, parts: list[Tensor], weights: Tensor) -> Tensor:
    """Mixture sum(w_k * parts[k]).

    The gradient w.r.t. ``weights`` is the per-candidate contraction
    <upstream grad, parts[k]>, which is exactly the per-candidate cost
    vector used by the attention-style architecture gradients.
    """
    k = len(parts)
    if weights.ndim != 1 or weights.size != k:
        raise ShapeError(f"weights must be a vector of length {k}, got shape {weights.shape}")
    shape = parts[0].shape
    for idx, t in enumerate(parts):
        if t.shape != shape:
            raise ShapeError(f"part {idx} has shape {t.shape}, expected {shape}")
    out = np.zeros(shape, dtype=parts[0].data.dtype)
    for i in range(k):
        out += weights.data[i] * parts[i].data

    def backward(g):
        gs = [g * weights.data[i] for i in range(k)]
        gw = np.array([np.vdot(g, parts[i].data) for i in range(k)])
        return gs + [gw]

    return tape.record((*parts, weights), out, backward, name="weighted_sum")


def add_n(tape: Tape, parts: list[Tensor]) -> Tensor:
    """Sum of same-shape tensors; fan-in junction for cell nodes."""
    shape = parts[0].shape
    for idx, t in enumerate(parts):
        if t.shape != shape:
            raise ShapeError(f"operand {idx} has shape {t.shape}, expected {shape}")
    out = parts[0].data.copy()
    for t in parts[1:]:
        out += t.data
    return tape.record(tuple(parts), out, lambda g: [g] * len(parts), name="add_n")


def concat_channels(tape: Tape, parts: list[Tensor]) -> Tensor:
    """Concatenate along the channel axis (cell output node)."""
    for t in parts:
        _require_4d(t, "concat_channels")
    sizes = [t.shape[1] for t in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return np.split(g, splits, axis=1)

    return tape.record(tuple(parts), np.concatenate([t.data for t in parts], axis=1),
                       backward, name="concat_channels")


def identity(tape: Tape, x: Tensor) -> Tensor:
    """Explicit copy; gives skip connections and cell inputs their own node."""
    return tape.record((x,), x.data.copy(), lambda g: [g], name="identity")


def scale(tape: Tape, x: Tensor, factor: float) -> Tensor:
    return tape.record((x,), x.data * factor, lambda g: [g * factor], name="scale")


def add_const(tape: Tape, x: Tensor, const: np.ndarray) -> Tensor:
    return tape.record((x,), x.data + const, lambda g: [g], name="add_const")


def sum_all(tape: Tape, x: Tensor) -> Tensor:
    shape = x.shape
    return tape.record((x,), np.asarray(x.data.sum()),
                       lambda g: [np.broadcast_to(g, shape).copy()], name="sum_all")


def multiply(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"multiply operands disagree: {a.shape} vs {b.shape}")
    return tape.record((a, b), a.data * b.data,
                       lambda g: [g * b.data, g * a.data], name="multiply")
