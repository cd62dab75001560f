"""Reverse-mode automatic differentiation over dense numpy arrays.

A deliberately small tape engine. Every primitive application is recorded in
order, and ``Tape.backward`` replays the recordings in exact reverse order,
so gradient accumulation has a fixed floating-point evaluation order and two
backward passes over the same recording are bitwise identical.

Interior (non-leaf) tensors can be *watched*: after backward their upstream
gradient is retained in ``Tensor.grad`` alongside the parameter gradients.
Backward can also run with selected fan-in contributions blocked, which is
how single back-propagation routes are measured in isolation.

Concurrency contract: a tape and the tensors recorded on it belong to one
worker at a time. Independent tapes may run in parallel; any cross-tape
aggregation must be an ordered, deterministic reduction.
"""

from __future__ import annotations

import numpy as np

_DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Tensor shapes incompatible with an operation (names the bad dim)."""


class GraphError(RuntimeError):
    """Backward requested on an invalid loss or an off-tape tensor."""


def set_default_dtype(dtype) -> None:
    """Switch tensor precision.

    float64 is the default; float32 is an opt-in speed mode and is excluded
    from the verification commands, whose tolerances assume 64-bit.
    """
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}")
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """Dense real array with an optional gradient slot.

    ``grad``, when present, always has the same shape as ``data``. The
    common shape in this package is (batch, channel, height, width), but
    rank-2 (pooled features, logits), rank-1 (candidate weights) and rank-0
    (losses) tensors occur as well.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _Recording:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive applications.

    Invariants: inputs of every recording precede it (enforced by
    construction, recordings are appended as ops execute) and backward
    visits recordings in exact reverse recording order.
    """

    def __init__(self):
        self._recordings: list[_Recording] = []
        self._tensors: dict[int, Tensor] = {}
        self._produced: set[int] = set()
        self._watched: set[int] = set()

    def __len__(self):
        return len(self._recordings)

    def _register(self, t: Tensor) -> None:
        self._tensors.setdefault(id(t), t)

    def record(self, inputs, out_data, backward_fn, name: str | None = None) -> Tensor:
        """Append a primitive: ``backward_fn(out_grad)`` must return one
        gradient (or None) per input, aligned with ``inputs``."""
        out = Tensor(out_data, name=name)
        inputs = tuple(inputs)
        for t in inputs:
            self._register(t)
        self._register(out)
        self._produced.add(id(out))
        self._recordings.append(_Recording(inputs, out, backward_fn))
        return out

    def watch(self, t: Tensor) -> None:
        """Add ``t`` to the capture set: its upstream gradient is retained
        in ``t.grad`` after the next backward pass."""
        self._register(t)
        self._watched.add(id(t))

    def backward(self, loss: Tensor, *, blocked=None, assign: bool = True) -> dict[int, np.ndarray]:
        """Back-propagate from a scalar ``loss`` produced by this tape.

        ``blocked`` is a set of ``(id(recording_output), id(input_tensor))``
        pairs whose gradient contribution is dropped; it is used to sever
        all routes except one when measuring a single path.

        Returns the full gradient table keyed by tensor id. When ``assign``
        is true (and nothing is blocked), parameters and watched tensors
        receive their gradient in ``.grad``; repeated calls overwrite, so
        results are independent of how many times backward ran.
        """
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            raise GraphError("loss must be a scalar tensor")
        if id(loss) not in self._produced:
            raise GraphError("loss tensor was not produced by this tape")
        blocked = frozenset() if blocked is None else blocked
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self._recordings):
            g = grads.get(id(rec.output))
            if g is None:
                continue
            in_grads = rec.backward_fn(g)
            for t, ig in zip(rec.inputs, in_grads):
                if ig is None:
                    continue
                if (id(rec.output), id(t)) in blocked:
                    continue
                prev = grads.get(id(t))
                grads[id(t)] = ig if prev is None else prev + ig
        if assign and not blocked:
            for tid, t in self._tensors.items():
                if t.requires_grad or tid in self._watched:
                    g = grads.get(tid)
                    t.grad = np.zeros_like(t.data) if g is None else g
        return grads
