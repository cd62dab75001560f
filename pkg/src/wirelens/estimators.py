"""Architecture distribution state, samplers, and gradient estimators.

Four estimator flavors share one local view: each edge's selection enters
the loss through a weight vector, and the estimator differs only in how
that vector is produced (deterministic softmax, gumbel softmax, or one-hot
sampling) and in how the per-candidate cost is turned into a logit
gradient. The cost is always treated as a constant with respect to the
architecture parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .ops import softmax_vec

EdgeKey = tuple[int, tuple[int, int]]

FRAMEWORKS = ("snas", "dsnas", "darts", "proxyless")


def _softmax(v: np.ndarray) -> np.ndarray:
    z = v - v.max()
    e = np.exp(z)
    return e / e.sum()


@dataclass
class ArchState:
    """Per-edge candidate logits plus the sampling temperature.

    Each edge owns an independent seeded stream, so adding or removing
    edges never perturbs the draws of the others. Mutation is
    single-writer; read-only snapshots may be shared across workers.
    """

    logits: dict[EdgeKey, np.ndarray]
    temperature: float = 1.0
    seed: int = 0
    _rngs: dict[EdgeKey, np.random.Generator] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        for key, v in self.logits.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"non-finite logits on edge {key}")

    @staticmethod
    def uniform(netspec, seed: int = 0, temperature: float = 1.0) -> "ArchState":
        """All-zero logits: an exact uniform start over every candidate."""
        logits = {}
        for cell, edge in netspec.sampled_edges():
            k = len(netspec.candidate_names(cell, edge))
            logits[(cell, edge)] = np.zeros(k)
        return ArchState(logits=logits, temperature=temperature, seed=seed)

    def rng_for(self, key: EdgeKey) -> np.random.Generator:
        if key not in self._rngs:
            cell, (i, j) = key
            seq = np.random.SeedSequence((self.seed, cell, i, j))
            self._rngs[key] = np.random.Generator(np.random.PCG64(seq))
        return self._rngs[key]

    def probabilities(self) -> dict[EdgeKey, np.ndarray]:
        return {k: _softmax(v) for k, v in sorted(self.logits.items())}

    def snapshot(self) -> dict[EdgeKey, np.ndarray]:
        return {k: v.copy() for k, v in sorted(self.logits.items())}


@dataclass
class ArchSample:
    """Strictly one-hot selection per edge (stored as candidate indices)."""

    selections: dict[EdgeKey, int]

    def one_hot(self, key: EdgeKey, k: int) -> np.ndarray:
        v = np.zeros(k)
        v[self.selections[key]] = 1.0
        return v


@dataclass
class RelaxedSample:
    """Simplex-valued selection per edge.

    ``kind`` is "darts" for the deterministic softmax weights and "gumbel"
    for gumbel-softmax draws (whose gumbel noise is kept for reuse).
    """

    weights: dict[EdgeKey, np.ndarray]
    kind: str
    temperature: float
    gumbels: dict[EdgeKey, np.ndarray] | None = None


def darts_weights(arch: ArchState) -> RelaxedSample:
    """Deterministic softmax weights; the attention-style relaxation.

    Temperature is pinned at 1 in this mode.
    """
    weights = {k: _softmax(v) for k, v in sorted(arch.logits.items())}
    return RelaxedSample(weights=weights, kind="darts", temperature=1.0)


def sample_gumbel_softmax(arch: ArchState) -> RelaxedSample:
    """Softened one-hot draw per edge via the gumbel-softmax."""
    weights = {}
    gumbels = {}
    for key, logit in sorted(arch.logits.items()):
        rng = arch.rng_for(key)
        u = rng.uniform(size=logit.shape)
        g = -np.log(-np.log(u))
        weights[key] = _softmax((logit + g) / arch.temperature)
        gumbels[key] = g
    return RelaxedSample(weights=weights, kind="gumbel",
                         temperature=arch.temperature, gumbels=gumbels)


def sample_discrete(arch: ArchState, uniform: bool = False) -> ArchSample:
    """One-hot draw per edge; ``uniform`` ignores the logits entirely."""
    selections = {}
    for key, logit in sorted(arch.logits.items()):
        rng = arch.rng_for(key)
        k = logit.size
        if uniform:
            selections[key] = int(rng.integers(k))
        else:
            selections[key] = int(rng.choice(k, p=_softmax(logit)))
    return ArchSample(selections=selections)


def pathwise_weight_builder(arch: ArchState, sample: RelaxedSample):
    """Selection callables that rebuild each edge's gumbel softmax on the
    forward tape, so backward reaches the logits end to end."""
    if sample.kind != "gumbel" or sample.gumbels is None:
        raise ValueError("pathwise weights need a gumbel relaxed sample")
    builders = {}
    leaves: dict[EdgeKey, Tensor] = {}

    def make(key):
        def build(tape):
            leaf = Tensor(arch.logits[key].copy(), requires_grad=True,
                          name=f"logits{key}")
            leaves[key] = leaf
            from .ops import add_const
            shifted = add_const(tape, leaf, sample.gumbels[key])
            return softmax_vec(tape, shifted, sample.temperature)
        return build

    for key in sorted(arch.logits):
        builders[key] = make(key)
    return builders, leaves


def arch_grad(framework: str, cost, sample, arch: ArchState) -> dict[EdgeKey, np.ndarray]:
    """Per-logit gradient of the expected cost for one observed sample.

    cost is per edge: a scalar (the sampled candidate's cost) for the
    score-function estimator, or a per-candidate vector (the contraction of
    the loss gradient with each candidate's output) for the others.
    """
    if framework not in FRAMEWORKS:
        raise ValueError(f"unknown framework {framework!r}")
    grads: dict[EdgeKey, np.ndarray] = {}
    if framework == "dsnas":
        if not isinstance(sample, ArchSample):
            raise TypeError("dsnas expects a one-hot sample")
        for key in sorted(arch.logits):
            p = _softmax(arch.logits[key])
            onehot = sample.one_hot(key, p.size)
            grads[key] = (onehot - p) * float(cost[key])
        return grads
    if framework == "darts":
        if not (isinstance(sample, RelaxedSample) and sample.kind == "darts"):
            raise TypeError("darts expects deterministic relaxed weights")
        for key in sorted(arch.logits):
            z = sample.weights[key]
            c = np.asarray(cost[key])
            grads[key] = z * (c - np.dot(z, c))
        return grads
    if framework == "proxyless":
        if not isinstance(sample, ArchSample):
            raise TypeError("proxyless expects a one-hot sample")
        for key in sorted(arch.logits):
            z = _softmax(arch.logits[key])
            c = np.asarray(cost[key])
            grads[key] = z * (c - np.dot(z, c))
        return grads
    # snas: pathwise gradient through the gumbel softmax
    if not (isinstance(sample, RelaxedSample) and sample.kind == "gumbel"):
        raise TypeError("snas expects a gumbel relaxed sample")
    lam = sample.temperature
    for key in sorted(arch.logits):
        z = sample.weights[key]
        c = np.asarray(cost[key])
        grads[key] = z * (c - np.dot(z, c)) / lam
    return grads


class SGD:
    """Plain or momentum SGD; only keys present in the gradient dict move."""

    def __init__(self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity: dict = {}

    def step(self, params, grads) -> None:
        for key in sorted(grads, key=repr):
            g = np.asarray(grads[key])
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {key!r}")
            p = params[key]
            data = p.data if isinstance(p, Tensor) else p
            if self.weight_decay:
                g = g + self.weight_decay * data
            if self.momentum:
                v = self._velocity.get(key)
                v = g.copy() if v is None else self.momentum * v + g
                self._velocity[key] = v
                data -= self.lr * v
            else:
                data -= self.lr * g


class Adam:
    """Standard Adam with bias correction."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self._m: dict = {}
        self._v: dict = {}
        self._t: dict = {}

    def step(self, params, grads) -> None:
        for key in sorted(grads, key=repr):
            g = np.asarray(grads[key])
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {key!r}")
            p = params[key]
            data = p.data if isinstance(p, Tensor) else p
            if self.weight_decay:
                g = g + self.weight_decay * data
            t = self._t.get(key, 0) + 1
            m = self._m.get(key, np.zeros_like(g))
            v = self._v.get(key, np.zeros_like(g))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self._t[key] = t
            self._m[key] = m
            self._v[key] = v
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(cfg: dict):
    algo = cfg.get("algo", "sgd")
    if algo == "sgd":
        return SGD(lr=float(cfg["lr"]), momentum=float(cfg.get("momentum", 0.0)),
                   weight_decay=float(cfg.get("weight_decay", 0.0)))
    if algo == "adam":
        return Adam(lr=float(cfg["lr"]), weight_decay=float(cfg.get("weight_decay", 0.0)))
    raise ValueError(f"unknown optimizer {algo!r}")
