"""Per-edge architecture cost: contraction of the loss gradient at an
edge's feature map with that feature map.

The sign of this local quantity is what drives edge survival during
search: the ``none`` candidate always costs exactly zero, so an edge whose
other candidates carry positive cost drifts toward deletion and recovers
only once its cost turns negative.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import GraphError, Tensor
from .cells import Edge, Network, Trace
from .estimators import ArchState, sample_discrete


@dataclass
class CostRecord:
    cell: int
    edge: Edge
    candidate: int
    cost: float
    epoch: int
    batch: int


@dataclass
class Decomposition:
    """Output-edge cost split: cost equals loss minus output entropy."""

    C: float
    L: float
    H: float

    @property
    def residual(self) -> float:
        return abs(self.C - (self.L - self.H))


class CostStats:
    """Streaming per-(cell, edge, candidate) mean and variance.

    Uses mergeable (count, mean, M2) accumulators, so samples can be
    collected on independent replicas and combined afterwards; merge order
    changes results only at rounding level.
    """

    def __init__(self):
        self._acc: dict[tuple[int, Edge, int], tuple[int, float, float]] = {}

    def add(self, cell: int, edge: Edge, candidate: int, value: float) -> None:
        key = (cell, edge, candidate)
        n, mean, m2 = self._acc.get(key, (0, 0.0, 0.0))
        n += 1
        delta = value - mean
        mean += delta / n
        m2 += delta * (value - mean)
        self._acc[key] = (n, mean, m2)

    def merge(self, other: "CostStats") -> "CostStats":
        out = CostStats()
        keys = sorted(set(self._acc) | set(other._acc))
        for key in keys:
            n1, mean1, m21 = self._acc.get(key, (0, 0.0, 0.0))
            n2, mean2, m22 = other._acc.get(key, (0, 0.0, 0.0))
            n = n1 + n2
            if n == 0:
                continue
            delta = mean2 - mean1
            mean = mean1 + delta * n2 / n
            m2 = m21 + m22 + delta * delta * n1 * n2 / n
            out._acc[key] = (n, mean, m2)
        return out

    def count(self, cell: int, edge: Edge, candidate: int) -> int:
        return self._acc.get((cell, edge, candidate), (0, 0.0, 0.0))[0]

    def mean(self, cell: int, edge: Edge, candidate: int) -> float:
        n, mean, _ = self._acc[(cell, edge, candidate)]
        if n == 0:
            raise KeyError("no samples recorded")
        return mean

    def variance(self, cell: int, edge: Edge, candidate: int) -> float:
        n, _, m2 = self._acc[(cell, edge, candidate)]
        return m2 / n if n else 0.0

    def edge_mean(self, cell: int, edge: Edge) -> float:
        """Mean over every recorded sample of an edge, all candidates."""
        total = 0.0
        n_total = 0
        for (c, e, _), (n, mean, _) in sorted(self._acc.items()):
            if c == cell and e == edge:
                total += mean * n
                n_total += n
        if n_total == 0:
            raise KeyError(f"no samples for cell {cell} edge {edge}")
        return total / n_total

    def rows(self):
        """Sorted ``(cell, edge, candidate, mean, variance, count)`` rows."""
        out = []
        for (cell, edge, cand), (n, mean, m2) in sorted(self._acc.items()):
            out.append((cell, edge, cand, mean, m2 / n if n else 0.0, n))
        return out


def edge_cost(trace: Trace, cell: int, edge: Edge) -> float:
    """Full contraction of the captured gradient with the captured
    feature map of one edge; ``none`` edges cost exactly 0.0."""
    name = trace.op_name(cell, edge)
    if name == "none":
        return 0.0
    act = trace.activation(cell, edge)
    if act.tensor.grad is None:
        raise GraphError(
            f"edge ({cell}, {edge}) has no captured gradient; run forward with "
            "capture=True and call backward first")
    return float(np.vdot(act.tensor.grad, act.tensor.data))


def all_edge_costs(trace: Trace) -> dict[tuple[int, Edge], float]:
    out = {}
    for act in trace.activations:
        out[(act.cell, act.edge)] = edge_cost(trace, act.cell, act.edge)
    return out


def output_edge_costs(trace: Trace, cell: int) -> dict[int, float]:
    """Cost of every output edge of one cell: the captured cell-output
    gradient sliced per surviving node, contracted with the node value."""
    out_t = trace.cell_outputs[cell]
    if out_t.grad is None:
        raise GraphError("cell output has no captured gradient; capture and backward first")
    spec = trace.spec.cells[cell]
    chans = trace.nodes[(cell, spec.intermediate_nodes[0])].shape[1]
    costs = {}
    for slot, j in enumerate(spec.surviving_intermediates()):
        g = out_t.grad[:, slot * chans:(slot + 1) * chans]
        costs[j] = float(np.vdot(g, trace.nodes[(cell, j)].data))
    return costs


def cell_cost_sum(trace: Trace, cell: int) -> float:
    return sum(edge_cost(trace, cell, e) for e in trace.spec.cells[cell].op_edges())


def decompose_output_cost(net: Network, batch, sample, *,
                          with_activation_form: bool = False):
    """Loss, output entropy, and the output-edge cost of the last cell.

    The cost is computed in logit form: mean over the batch of
    ``sum_n p_n * y_n - y_label``. When ``with_activation_form`` is set the
    gradient-contraction form is returned alongside for cross-checking.
    """
    x, labels = batch
    trace = net.forward(x, _selection_dict(sample), capture=with_activation_form)
    loss, entropy = net.loss(trace, labels, backward=with_activation_form)
    y = trace.logits.data
    z = y - y.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    b = y.shape[0]
    c_logit = float(np.mean((p * y).sum(axis=1) - y[np.arange(b), labels]))
    decomp = Decomposition(C=c_logit, L=float(loss.data), H=entropy)
    if not with_activation_form:
        return decomp
    c_act = float(np.vdot(trace.cell_outputs[-1].grad, trace.cell_outputs[-1].data))
    return decomp, c_act, trace


def _selection_dict(sample):
    if hasattr(sample, "selections"):
        return sample.selections
    if hasattr(sample, "weights"):
        return sample.weights
    return sample


def monte_carlo_cost(net: Network, dataset, epochs: int, seed: int = 0,
                     batch_size: int = 64) -> CostStats:
    """Uniform sub-network sampling with frozen weights.

    Each batch samples a fresh one-hot architecture, back-propagates the
    loss, and records the sampled candidate's cost at every edge.
    Aggregation is a single deterministic stream; use
    :meth:`CostStats.merge` for parallel replicas.
    """
    if len(dataset.labels) == 0:
        raise ValueError("empty dataset")
    arch = ArchState.uniform(net.spec, seed=seed)
    order_rng = np.random.default_rng(seed)
    stats = CostStats()
    n = len(dataset.labels)
    for epoch in range(epochs):
        perm = order_rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            if idx.size < 2:
                continue
            sample = sample_discrete(arch, uniform=True)
            trace = net.forward(dataset.images[idx], sample.selections, capture=True)
            net.loss(trace, dataset.labels[idx], backward=True)
            for key, cand in sorted(sample.selections.items()):
                cell, edge = key
                stats.add(cell, edge, cand, edge_cost(trace, cell, edge))
    return stats


def candidate_cost_vector(net: Network, trace: Trace, cell: int, edge: Edge) -> np.ndarray:
    """Contraction of the edge-output gradient with every candidate's
    output at the current edge input (the BinaryConnect-style probe used
    when only one candidate was materialized in the forward pass)."""
    act = trace.activation(cell, edge)
    if act.tensor.grad is None:
        raise GraphError("candidate probe needs a captured edge gradient")
    g = act.tensor.grad
    x_node = trace.nodes[(cell, edge[0])].data
    names = trace.spec.candidate_names(cell, edge)
    out = np.zeros(len(names))
    for k, name in enumerate(names):
        if name == "none":
            continue
        out[k] = float(np.vdot(g, net.candidate_output(x_node, cell, edge, name)))
    return out


def path_cost_term(trace: Trace, loss: Tensor, path, *, cell: int = 0,
                   contract: str = "edge") -> float:
    """Contribution of a single back-propagation route to an edge's cost.

    ``path`` is a node list from the cell's output node down to the route
    tail, e.g. ``(4, 3, 2, 0)``. All other fan-in routes into the path's
    interior nodes are severed during a dedicated backward pass (the nodes
    are sum junctions, so dropping the excluded contributions is exact).

    With ``contract="edge"`` the masked gradient is contracted with the
    feature map of the final hop's edge; with ``contract="node"`` it is
    contracted with the tail node's value (used for routes that terminate
    at a cell input, i.e. the previous cell's output).
    """
    spec = trace.spec.cells[cell]
    path = list(path)
    if len(path) < 2:
        raise ValueError("path needs at least two nodes")
    if path[0] != spec.output_node:
        raise ValueError(f"path must start at the output node {spec.output_node}, got {path[0]}")
    if contract not in ("edge", "node"):
        raise ValueError(f"unknown contraction target {contract!r}")
    for a, b in zip(path, path[1:]):
        if b >= a:
            raise ValueError(f"path must strictly descend, got hop {a}->{b}")
        if a == spec.output_node:
            if b not in spec.surviving_intermediates():
                raise ValueError(f"node {b} has no output edge")
        elif (b, a) not in spec.op_edges():
            raise ValueError(f"({b}, {a}) is not an edge of this cell")
        if trace.entries.get((cell, (b, a))) is None and a != spec.output_node:
            # a none selection or a mixture leaves no single entry;
            # none carries no gradient at all, so the route value is 0.
            if trace.op_name(cell, (b, a)) == "none":
                return 0.0
            raise ValueError(f"edge ({b}, {a}) has no traceable entry (mixture sample?)")

    blocked: set[tuple[int, int]] = set()

    def restrict(node: int, upper: int) -> None:
        """Allow gradient into ``node`` only from the hop toward ``upper``."""
        node_t = trace.nodes[(cell, node)]
        if upper == spec.output_node:
            allowed = ("output",)
        else:
            allowed = ("edge", (node, upper))
        for tag, cons_out in trace.consumers[(cell, node)]:
            if tag != allowed:
                blocked.add((id(cons_out), id(node_t)))

    interior = path[1:-1] if contract == "edge" else path[1:]
    for upper, node in zip(path, path[1:]):
        if node in interior:
            restrict(node, upper)

    if contract == "edge":
        target = trace.activation(cell, (path[-1], path[-2])).tensor
    else:
        target = trace.nodes[(cell, path[-1])]
    grads = trace.tape.backward(loss, blocked=frozenset(blocked), assign=False)
    g = grads.get(id(target))
    return 0.0 if g is None else float(np.vdot(g, target.data))
