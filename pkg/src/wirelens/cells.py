"""Cell-based supernetwork construction and forward passes.

A cell is a small DAG: input nodes receive features from the previous cell
(or the stem), every intermediate node sums the outputs of its incoming
candidate-operation edges, and the output node concatenates the surviving
intermediate nodes channel-wise. Stacked cells form a network with a 1x1
convolutional stem and an adaptive-average-pool + linear head.

Every forward pass records enough structure (per-edge feature maps, node
tensors, fan-in consumers, op-stage tensors) that per-edge costs and single
back-propagation routes can be measured afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import ops
from .autodiff import ShapeError, Tape, Tensor
from .ops import NormConfig

Edge = tuple[int, int]

# Candidate list in the conventional order: index 0 is none, 1 is skip.
CANDIDATES = (
    "none",
    "skip_connect",
    "max_pool_3x3",
    "avg_pool_3x3",
    "sep_conv_3x3",
    "dil_conv_3x3",
    "dil_conv_5x5",
    "sep_conv_5x5",
)

# kernel size, dilation, and grouping style per convolutional candidate.
_CONV_SPECS = {
    "sep_conv_3x3": (3, 1, "depthwise"),
    "sep_conv_5x5": (5, 1, "depthwise"),
    "dil_conv_3x3": (3, 2, "full"),
    "dil_conv_5x5": (5, 2, "full"),
}

STACKINGS = ("relu_conv_norm", "conv_relu_norm", "conv_norm_relu")


@dataclass(frozen=True)
class CellSpec:
    """DAG description of one cell.

    Nodes are indexed input nodes first, then intermediate nodes, then the
    output node. Every intermediate node is connected to all lower-indexed
    nodes unless the edge is in ``deleted_edges``; output edges ``(j, out)``
    may be deleted as well, which removes node ``j`` from the concatenation.
    Edges in ``fixed_ops`` carry a single pinned operation and are excluded
    from sampling.
    """

    num_input_nodes: int
    num_intermediate: int
    candidates: Mapping[Edge, tuple[str, ...]]
    deleted_edges: frozenset[Edge] = frozenset()
    fixed_ops: Mapping[Edge, str] = field(default_factory=dict)

    @property
    def output_node(self) -> int:
        return self.num_input_nodes + self.num_intermediate

    @property
    def intermediate_nodes(self) -> tuple[int, ...]:
        return tuple(range(self.num_input_nodes, self.output_node))

    def op_edges(self) -> tuple[Edge, ...]:
        """Non-output edges in conventional numbering order (by (j, i))."""
        edges = []
        for j in self.intermediate_nodes:
            for i in range(j):
                if (i, j) not in self.deleted_edges:
                    edges.append((i, j))
        return tuple(edges)

    def sampled_edges(self) -> tuple[Edge, ...]:
        return tuple(e for e in self.op_edges() if e not in self.fixed_ops)

    def surviving_intermediates(self) -> tuple[int, ...]:
        out = self.output_node
        return tuple(j for j in self.intermediate_nodes
                     if (j, out) not in self.deleted_edges)

    def edge_kind(self, edge: Edge) -> str:
        i, j = edge
        if j == self.output_node:
            return "output"
        if i < self.num_input_nodes:
            return "input"
        return "intermediate"

    def validate(self) -> None:
        out = self.output_node
        for edge in self.op_edges():
            if edge not in self.candidates and edge not in self.fixed_ops:
                raise ValueError(f"edge {edge} has no candidate list and no fixed op")
        for edge, op in self.fixed_ops.items():
            if op not in CANDIDATES:
                raise ValueError(f"unknown fixed op {op!r} on edge {edge}")
        for edge, cands in self.candidates.items():
            for c in cands:
                if c not in CANDIDATES:
                    raise ValueError(f"unknown candidate {c!r} on edge {edge}")
        if not self.surviving_intermediates():
            raise ValueError("every output edge is deleted; cell has no output")
        for (i, j) in self.deleted_edges:
            if not (0 <= i < j <= out):
                raise ValueError(f"deleted edge {(i, j)} is not a valid edge")

    def to_json(self) -> dict:
        return {
            "num_input_nodes": self.num_input_nodes,
            "num_intermediate": self.num_intermediate,
            "candidates": {f"{i}-{j}": list(c) for (i, j), c in sorted(self.candidates.items())},
            "deleted_edges": [f"{i}-{j}" for (i, j) in sorted(self.deleted_edges)],
            "fixed_ops": {f"{i}-{j}": op for (i, j), op in sorted(self.fixed_ops.items())},
        }

    @staticmethod
    def from_json(obj: dict) -> "CellSpec":
        def parse_edge(s: str) -> Edge:
            i, j = s.split("-")
            return (int(i), int(j))

        spec = CellSpec(
            num_input_nodes=int(obj["num_input_nodes"]),
            num_intermediate=int(obj["num_intermediate"]),
            candidates={parse_edge(k): tuple(v) for k, v in obj.get("candidates", {}).items()},
            deleted_edges=frozenset(parse_edge(s) for s in obj.get("deleted_edges", [])),
            fixed_ops={parse_edge(k): v for k, v in obj.get("fixed_ops", {}).items()},
        )
        spec.validate()
        return spec


def build_minimal_cell(candidates: tuple[str, ...] = CANDIDATES) -> CellSpec:
    """Two input nodes, two intermediate nodes, one output node.

    Non-output edges number five: four input edges plus the single
    intermediate edge (2, 3).
    """
    return build_general_cell(2, 2, candidates)


def build_general_cell(num_input_nodes: int, num_intermediate: int,
                       candidates: tuple[str, ...] = CANDIDATES) -> CellSpec:
    spec = CellSpec(
        num_input_nodes=num_input_nodes,
        num_intermediate=num_intermediate,
        candidates={},
        deleted_edges=frozenset(),
        fixed_ops={},
    )
    cands = {e: tuple(candidates) for e in spec.op_edges()}
    spec = CellSpec(num_input_nodes, num_intermediate, cands)
    spec.validate()
    return spec


def build_simplified_cell(candidates: tuple[str, ...] = CANDIDATES) -> CellSpec:
    """One input node (0), intermediates 1 and 2, output node 3."""
    return build_general_cell(1, 2, candidates)


def build_modified_cell(fixed_op: str = "sep_conv_3x3",
                        candidates: tuple[str, ...] = CANDIDATES) -> CellSpec:
    """Simplified cell with output edge (1, 3) deleted and (0, 1) pinned.

    Node 1 then feeds the output only through the intermediate edge (1, 2),
    and its incoming operation is trained on every step.
    """
    base = build_simplified_cell(candidates)
    cands = {e: c for e, c in base.candidates.items() if e != (0, 1)}
    spec = CellSpec(
        num_input_nodes=1,
        num_intermediate=2,
        candidates=cands,
        deleted_edges=frozenset({(1, 3)}),
        fixed_ops={(0, 1): fixed_op},
    )
    spec.validate()
    return spec


@dataclass(frozen=True)
class NetworkSpec:
    """Stem + stacked cells + classification head.

    At this scale every cell takes all of its input nodes from the single
    previous cell (the stem for the first cell), so channel bookkeeping is
    a plain chain: cell k works at ``stem_channels * prod(survivors)``.
    """

    cells: tuple[CellSpec, ...]
    in_channels: int = 3
    stem_channels: int = 8
    num_classes: int = 10
    image_size: tuple[int, int] = (8, 8)
    norm: NormConfig = NormConfig()
    stacking: str = "relu_conv_norm"

    def __post_init__(self):
        if self.stacking not in STACKINGS:
            raise ValueError(f"unknown stacking order {self.stacking!r}")
        for cell in self.cells:
            cell.validate()

    def cell_channels(self) -> tuple[int, ...]:
        chans = []
        c = self.stem_channels
        for cell in self.cells:
            chans.append(c)
            c *= len(cell.surviving_intermediates())
        return tuple(chans)

    def head_features(self) -> int:
        return self.cell_channels()[-1] * len(self.cells[-1].surviving_intermediates())

    def sampled_edges(self) -> tuple[tuple[int, Edge], ...]:
        keys = []
        for k, cell in enumerate(self.cells):
            for e in cell.sampled_edges():
                keys.append((k, e))
        return tuple(keys)

    def candidate_names(self, cell: int, edge: Edge) -> tuple[str, ...]:
        return tuple(self.cells[cell].candidates[edge])

    def to_json(self) -> dict:
        return {
            "cells": [c.to_json() for c in self.cells],
            "in_channels": self.in_channels,
            "stem_channels": self.stem_channels,
            "num_classes": self.num_classes,
            "image_size": list(self.image_size),
            "norm": {"kind": self.norm.kind, "eps": self.norm.eps, "affine": self.norm.affine},
            "stacking": self.stacking,
        }

    @staticmethod
    def from_json(obj: dict) -> "NetworkSpec":
        norm = obj.get("norm", {})
        return NetworkSpec(
            cells=tuple(CellSpec.from_json(c) for c in obj["cells"]),
            in_channels=int(obj.get("in_channels", 3)),
            stem_channels=int(obj.get("stem_channels", 8)),
            num_classes=int(obj.get("num_classes", 10)),
            image_size=tuple(obj.get("image_size", (8, 8))),
            norm=NormConfig(kind=norm.get("kind", "batch"),
                            eps=float(norm.get("eps", 1e-5)),
                            affine=bool(norm.get("affine", False))),
            stacking=obj.get("stacking", "relu_conv_norm"),
        )


@dataclass
class EdgeActivation:
    """Captured per-edge feature map, with its gradient after backward."""

    cell: int
    edge: Edge
    tensor: Tensor


@dataclass
class Trace:
    """Everything one forward pass exposes for later analysis."""

    tape: Tape
    spec: NetworkSpec
    selections: dict
    logits: Tensor
    pooled: Tensor
    activations: list[EdgeActivation]
    nodes: dict[tuple[int, int], Tensor]
    entries: dict[tuple[int, Edge], Tensor | None]
    stages: dict[tuple[int, Edge], list[tuple[str, Tensor]]]
    consumers: dict[tuple[int, int], list[tuple[tuple, Tensor]]]
    cell_outputs: list[Tensor]
    edge_weights: dict[tuple[int, Edge], Tensor]
    used_params: list[str]

    def activation(self, cell: int, edge: Edge) -> EdgeActivation:
        for act in self.activations:
            if act.cell == cell and act.edge == edge:
                return act
        raise KeyError(f"no activation recorded for cell {cell}, edge {edge}")

    def op_name(self, cell: int, edge: Edge) -> str:
        cell_spec = self.spec.cells[cell]
        if edge in cell_spec.fixed_ops:
            return cell_spec.fixed_ops[edge]
        sel = self.selections[(cell, edge)]
        if isinstance(sel, (int, np.integer)):
            return self.spec.candidate_names(cell, edge)[int(sel)]
        return "mixture"


class Network:
    """A NetworkSpec instantiated with parameters.

    Parameters are plain gradient-tracked tensors in a name-keyed dict; the
    names carry cell, edge, and operation so optimizer diagnostics can point
    at the offending site. The spec is immutable and shareable; per-forward
    state lives in the tape, one worker each.
    """

    def __init__(self, spec: NetworkSpec, seed: int = 0, init: str = "he"):
        if init not in ("he", "unit"):
            raise ValueError(f"unknown init scheme {init!r}")
        self.spec = spec
        self.seed = seed
        self.init = init
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)

        def conv_weight(name, c_out, c_in_g, k):
            fan_in = c_in_g * k * k
            std = float(np.sqrt(2.0 / fan_in)) if init == "he" else 1.0
            self.params[name] = Tensor(rng.normal(0.0, std, (c_out, c_in_g, k, k)),
                                       requires_grad=True, name=name)

        def norm_affine(prefix, c):
            if spec.norm.affine:
                self.params[f"{prefix}.gamma"] = Tensor(np.ones(c), requires_grad=True,
                                                        name=f"{prefix}.gamma")
                self.params[f"{prefix}.beta"] = Tensor(np.zeros(c), requires_grad=True,
                                                       name=f"{prefix}.beta")

        conv_weight("stem.conv", spec.stem_channels, spec.in_channels, 1)
        norm_affine("stem.norm", spec.stem_channels)
        for k, (cell, ch) in enumerate(zip(spec.cells, spec.cell_channels())):
            for edge in cell.op_edges():
                i, j = edge
                names = ([cell.fixed_ops[edge]] if edge in cell.fixed_ops
                         else list(cell.candidates[edge]))
                for op_name in names:
                    prefix = f"cell{k}.edge{i}-{j}.{op_name}"
                    if op_name in _CONV_SPECS:
                        ksize, _, grouping = _CONV_SPECS[op_name]
                        c_in_g = 1 if grouping == "depthwise" else ch
                        conv_weight(f"{prefix}.conv", ch, c_in_g, ksize)
                    if op_name not in ("none", "skip_connect"):
                        norm_affine(f"{prefix}.norm", ch)
        head_in = spec.head_features()
        std = float(np.sqrt(1.0 / head_in)) if init == "he" else 1.0
        self.params["head.linear"] = Tensor(rng.normal(0.0, std, (head_in, spec.num_classes)),
                                            requires_grad=True, name="head.linear")

    def _norm_params(self, prefix):
        if not self.spec.norm.affine:
            return None, None
        return self.params[f"{prefix}.gamma"], self.params[f"{prefix}.beta"]

    def _apply_candidate(self, tape, x, cell_idx, edge, op_name, used):
        """Run one candidate block; returns (output, entry, stage list)."""
        i, j = edge
        prefix = f"cell{cell_idx}.edge{i}-{j}.{op_name}"
        if op_name == "none":
            zero = Tensor(np.zeros(x.shape), name=f"{prefix}.zero")
            return zero, None, [("none", zero)]
        if op_name == "skip_connect":
            out = ops.identity(tape, x)
            return out, out, [("skip", out)]
        stages: list[tuple[str, Tensor]] = []
        gamma, beta = self._norm_params(f"{prefix}.norm")
        if self.spec.norm.affine:
            used.append(f"{prefix}.norm.gamma")
            used.append(f"{prefix}.norm.beta")
        if op_name in ("max_pool_3x3", "avg_pool_3x3"):
            pool = ops.max_pool3x3 if op_name == "max_pool_3x3" else ops.avg_pool3x3
            t = pool(tape, x)
            stages.append(("pool", t))
            t = ops.normalize(tape, t, self.spec.norm, gamma, beta)
            stages.append(("norm", t))
            return t, stages[0][1], stages
        ksize, dilation, grouping = _CONV_SPECS[op_name]
        weight = self.params[f"{prefix}.conv"]
        used.append(f"{prefix}.conv")
        groups = x.shape[1] if grouping == "depthwise" else 1
        padding = dilation * (ksize - 1) // 2

        def conv(t, v):
            return ops.conv2d(t, v, weight, padding=padding, dilation=dilation, groups=groups)

        t = x
        order = self.spec.stacking
        if order == "relu_conv_norm":
            t = ops.relu(tape, t)
            stages.append(("relu", t))
            t = conv(tape, t)
            stages.append(("conv", t))
            t = ops.normalize(tape, t, self.spec.norm, gamma, beta)
            stages.append(("norm", t))
        elif order == "conv_relu_norm":
            t = conv(tape, t)
            stages.append(("conv", t))
            t = ops.relu(tape, t)
            stages.append(("relu", t))
            t = ops.normalize(tape, t, self.spec.norm, gamma, beta)
            stages.append(("norm", t))
        else:  # conv_norm_relu
            t = conv(tape, t)
            stages.append(("conv", t))
            t = ops.normalize(tape, t, self.spec.norm, gamma, beta)
            stages.append(("norm", t))
            t = ops.relu(tape, t)
            stages.append(("relu", t))
        return t, stages[0][1], stages

    def forward(self, x: np.ndarray, selections: Mapping, *, capture: bool = False,
                edge_scales: Mapping | None = None) -> Trace:
        """Run the supernetwork on a batch.

        ``selections`` maps ``(cell_index, edge)`` to either a candidate
        index (discrete one-hot sample), a simplex weight vector (relaxed
        sample), or a callable ``f(tape) -> Tensor`` building the weight
        vector on the forward tape (used for end-to-end gradients through
        the sampling relaxation). The key set must equal the network's
        sampled edges exactly.
        """
        spec = self.spec
        expected = set(spec.sampled_edges())
        got = set(selections.keys())
        if got != expected:
            missing = sorted(expected - got)
            extra = sorted(got - expected)
            raise ValueError(
                f"sample does not cover the sampled edges (missing {missing}, extra {extra})")
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[1] != spec.in_channels:
            raise ShapeError(
                f"input must be (B, {spec.in_channels}, H, W), got {x.shape}")

        tape = Tape()
        used: list[str] = []
        x_t = Tensor(x, name="input")
        t = ops.conv2d(tape, x_t, self.params["stem.conv"])
        used.append("stem.conv")
        gamma, beta = self._norm_params("stem.norm")
        if spec.norm.affine:
            used.extend(["stem.norm.gamma", "stem.norm.beta"])
        prev = ops.normalize(tape, t, spec.norm, gamma, beta)

        nodes: dict[tuple[int, int], Tensor] = {}
        entries: dict[tuple[int, Edge], Tensor | None] = {}
        stages: dict[tuple[int, Edge], list[tuple[str, Tensor]]] = {}
        consumers: dict[tuple[int, int], list[tuple[tuple, Tensor]]] = {}
        activations: list[EdgeActivation] = []
        edge_weights: dict[tuple[int, Edge], Tensor] = {}
        cell_outputs: list[Tensor] = []
        edge_scales = dict(edge_scales or {})

        for k, cell in enumerate(spec.cells):
            for n in range(cell.num_input_nodes):
                nodes[(k, n)] = ops.identity(tape, prev)
                consumers.setdefault((k, n), [])
            for j in cell.intermediate_nodes:
                contribs = []
                for i in range(j):
                    edge = (i, j)
                    if edge in cell.deleted_edges:
                        continue
                    if edge in cell.fixed_ops:
                        out, entry, st = self._apply_candidate(
                            tape, nodes[(k, i)], k, edge, cell.fixed_ops[edge], used)
                    else:
                        sel = selections[(k, edge)]
                        if isinstance(sel, (int, np.integer)):
                            name = spec.candidate_names(k, edge)[int(sel)]
                            out, entry, st = self._apply_candidate(
                                tape, nodes[(k, i)], k, edge, name, used)
                        else:
                            cand_outs = []
                            first_entry = None
                            st = []
                            for name in spec.candidate_names(k, edge):
                                o, e, s = self._apply_candidate(
                                    tape, nodes[(k, i)], k, edge, name, used)
                                cand_outs.append(o)
                                if first_entry is None and e is not None:
                                    first_entry = e
                                st.extend((f"{name}:{tag}", tt) for tag, tt in s)
                            if callable(sel):
                                w_t = sel(tape)
                            else:
                                w_t = Tensor(np.asarray(sel), requires_grad=True,
                                             name=f"cell{k}.edge{i}-{j}.weights")
                            edge_weights[(k, edge)] = w_t
                            tape.watch(w_t)
                            out = ops.weighted_sum(tape, cand_outs, w_t)
                            entry = None  # mixtures have no single entry route
                    entries[(k, edge)] = entry
                    stages[(k, edge)] = st
                    if entry is not None:
                        consumers.setdefault((k, i), []).append((("edge", edge), entry))
                    if capture:
                        tape.watch(out)
                        for _, s_t in st:
                            tape.watch(s_t)
                    activations.append(EdgeActivation(k, edge, out))
                    key = (k, edge)
                    if key in edge_scales:
                        out = ops.scale(tape, out, float(edge_scales[key]))
                    contribs.append(out)
                nodes[(k, j)] = ops.add_n(tape, contribs)
                consumers.setdefault((k, j), [])
            survivors = cell.surviving_intermediates()
            out_t = ops.concat_channels(tape, [nodes[(k, j)] for j in survivors])
            for j in survivors:
                consumers[(k, j)].append((("output",), out_t))
            if capture:
                tape.watch(out_t)
            cell_outputs.append(out_t)
            prev = out_t

        pooled = ops.global_avg_pool(tape, prev)
        logits = ops.linear(tape, pooled, self.params["head.linear"])
        used.append("head.linear")
        return Trace(
            tape=tape, spec=spec, selections=dict(selections), logits=logits,
            pooled=pooled, activations=activations, nodes=nodes, entries=entries,
            stages=stages, consumers=consumers, cell_outputs=cell_outputs,
            edge_weights=edge_weights, used_params=used,
        )

    def loss(self, trace: Trace, labels, *, backward: bool = False) -> tuple[Tensor, float]:
        """Cross-entropy plus output entropy; optionally back-propagate."""
        loss, entropy = ops.cross_entropy_with_entropy(trace.tape, trace.logits, labels)
        if backward:
            trace.tape.backward(loss)
        return loss, entropy

    def candidate_output(self, x_value: np.ndarray, cell: int, edge: Edge,
                         op_name: str) -> np.ndarray:
        """Stateless forward of one candidate block on a given edge input
        (scratch tape; batch statistics recomputed as in training)."""
        scratch = Tape()
        out, _, _ = self._apply_candidate(scratch, Tensor(x_value), cell, edge, op_name, [])
        return out.data
