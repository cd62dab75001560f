"""Experiment orchestration: training loops, evolution logging, pattern
detection, and the cell-variant ablations.

Runs are fully deterministic given (config, seed): batch order, parameter
init, and every sampling stream derive from the config seed, and the log
emission formats floats round-trip exactly.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .cells import CANDIDATES, Network, NetworkSpec, build_minimal_cell, \
    build_modified_cell, build_simplified_cell, build_general_cell
from .cost import candidate_cost_vector, edge_cost
from .datasets import Dataset, iter_batches, load_cifar10_binary, split_dataset, synth_dataset
from .estimators import ArchState, arch_grad, darts_weights, make_optimizer, \
    sample_discrete, sample_gumbel_softmax
from .ops import NormConfig

MODES = ("single_level", "bilevel", "frozen_alpha")


def _default_theta_opt():
    return {"algo": "sgd", "lr": 0.025, "momentum": 0.9, "weight_decay": 0.0}


def _default_alpha_opt():
    return {"algo": "adam", "lr": 3e-4}


def _default_dataset():
    return {"kind": "synthetic", "classes": 10, "size": [3, 8, 8],
            "n": 1920, "noise": 1.0, "seed": 0}


@dataclass
class ExperimentConfig:
    network: NetworkSpec
    dataset: dict = field(default_factory=_default_dataset)
    theta_opt: dict = field(default_factory=_default_theta_opt)
    alpha_opt: dict = field(default_factory=_default_alpha_opt)
    mode: str = "single_level"
    framework: str = "dsnas"
    epochs: int = 40
    batch_size: int = 64
    seed: int = 0
    temperature: float = 1.0
    anneal_rate: float = 1.0
    split_ratio: float = 0.5
    init: str = "he"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "bilevel" and not 0.0 < self.split_ratio < 1.0:
            raise ValueError(f"bilevel split ratio must lie in (0, 1), got {self.split_ratio}")
        if self.dataset.get("kind") == "cifar10":
            path = self.dataset.get("path")
            if not path or not os.path.exists(path):
                raise FileNotFoundError(f"dataset path does not exist: {path}")

    def to_json(self) -> dict:
        return {
            "network": self.network.to_json(),
            "dataset": self.dataset,
            "theta_opt": self.theta_opt,
            "alpha_opt": self.alpha_opt,
            "mode": self.mode,
            "framework": self.framework,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "temperature": self.temperature,
            "anneal_rate": self.anneal_rate,
            "split_ratio": self.split_ratio,
            "init": self.init,
        }

    @staticmethod
    def from_json(obj: dict) -> "ExperimentConfig":
        net = obj.get("network")
        if net is None:
            spec = desk_network(**obj.get("network_shorthand", {}))
        else:
            spec = NetworkSpec.from_json(net)
        kwargs = {k: obj[k] for k in (
            "dataset", "theta_opt", "alpha_opt", "mode", "framework", "epochs",
            "batch_size", "seed", "temperature", "anneal_rate", "split_ratio", "init",
        ) if k in obj}
        return ExperimentConfig(network=spec, **kwargs)

    @staticmethod
    def load(path) -> "ExperimentConfig":
        with open(path) as fh:
            return ExperimentConfig.from_json(json.load(fh))


def desk_network(cell: str = "minimal", cells: int = 1, channels: int = 8,
                 classes: int = 10, in_channels: int = 3, image: tuple[int, int] = (8, 8),
                 candidates: tuple[str, ...] = CANDIDATES, norm_kind: str = "batch",
                 eps: float = 1e-5, affine: bool = False,
                 stacking: str = "relu_conv_norm", fixed_op: str = "sep_conv_3x3",
                 num_input_nodes: int | None = None,
                 num_intermediate: int | None = None) -> NetworkSpec:
    """Desk-scale network presets; everything is overridable."""
    candidates = tuple(candidates)
    if cell == "minimal":
        cell_spec = build_minimal_cell(candidates)
    elif cell == "simplified":
        cell_spec = build_simplified_cell(candidates)
    elif cell == "modified":
        cell_spec = build_modified_cell(fixed_op, candidates)
    elif cell == "general":
        cell_spec = build_general_cell(num_input_nodes or 2, num_intermediate or 2, candidates)
    else:
        raise ValueError(f"unknown cell kind {cell!r}")
    return NetworkSpec(
        cells=tuple(cell_spec for _ in range(cells)),
        in_channels=in_channels, stem_channels=channels, num_classes=classes,
        image_size=tuple(image), norm=NormConfig(kind=norm_kind, eps=eps, affine=affine),
        stacking=stacking)


def build_dataset(cfg: dict) -> Dataset:
    kind = cfg.get("kind", "synthetic")
    if kind == "synthetic":
        return synth_dataset(
            classes=int(cfg.get("classes", 10)),
            size=tuple(cfg.get("size", (3, 8, 8))),
            n=int(cfg.get("n", 1920)),
            noise=float(cfg.get("noise", 1.0)),
            seed=int(cfg.get("seed", 0)))
    if kind == "cifar10":
        return load_cifar10_binary(cfg["path"], limit=cfg.get("limit"))
    raise ValueError(f"unknown dataset kind {kind!r}")


@dataclass
class SplitMetrics:
    loss: float
    entropy: float
    cost: float
    accuracy: float


@dataclass
class EpochRecord:
    epoch: int
    alpha: dict
    probs: dict
    edge_cost_mean: dict
    train: SplitMetrics
    search: SplitMetrics | None = None


@dataclass
class RunLog:
    """Append-only per-epoch record of one evolution run."""

    config: dict
    records: list[EpochRecord] = field(default_factory=list)
    aborted: bool = False
    theta_update_tags: dict = field(default_factory=dict)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epoch index must be strictly increasing")
        self.records.append(rec)

    @property
    def epochs(self) -> int:
        return len(self.records)


class _Averager:
    def __init__(self):
        self._sums: dict = {}
        self._counts: dict = {}

    def add(self, key, value) -> None:
        self._sums[key] = self._sums.get(key, 0.0) + value
        self._counts[key] = self._counts.get(key, 0) + 1

    def means(self) -> dict:
        return {k: self._sums[k] / self._counts[k] for k in sorted(self._sums, key=repr)}


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=1) == labels).mean())


class _Evolution:
    """One stateful evolution run; sequential by design."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.net = Network(cfg.network, seed=cfg.seed, init=cfg.init)
        self.arch = ArchState.uniform(cfg.network, seed=cfg.seed,
                                      temperature=cfg.temperature)
        self.theta_opt = make_optimizer(cfg.theta_opt)
        self.alpha_opt = make_optimizer(cfg.alpha_opt)
        data = build_dataset(cfg.dataset)
        if cfg.mode == "bilevel":
            self.train_data, self.search_data = split_dataset(
                data, cfg.split_ratio, seed=cfg.seed)
        else:
            self.train_data, self.search_data = data, None
        self.order_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 7)))
        self.search_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 11)))
        self.log = RunLog(config=cfg.to_json())

    # -- steps ------------------------------------------------------------

    def _theta_step(self, trace, tag: str) -> None:
        if tag != "train":
            raise AssertionError(f"weight update from a {tag!r} batch")
        self.log.theta_update_tags[tag] = self.log.theta_update_tags.get(tag, 0) + 1
        grads = {}
        for name in sorted(set(trace.used_params)):
            g = self.net.params[name].grad
            if g is not None:
                grads[name] = g
        self.theta_opt.step(self.net.params, grads)

    def _forward_backward(self, batch, selections, capture=True):
        x, labels = batch
        trace = self.net.forward(x, selections, capture=capture)
        loss, entropy = self.net.loss(trace, labels, backward=True)
        lval = float(loss.data)
        if not np.isfinite(lval):
            raise FloatingPointError("loss diverged")
        metrics = SplitMetrics(loss=lval, entropy=entropy, cost=lval - entropy,
                               accuracy=_accuracy(trace.logits.data, labels))
        return trace, loss, metrics

    def _alpha_step_from(self, batch) -> tuple[SplitMetrics, dict]:
        """One architecture-gradient step; returns metrics and edge costs."""
        fw = self.cfg.framework
        if fw == "dsnas":
            sample = sample_discrete(self.arch)
            trace, loss, metrics = self._forward_backward(batch, sample.selections)
            costs = {key: edge_cost(trace, key[0], key[1]) for key in sorted(sample.selections)}
            grads = arch_grad("dsnas", costs, sample, self.arch)
        elif fw == "proxyless":
            sample = sample_discrete(self.arch)
            trace, loss, metrics = self._forward_backward(batch, sample.selections)
            costs = {key: edge_cost(trace, key[0], key[1]) for key in sorted(sample.selections)}
            vectors = {key: candidate_cost_vector(self.net, trace, key[0], key[1])
                       for key in sorted(sample.selections)}
            grads = arch_grad("proxyless", vectors, sample, self.arch)
        elif fw == "darts":
            sample = darts_weights(self.arch)
            trace, loss, metrics = self._forward_backward(batch, sample.weights)
            costs = {key: edge_cost(trace, key[0], key[1]) for key in sorted(sample.weights)}
            vectors = {key: trace.edge_weights[key].grad for key in sorted(sample.weights)}
            grads = arch_grad("darts", vectors, sample, self.arch)
        elif fw == "snas":
            sample = sample_gumbel_softmax(self.arch)
            trace, loss, metrics = self._forward_backward(batch, sample.weights)
            costs = {key: edge_cost(trace, key[0], key[1]) for key in sorted(sample.weights)}
            vectors = {key: trace.edge_weights[key].grad for key in sorted(sample.weights)}
            grads = arch_grad("snas", vectors, sample, self.arch)
        else:
            raise ValueError(f"unknown framework {self.cfg.framework!r}")
        self.alpha_opt.step(self.arch.logits, grads)
        return trace, metrics, costs

    def _train_step(self, batch) -> tuple[SplitMetrics, dict]:
        """One weight step; single-level also reuses the pass for alpha."""
        fw = self.cfg.framework
        if self.cfg.mode == "frozen_alpha":
            sample = sample_discrete(self.arch, uniform=True)
            trace, loss, metrics = self._forward_backward(batch, sample.selections)
            costs = {key: edge_cost(trace, key[0], key[1]) for key in sorted(sample.selections)}
            self._theta_step(trace, "train")
            return metrics, costs
        if self.cfg.mode == "bilevel":
            if fw in ("dsnas", "proxyless"):
                sample = sample_discrete(self.arch)
                trace, loss, metrics = self._forward_backward(batch, sample.selections)
            else:
                sample = darts_weights(self.arch) if fw == "darts" \
                    else sample_gumbel_softmax(self.arch)
                trace, loss, metrics = self._forward_backward(batch, sample.weights)
            costs = {key: edge_cost(trace, key[0], key[1]) for key in sorted(self.arch.logits)}
            self._theta_step(trace, "train")
            return metrics, costs
        # single level: one pass drives both updates
        trace, metrics, costs = self._alpha_step_from(batch)
        self._theta_step(trace, "train")
        return metrics, costs

    def run(self) -> RunLog:
        cfg = self.cfg
        for epoch in range(cfg.epochs):
            self.arch.temperature = cfg.temperature * (cfg.anneal_rate ** epoch)
            train_avg = _Averager()
            search_avg = _Averager()
            cost_avg = _Averager()
            search_iter = None
            if cfg.mode == "bilevel":
                search_iter = list(iter_batches(self.search_data, cfg.batch_size,
                                                self.search_rng))
            try:
                for b_idx, batch in enumerate(
                        iter_batches(self.train_data, cfg.batch_size, self.order_rng)):
                    metrics, costs = self._train_step(batch)
                    for k, v in vars(metrics).items():
                        train_avg.add(k, v)
                    if cfg.mode != "bilevel":
                        for key, v in costs.items():
                            cost_avg.add(key, v)
                    else:
                        sbatch = search_iter[b_idx % len(search_iter)]
                        _, s_metrics, s_costs = self._alpha_step_from(sbatch)
                        for k, v in vars(s_metrics).items():
                            search_avg.add(k, v)
                        for key, v in s_costs.items():
                            cost_avg.add(key, v)
            except FloatingPointError:
                self.log.aborted = True
                break
            tm = train_avg.means()
            rec = EpochRecord(
                epoch=epoch,
                alpha=self.arch.snapshot(),
                probs=self.arch.probabilities(),
                edge_cost_mean=cost_avg.means(),
                train=SplitMetrics(**tm) if tm else SplitMetrics(0.0, 0.0, 0.0, 0.0),
                search=SplitMetrics(**search_avg.means()) if cfg.mode == "bilevel" else None,
            )
            self.log.append(rec)
        return self.log


def run_evolution(cfg: ExperimentConfig) -> RunLog:
    """Alternating weight and architecture updates per the framework tag.

    frozen_alpha updates only the weights under uniform sampling; bilevel
    computes architecture gradients (and their costs) on the held-out
    split, and no held-out example ever contributes to a weight update.
    """
    return _Evolution(cfg).run()


@dataclass
class PatternReport:
    p1_growing: bool
    p1_onset: int | None
    p2_width_pref: bool
    p2_dwell: dict
    p3_catastrophic: bool


def detect_patterns(log: RunLog, netspec: NetworkSpec, *, drop_frac: float = 0.8) -> PatternReport:
    """Flag the three evolution patterns from the per-epoch argmax series.

    P1 (growing): an early epoch where none is argmax on >= drop_frac of
    the sampled edges, followed by a later epoch where a non-none candidate
    recovers argmax on at least one input edge (onset = recovery epoch).
    P2 (width preference): none stays argmax strictly longer, in epochs,
    on every intermediate edge than on any input edge.
    P3 (catastrophic): none is the final argmax on every sampled edge.
    """
    if log.epochs < 3:
        raise ValueError(f"pattern detection needs >= 3 epochs, got {log.epochs}")
    keys = [(c, e) for c, e in netspec.sampled_edges()]
    kinds = {key: netspec.cells[key[0]].edge_kind(key[1]) for key in keys}
    none_idx = {key: netspec.candidate_names(*key).index("none")
                if "none" in netspec.candidate_names(*key) else None for key in keys}

    none_argmax = {key: [] for key in keys}
    for rec in log.records:
        for key in keys:
            arg = int(np.argmax(rec.alpha[key]))
            none_argmax[key].append(none_idx[key] is not None and arg == none_idx[key])

    # P1
    p1_onset = None
    e1 = None
    for t in range(log.epochs):
        frac = np.mean([none_argmax[key][t] for key in keys])
        if frac >= drop_frac:
            e1 = t
            break
    if e1 is not None:
        for t in range(e1 + 1, log.epochs):
            if any(not none_argmax[key][t] for key in keys if kinds[key] == "input"):
                p1_onset = t
                break
    p1 = p1_onset is not None

    # P2
    dwell = {key: int(np.sum(none_argmax[key])) for key in keys}
    inter = [dwell[key] for key in keys if kinds[key] == "intermediate"]
    inputs = [dwell[key] for key in keys if kinds[key] == "input"]
    p2 = bool(inter) and bool(inputs) and min(inter) > max(inputs)

    # P3
    p3 = all(none_argmax[key][-1] for key in keys)

    return PatternReport(p1_growing=p1, p1_onset=p1_onset, p2_width_pref=p2,
                         p2_dwell={f"{k[0]}:{k[1][0]}-{k[1][1]}": v for k, v in dwell.items()},
                         p3_catastrophic=p3)


@dataclass
class AblationReport:
    variant: str
    edge_means: dict
    window: tuple[int, int]
    intermediate_exceeds_input: bool
    input_edge_positive: dict


def intermediate_edge_ablation(variant: str, cfg: ExperimentConfig) -> AblationReport:
    """Frozen-architecture uniform-sampling run on a simplified or modified
    cell; reports the per-edge mean cost over the later half of training
    and whether the intermediate edge (1, 2) carries the larger cost."""
    if variant not in ("simplified", "modified"):
        raise ValueError(f"unknown variant {variant!r}")
    log = run_evolution(cfg)
    if log.epochs == 0:
        raise ValueError("ablation run produced no epochs")
    lo = log.epochs // 2
    window = (lo, log.epochs)
    sums: dict = {}
    counts: dict = {}
    for rec in log.records[lo:]:
        for key, v in rec.edge_cost_mean.items():
            sums[key] = sums.get(key, 0.0) + v
            counts[key] = counts.get(key, 0) + 1
    means = {key: sums[key] / counts[key] for key in sorted(sums, key=repr)}

    def mean_of(edge):
        for (c, e), v in means.items():
            if e == edge:
                return v
        raise KeyError(f"edge {edge} not in ablation log")

    m12 = mean_of((1, 2))
    m02 = mean_of((0, 2))
    report = AblationReport(
        variant=variant,
        edge_means={f"{c}:{e[0]}-{e[1]}": v for (c, e), v in means.items()},
        window=window,
        intermediate_exceeds_input=m12 > m02,
        input_edge_positive={"0-2": m02 > 0.0},
    )
    return report
