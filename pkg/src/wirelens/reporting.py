"""Delimited output plus rendered figures.

Every emitted table exists in three forms: CSV (floats via repr, so a
parse-back recovers values exactly), a JSON mirror, and, where a layout is
defined, an SVG figure rendered with matplotlib.
"""

from __future__ import annotations

import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .cost import CostStats
from .harness import PatternReport, RunLog

plt.rcParams.update({
    "figure.dpi": 100,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "svg.hashsalt": "wirelens",
})


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows) -> None:
    try:
        with open(path, "w") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(_fmt(v) for v in row) + "\n")
    except OSError as exc:
        raise OSError(f"failed to write {path}: {exc}") from exc


def read_csv(path):
    """Parse a CSV written by :func:`write_csv`; numeric fields become
    ints/floats again."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    header = lines[0].split(",")
    rows = []
    for ln in lines[1:]:
        if not ln:
            continue
        row = []
        for tok in ln.split(","):
            try:
                row.append(int(tok))
            except ValueError:
                try:
                    row.append(float(tok))
                except ValueError:
                    row.append(tok)
        rows.append(row)
    return header, rows


def write_json(path, obj) -> None:
    try:
        with open(path, "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"failed to write {path}: {exc}") from exc


def _rows_to_json(header, rows):
    return [dict(zip(header, row)) for row in rows]


# -- cost statistics ------------------------------------------------------

COST_STATS_HEADER = ("epoch", "cell", "edge_i", "edge_j", "candidate",
                     "cost_mean", "cost_var", "n")


def cost_stats_rows(stats: CostStats, epoch: int):
    rows = []
    for cell, edge, cand, mean, var, n in stats.rows():
        rows.append((epoch, cell, edge[0], edge[1], cand, mean, var, n))
    return rows


def save_cost_stats(stats: CostStats, outdir, *, epoch: int,
                    candidate_names=None, prefix: str = "cost_stats") -> dict:
    os.makedirs(outdir, exist_ok=True)
    rows = cost_stats_rows(stats, epoch)
    paths = {}
    paths["csv"] = os.path.join(outdir, f"{prefix}.csv")
    write_csv(paths["csv"], COST_STATS_HEADER, rows)
    paths["json"] = os.path.join(outdir, f"{prefix}.json")
    write_json(paths["json"], _rows_to_json(COST_STATS_HEADER, rows))
    matrix, edge_labels, cand_idx = cost_stats_matrix(stats)
    cands = [str(candidate_names[k]) if candidate_names else str(k) for k in cand_idx]
    paths["svg"] = os.path.join(outdir, f"{prefix}_heatmap.svg")
    cost_heatmap(matrix, edge_labels, cands, paths["svg"])
    return paths


def cost_stats_matrix(stats: CostStats):
    """(edges x candidates) mean-cost matrix in sorted edge order."""
    rows = stats.rows()
    edges = sorted({(cell, edge) for cell, edge, *_ in rows})
    cands = sorted({cand for _, _, cand, *_ in rows})
    matrix = np.full((len(edges), len(cands)), np.nan)
    for cell, edge, cand, mean, _, _ in rows:
        matrix[edges.index((cell, edge)), cands.index(cand)] = mean
    labels = [f"c{cell} ({i},{j})" for cell, (i, j) in edges]
    return matrix, labels, cands


def cost_heatmap(matrix, edge_labels, candidate_labels, path) -> None:
    """Edges on the y-axis, candidate operations on the x-axis."""
    fig, ax = plt.subplots(figsize=(1.2 + 0.8 * len(candidate_labels),
                                    1.0 + 0.5 * len(edge_labels)))
    vmax = np.nanmax(np.abs(matrix)) or 1.0
    im = ax.imshow(matrix, cmap="RdBu_r", vmin=-vmax, vmax=vmax, aspect="auto")
    ax.set_xticks(range(len(candidate_labels)), candidate_labels,
                  rotation=45, ha="right")
    ax.set_yticks(range(len(edge_labels)), edge_labels)
    ax.set_xlabel("candidate operation")
    ax.set_ylabel("edge")
    ax.grid(False)
    fig.colorbar(im, ax=ax, label="mean cost")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


# -- run logs --------------------------------------------------------------

METRICS_HEADER = ("epoch", "split", "loss", "entropy", "cost", "accuracy")
ALPHA_HEADER = ("epoch", "cell", "edge", "candidate", "logit", "probability")
EDGE_COST_HEADER = ("epoch", "cell", "edge_i", "edge_j", "cost_mean")


def run_log_tables(log: RunLog):
    metrics, alpha, edge_costs = [], [], []
    for rec in log.records:
        metrics.append((rec.epoch, "train", rec.train.loss, rec.train.entropy,
                        rec.train.cost, rec.train.accuracy))
        if rec.search is not None:
            metrics.append((rec.epoch, "search", rec.search.loss, rec.search.entropy,
                            rec.search.cost, rec.search.accuracy))
        for (cell, edge) in sorted(rec.alpha):
            logits = rec.alpha[(cell, edge)]
            probs = rec.probs[(cell, edge)]
            for k in range(logits.size):
                alpha.append((rec.epoch, cell, f"{edge[0]}-{edge[1]}", k,
                              float(logits[k]), float(probs[k])))
        for (cell, edge) in sorted(rec.edge_cost_mean, key=repr):
            edge_costs.append((rec.epoch, cell, edge[0], edge[1],
                               rec.edge_cost_mean[(cell, edge)]))
    return metrics, alpha, edge_costs


def save_run_log(log: RunLog, outdir) -> dict:
    os.makedirs(outdir, exist_ok=True)
    metrics, alpha, edge_costs = run_log_tables(log)
    paths = {}
    for name, header, rows in (("metrics", METRICS_HEADER, metrics),
                               ("alpha", ALPHA_HEADER, alpha),
                               ("edge_costs", EDGE_COST_HEADER, edge_costs)):
        paths[f"{name}.csv"] = os.path.join(outdir, f"{name}.csv")
        write_csv(paths[f"{name}.csv"], header, rows)
        paths[f"{name}.json"] = os.path.join(outdir, f"{name}.json")
        write_json(paths[f"{name}.json"], _rows_to_json(header, rows))
    write_json(os.path.join(outdir, "config.json"), log.config)
    if log.records:
        paths["alpha.svg"] = os.path.join(outdir, "alpha_probabilities.svg")
        plot_alpha_probabilities(log, paths["alpha.svg"])
        paths["edge_costs.svg"] = os.path.join(outdir, "edge_costs.svg")
        plot_edge_costs(log, paths["edge_costs.svg"])
        paths["decomposition.svg"] = os.path.join(outdir, "decomposition.svg")
        plot_decomposition(log, paths["decomposition.svg"])
    return paths


def plot_alpha_probabilities(log: RunLog, path) -> None:
    """One panel per edge, one line per candidate probability."""
    keys = sorted(log.records[0].alpha)
    epochs = [rec.epoch for rec in log.records]
    ncols = min(3, len(keys))
    nrows = (len(keys) + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols, figsize=(3.4 * ncols, 2.6 * nrows),
                             squeeze=False, sharex=True, sharey=True)
    for idx, key in enumerate(keys):
        ax = axes[idx // ncols][idx % ncols]
        k = log.records[0].probs[key].size
        for cand in range(k):
            series = [rec.probs[key][cand] for rec in log.records]
            ax.plot(epochs, series, label=str(cand), linewidth=1.2)
        cell, (i, j) = key
        ax.set_title(f"cell {cell} edge ({i},{j})")
        ax.set_ylim(0, 1)
    for idx in range(len(keys), nrows * ncols):
        axes[idx // ncols][idx % ncols].axis("off")
    axes[0][0].legend(fontsize=6, ncol=2, title="candidate")
    fig.supxlabel("epoch")
    fig.supylabel("probability")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_edge_costs(log: RunLog, path) -> None:
    keys = sorted(log.records[0].edge_cost_mean, key=repr)
    epochs = [rec.epoch for rec in log.records]
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    total = np.zeros(len(log.records))
    for key in keys:
        series = np.array([rec.edge_cost_mean.get(key, np.nan) for rec in log.records])
        cell, (i, j) = key
        ax.plot(epochs, series, label=f"c{cell} ({i},{j})", linewidth=1.2)
        total += np.nan_to_num(series)
    ax.plot(epochs, total, "k--", label="sum", linewidth=1.6)
    ax.axhline(0.0, color="gray", linewidth=0.8)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean edge cost")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_decomposition(log: RunLog, path) -> None:
    """Loss, output entropy, and their difference per epoch and split."""
    epochs = [rec.epoch for rec in log.records]
    has_search = log.records[0].search is not None
    fig, axes = plt.subplots(1, 2 if has_search else 1, figsize=(8 if has_search else 5, 3.2),
                             squeeze=False)
    splits = [("train", lambda r: r.train)] + ([("search", lambda r: r.search)] if has_search else [])
    for ax, (name, get) in zip(axes[0], splits):
        ax.plot(epochs, [get(r).loss for r in log.records], label="loss")
        ax.plot(epochs, [get(r).entropy for r in log.records], label="entropy")
        ax.plot(epochs, [get(r).cost for r in log.records], label="cost")
        ax.axhline(0.0, color="gray", linewidth=0.8)
        ax.set_title(name)
        ax.set_xlabel("epoch")
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def save_pattern_report(report: PatternReport, path) -> None:
    write_json(path, {
        "p1_growing": report.p1_growing,
        "p1_onset": report.p1_onset,
        "p2_width_pref": report.p2_width_pref,
        "p2_dwell": report.p2_dwell,
        "p3_catastrophic": report.p3_catastrophic,
    })


def save_certificates(certs, path) -> None:
    write_json(path, [{
        "name": c.name,
        "residual": c.residual,
        "tolerance": c.tolerance,
        "passed": c.passed,
        "seed": c.seed,
        "applicable": c.applicable,
        "p_value": c.p_value,
        "effect": c.effect,
        "context": c.context,
    } for c in certs])
