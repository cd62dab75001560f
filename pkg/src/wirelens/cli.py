"""Command-line entry points.

Subcommands: ``gradcheck`` (finite-difference checks), ``verify``
(certificate suites with a JSON report), ``mc-cost`` (Monte Carlo edge-cost
statistics), ``evolve`` (architecture evolution runs), and ``decompose``
(loss / entropy / cost split). Exit code 0 means every invoked check
passed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np


def _add_config_arg(p):
    p.add_argument("--config", required=True, help="experiment config JSON file")
    p.add_argument("--out", default="out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wirelens",
        description="per-edge cost analysis for cell-based differentiable "
                    "architecture search")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--ops", default=None,
                   help="comma-separated primitive names (default: all, plus the "
                        "full-cell check)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = sub.add_parser("verify", help="run certificate suites")
    p.add_argument("--suite", default="all",
                   choices=["all", "thm1", "thm2", "cor12", "norms"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", dest="json_out", default=None,
                   help="write the certificate report to this JSON file")

    p = sub.add_parser("mc-cost", help="Monte Carlo per-edge cost statistics")
    _add_config_arg(p)
    p.add_argument("--pretrain-epochs", type=int, default=0,
                   help="frozen-architecture weight training before sampling")

    p = sub.add_parser("evolve", help="run an architecture evolution experiment")
    _add_config_arg(p)
    p.add_argument("--framework", default=None,
                   choices=["snas", "dsnas", "darts", "proxyless"])
    p.add_argument("--mode", default=None, choices=["single", "bilevel", "frozen"])
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("decompose", help="loss / entropy / cost decomposition")
    _add_config_arg(p)
    return parser


def _cmd_gradcheck(args) -> int:
    from .gradcheck import PRIMITIVES, full_cell_gradcheck, primitive_gradcheck

    names = args.ops.split(",") if args.ops else list(PRIMITIVES) + ["full_cell"]
    failures = 0
    for name in names:
        if name == "full_cell":
            err = full_cell_gradcheck(seed=args.seed)
        else:
            err = primitive_gradcheck(name, seed=args.seed)
        ok = err < args.tolerance
        failures += not ok
        print(f"[{'PASS' if ok else 'FAIL'}] {name:22s} max relative error {err:.3e}")
    return 1 if failures else 0


def _cmd_verify(args) -> int:
    from .certificates import run_suite
    from .reporting import save_certificates

    certs = run_suite(args.suite, seed=args.seed)
    failures = 0
    for c in certs:
        if not c.applicable:
            status = "SKIP"
        elif c.passed:
            status = "PASS"
        else:
            status = "FAIL"
            failures += 1
        extra = f" p={c.p_value:.3e}" if c.p_value is not None else ""
        print(f"[{status}] {c.name:50s} residual={c.residual:.3e} "
              f"tolerance={c.tolerance:.3e}{extra}")
    if args.json_out:
        save_certificates(certs, args.json_out)
        print(f"report written to {args.json_out}")
    print(f"{len(certs)} certificates, {failures} failures")
    return 1 if failures else 0


def _cmd_mc_cost(args) -> int:
    from .cost import monte_carlo_cost
    from .cells import Network
    from .harness import ExperimentConfig, build_dataset, run_evolution
    from .reporting import save_cost_stats

    cfg = ExperimentConfig.load(args.config)
    if args.pretrain_epochs:
        pre = ExperimentConfig.from_json({**cfg.to_json(), "mode": "frozen_alpha",
                                          "epochs": args.pretrain_epochs})
        from .harness import _Evolution
        evo = _Evolution(pre)
        evo.run()
        net = evo.net
    else:
        net = Network(cfg.network, seed=cfg.seed, init=cfg.init)
    data = build_dataset(cfg.dataset)
    stats = monte_carlo_cost(net, data, epochs=cfg.epochs, seed=cfg.seed,
                             batch_size=cfg.batch_size)
    names = cfg.network.candidate_names(*cfg.network.sampled_edges()[0])
    paths = save_cost_stats(stats, args.out, epoch=cfg.epochs, candidate_names=names)
    for k, v in paths.items():
        print(f"{k}: {v}")
    return 0


def _cmd_evolve(args) -> int:
    from .harness import ExperimentConfig, detect_patterns, run_evolution
    from .reporting import save_pattern_report, save_run_log

    cfg = ExperimentConfig.load(args.config)
    overrides = {}
    if args.framework:
        overrides["framework"] = args.framework
    if args.mode:
        overrides["mode"] = {"single": "single_level", "bilevel": "bilevel",
                             "frozen": "frozen_alpha"}[args.mode]
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        cfg = ExperimentConfig.from_json({**cfg.to_json(), **overrides})
    log = run_evolution(cfg)
    paths = save_run_log(log, args.out)
    if log.epochs >= 3 and cfg.mode != "frozen_alpha":
        report = detect_patterns(log, cfg.network)
        save_pattern_report(report, os.path.join(args.out, "patterns.json"))
        print(f"patterns: P1={report.p1_growing} (onset {report.p1_onset}) "
              f"P2={report.p2_width_pref} P3={report.p3_catastrophic}")
    print(f"{log.epochs} epochs logged to {args.out}"
          + (" (aborted: loss diverged)" if log.aborted else ""))
    return 1 if log.aborted else 0


def _cmd_decompose(args) -> int:
    from .cells import Network
    from .cost import decompose_output_cost
    from .estimators import ArchState, sample_discrete
    from .harness import ExperimentConfig, build_dataset
    from .reporting import write_json

    cfg = ExperimentConfig.load(args.config)
    net = Network(cfg.network, seed=cfg.seed, init=cfg.init)
    data = build_dataset(cfg.dataset)
    batch = (data.images[:cfg.batch_size], data.labels[:cfg.batch_size])
    sample = sample_discrete(ArchState.uniform(cfg.network, seed=cfg.seed), uniform=True)
    decomp, c_act, _ = decompose_output_cost(net, batch, sample,
                                             with_activation_form=True)
    print(f"loss L        = {decomp.L:+.6f}")
    print(f"entropy H     = {decomp.H:+.6f}")
    print(f"cost C        = {decomp.C:+.6f}   (logit form)")
    print(f"cost C        = {c_act:+.6f}   (activation contraction)")
    print(f"|C - (L - H)| = {decomp.residual:.3e}")
    os.makedirs(args.out, exist_ok=True)
    out = os.path.join(args.out, "decomposition.json")
    write_json(out, {"L": decomp.L, "H": decomp.H, "C_logit": decomp.C,
                     "C_activation": c_act, "residual": decomp.residual,
                     "sample": {f"{c}:{e[0]}-{e[1]}": int(v)
                                for (c, e), v in sorted(sample.selections.items())}})
    print(f"written to {out}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "gradcheck": _cmd_gradcheck,
        "verify": _cmd_verify,
        "mc-cost": _cmd_mc_cost,
        "evolve": _cmd_evolve,
        "decompose": _cmd_decompose,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
