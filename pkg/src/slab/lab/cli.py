"""``slab`` command line.

``slab run <scenario>`` runs a scenario and writes ``report.json`` (plus path CSVs with
``--dump``); ``nelson``, ``action`` and ``residual`` expose single operations on a
scenario's main ensemble or on a library flow; ``list-flows`` prints the flow library.
Exit codes: 0 pass, 1 a check failed, 2 config error, 3 inconclusive.
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from ..action import Thresholds, criticality_test, default_bumps
from ..exceptions import ConfigError, SlabError
from ..fields import describe_flows, exact_flow
from ..nelson import NelsonParams, estimate_drift
from ..residuals import tagged_residual
from .config import SCENARIOS, load_config, make_config
from .report import EXIT_CODES
from .scenarios import primary_ensemble, probe_points, run_scenario


def _config(args):
    if args.config:
        cfg = load_config(args.config, args.scenario, args.seed)
    else:
        cfg = make_config(args.scenario, seed=args.seed)
    if getattr(args, "dump", False):
        cfg.dump = True
    if getattr(args, "n_paths", None):
        cfg.n_paths = args.n_paths
    return cfg


def _scenario_args(p):
    p.add_argument("scenario", choices=SCENARIOS)
    p.add_argument("--config", help="JSON file with overrides of the scenario defaults")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-paths", type=int, help="override the number of paths")


def cmd_run(args):
    cfg = _config(args)
    report = run_scenario(cfg, args.out)
    print("\n".join(report.summary_lines()))
    print(f"wall clock {report.wall_clock:.1f} s")
    return report.exit_code


def cmd_nelson(args):
    cfg = _config(args)
    ens, _, _ = primary_ensemble(cfg)
    overrides = {k: v for k, v in (("h", args.h), ("bandwidth", args.bandwidth)) if v is not None}
    params = NelsonParams.default(ens, **{**cfg.nelson, **overrides})
    est = estimate_drift(ens, args.t, probe_points(cfg), params, args.direction)
    if args.out:
        est.to_csv(args.out)
        print(f"wrote {args.out}")
    else:
        for x, v, s in zip(est.points, est.values, est.stderr):
            print(" ".join(f"{a:.6g}" for a in (*x, *v, *s)))
    return 0 if np.all(est.valid) else EXIT_CODES["inconclusive"]


def cmd_action(args):
    cfg = _config(args)
    ens, L, mu = primary_ensemble(cfg)
    params = NelsonParams.default(ens, t_buffer=cfg.nelson.get("t_buffer", 0.1))
    eps = cfg.variations.get("eps", 0.1)
    variations = default_bumps(ens.dim, eps, tuple(cfg.variations.get("modes", (1, 2, 3, 4))))
    th = cfg.thresholds
    rep = criticality_test(ens, L, variations, mu, params,
                           Thresholds(th.get("rel", 0.02), th.get("n_se", 3.0)),
                           scale=th.get("scale"), seed=cfg.seed)
    text = rep.to_json()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    print(text)
    return {"critical": 0, "not-critical": 1}.get(rep.verdict, EXIT_CODES["inconclusive"])


def cmd_residual(args):
    params = {}
    for item in args.param or []:
        key, _, val = item.partition("=")
        params[key] = json.loads(val)
    flow = exact_flow(args.flow, args.T, **params)
    rng = np.random.default_rng(args.seed)
    x = rng.uniform(-args.box, args.box, (args.n, flow.velocity.dim))
    t = rng.uniform(0, args.T, args.n)
    r = tagged_residual(flow, t, x, args.tag)
    worst = float(np.max(np.abs(r)))
    print(f"{flow.name}: max |{args.tag or sorted(flow.satisfies)[0]} residual| = {worst:.3e} "
          f"over {args.n} points")
    return 0 if worst <= args.tol else 1


def build_parser():
    ap = argparse.ArgumentParser(prog="slab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scenario and write report.json")
    _scenario_args(p)
    p.add_argument("--out", help="output directory for report.json and CSVs")
    p.add_argument("--dump", action="store_true", help="write path ensembles as CSV")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("nelson", help="estimate a drift of a scenario's main ensemble")
    _scenario_args(p)
    p.add_argument("--t", type=float, default=0.5)
    p.add_argument("--direction", choices=("forward", "backward"), default="forward")
    p.add_argument("--h", type=float)
    p.add_argument("--bandwidth", type=float)
    p.add_argument("--out", help="CSV file for the estimate")
    p.set_defaults(func=cmd_nelson)

    p = sub.add_parser("action", help="bump-variation criticality test of a scenario's main ensemble")
    _scenario_args(p)
    p.add_argument("--out", help="JSON file for the action report")
    p.set_defaults(func=cmd_action)

    p = sub.add_parser("residual", help="momentum residual of a library flow at random points")
    p.add_argument("flow")
    p.add_argument("--param", action="append", help="flow parameter as key=value (JSON value)")
    p.add_argument("--tag", choices=("navier_stokes", "euler", "stokes"))
    p.add_argument("--T", type=float, default=1.0)
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--box", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-8)
    p.set_defaults(func=cmd_residual)

    p = sub.add_parser("list-flows", help="print the flow library")
    p.set_defaults(func=lambda args: print("\n".join(describe_flows())) or 0)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CODES["config_error"]
    except SlabError as exc:
        print(f"inconclusive: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CODES["inconclusive"]


if __name__ == "__main__":
    sys.exit(main())
