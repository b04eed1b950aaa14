"""Command-line entry point: ``specaccess <subcommand> [--config PATH] [--seed N] [--out DIR]``.

Exit status is 0 on success, 2 for configuration errors and 3 when an
estimator or solver run stopped before converging (outputs are still
written).
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import config as cfgmod
from .config import ConfigError, ScenarioConfig
from .estimator import FragmentedEstimator, SensingLog, observe_trace, random_sensing_sets
from .metrics import (
    ESTIMATOR_COLUMNS,
    MetricsReport,
    RocPoint,
    and_fusion_miss_probability,
    emit_report,
    read_report,
    roc_is_monotone,
    write_table,
)
from .occupancy import ThetaVector, sample_trace, write_trace_csv
from .scenario import (
    EPISODE_COLUMNS,
    cached_solve,
    fragment_thetas,
    run_distributed_episode,
    run_scenario,
)

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGED = 0, 2, 3


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _lambdas(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad lambda list {text!r}") from None
    if not values or any(v < 0 for v in values):
        raise argparse.ArgumentTypeError("lambda list must be nonempty and nonnegative")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specaccess", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML scenario file (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override the scenario seed")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--lambda", dest="lambdas", type=_lambdas,
                        help="penalty weights, comma or space separated")
    common.add_argument("--concurrent-learning", type=_bool,
                        help="learn while exploiting (true) or learn first (false)")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="occupancy trace and random-sensing log")
    p = sub.add_parser("estimate", parents=[common], help="Baum-Welch on a sensing log")
    p.add_argument("--input", help="sensing_log.csv (simulated from the config when omitted)")
    sub.add_parser("solve", parents=[common], help="sensing policies per fragment")
    p = sub.add_parser("run", parents=[common], help="end-to-end single-agent scenario")
    p.add_argument("--agent", choices=("lessa", "genie", "np"), default="lessa")
    sub.add_parser("ma-run", parents=[common], help="distributed multi-agent episode")
    sub.add_parser("roc", parents=[common], help="penalty sweep with the energy-detector reference")
    p = sub.add_parser("report", parents=[common], help="re-emit report CSVs from a directory")
    p.add_argument("--input", required=True, help="directory holding a previous report")
    return parser


def load_config(args) -> ScenarioConfig:
    cfg = cfgmod.load(args.config) if args.config else ScenarioConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.concurrent_learning is not None:
        mode = "concurrent" if args.concurrent_learning else "sequential"
        changes["estimator"] = dataclasses.replace(cfg.estimator, mode=mode)
    return cfg.with_overrides(**changes) if changes else cfg


def _simulated_log(cfg: ScenarioConfig):
    seq = np.random.SeedSequence(cfg.seed).spawn(2)
    occ, sen = (np.random.default_rng(s) for s in seq)
    truth = sample_trace(cfg.theta_true, cfg.K, cfg.horizon, cfg.init, occ)
    sets = np.concatenate([fr.start + random_sensing_sets(cfg.horizon, fr.width, fr.kappa, sen)
                           for fr in cfg.fragments], axis=1)
    return truth, observe_trace(truth, sets, cfg.sensing, sen)


def cmd_simulate(cfg, args) -> int:
    truth, log = _simulated_log(cfg)
    write_trace_csv(truth, os.path.join(args.out, "occupancy_trace.csv"))
    log.write_csv(os.path.join(args.out, "sensing_log.csv"))
    return EXIT_OK


def cmd_estimate(cfg, args) -> int:
    log = (SensingLog.read_csv(args.input, cfg.K) if args.input else _simulated_log(cfg)[1])
    if log.tau < 2:
        raise ConfigError("estimate: the sensing log needs at least two slots")
    est = cfg.estimator
    fit = FragmentedEstimator(log, cfg.K_prime, cfg.sensing, cfg.init).run(
        ThetaVector.uniform(est.theta0), est.max_iters, est.tol, reference=cfg.theta_true)
    rows = [[r.iteration, r.log_likelihood, r.theta.q0, r.theta.q1, r.theta.p00, r.theta.p01,
             r.theta.p10, r.theta.p11, r.mse, log.tau] for r in fit.history]
    write_table(os.path.join(args.out, "estimator_trace.csv"), ESTIMATOR_COLUMNS, rows)
    th = fit.theta
    write_table(os.path.join(args.out, "theta_hat.csv"), ["parameter", "value"],
                [[n, getattr(th, n)] for n in ("p00", "p01", "p10", "p11", "q0", "q1")]
                + [[f"fragment{f + 1}_q{w}", fit.boundary[f][w]] for f in sorted(fit.boundary) for w in (0, 1)]
                + [["converged", fit.converged], ["degenerate", " ".join(fit.degenerate)]])
    return EXIT_OK if fit.converged else EXIT_NONCONVERGED


def cmd_solve(cfg, args) -> int:
    lams = args.lambdas or [cfg.lam]
    ok = True
    for lam in lams:
        out = args.out if len(lams) == 1 else os.path.join(args.out, f"lambda_{lam:g}")
        os.makedirs(out, exist_ok=True)
        solver = dataclasses.replace(cfg.solver, lam=lam)
        rows = []
        for fr, th in zip(cfg.fragments, fragment_thetas(cfg.theta_true, cfg.fragments)):
            res = cached_solve(th, fr.width, fr.kappa, solver, cfg.sensing)
            ok = ok and res.converged
            res.policy.write_csv(os.path.join(out, f"policy_fragment{fr.index + 1}.csv"))
            rows.extend([fr.index + 1, s.iteration, s.max_change, s.mean_value] for s in res.trace)
        write_table(os.path.join(out, "solver_trace.csv"), ["fragment", "iteration", "max_change", "mean_value"], rows)
    return EXIT_OK if ok else EXIT_NONCONVERGED


def cmd_run(cfg, args) -> int:
    lams = args.lambdas or [cfg.lam]
    ok = True
    for lam in lams:
        out = args.out if len(lams) == 1 else os.path.join(args.out, f"lambda_{lam:g}")
        res = run_scenario(cfg.with_overrides(lam=lam), args.agent)
        emit_report(res.report, out)
        for pol, fr in zip(res.policies, cfg.fragments):
            if pol is not None:
                pol.write_csv(os.path.join(out, f"policy_fragment{fr.index + 1}.csv"))
        ok = ok and res.converged
    return EXIT_OK if ok else EXIT_NONCONVERGED


def cmd_ma_run(cfg, args) -> int:
    lams = args.lambdas or [cfg.lam]
    ok = True
    for lam in lams:
        out = args.out if len(lams) == 1 else os.path.join(args.out, f"lambda_{lam:g}")
        ep = run_distributed_episode(cfg.with_overrides(lam=lam))
        emit_report(ep.report, out)
        write_table(os.path.join(out, "episode_log.csv"), EPISODE_COLUMNS, ep.log_rows)
        write_table(os.path.join(out, "consensus.csv"), ["node", "consensus_list", "round"],
                    [[i, " ".join(str(a) for a in (lst or ())), ep.consensus.rounds[i]]
                     for i, lst in sorted(ep.consensus.lists.items())])
        ok = ok and ep.consensus_ok
    return EXIT_OK if ok else EXIT_NONCONVERGED


def roc_table(cfg: ScenarioConfig, lambdas, seeds):
    """Median operating point per penalty plus the energy detector at matched false-alarm rate."""
    model = cfg.sensing
    rows, points, ok = [], [], True
    for lam in lambdas:
        runs = [run_scenario(cfg.with_overrides(lam=float(lam), seed=s)) for s in seeds]
        ok = ok and all(r.converged for r in runs)
        p_fa = float(np.median([r.report.scalars["p_fa"] for r in runs]))
        p_md = float(np.median([r.report.scalars["p_md"] for r in runs]))
        access = float(np.median([r.report.scalars["access_count"] for r in runs]))
        hits = float(np.median([r.report.scalars["interference_events"] for r in runs]))
        np_md = (and_fusion_miss_probability(cfg.roc.np_samples, p_fa, model.sigma_v2, model.variances[1])
                 if 0.0 < p_fa < 1.0 else float("nan"))
        idle = sum(r.report.roc[0].idle_cells for r in runs)
        busy = sum(r.report.roc[0].busy_cells for r in runs)
        points.append(RocPoint(float(lam), p_fa, p_md, idle, busy))
        rows.append([lam, p_fa, p_md, access, hits, np_md, len(seeds)])
    return rows, points, ok


def cmd_roc(cfg, args) -> int:
    lambdas = args.lambdas or list(cfg.roc.lambdas)
    seeds = [cfg.seed + i for i in range(cfg.roc.n_seeds)]
    rows, points, ok = roc_table(cfg, lambdas, seeds)
    rep = MetricsReport(roc=points)
    rep.scalars["roc_monotone"] = roc_is_monotone(points)
    rep.scalars["n_seeds"] = len(seeds)
    emit_report(rep, args.out)
    write_table(os.path.join(args.out, "roc_sweep.csv"),
                ["lambda", "p_fa", "p_md", "access_count", "interference_events", "np_p_md_at_p_fa", "n_seeds"],
                rows)
    return EXIT_OK if ok else EXIT_NONCONVERGED


def cmd_report(cfg, args) -> int:
    emit_report(read_report(args.input), args.out)
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "solve": cmd_solve,
    "run": cmd_run,
    "ma-run": cmd_ma_run,
    "roc": cmd_roc,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        os.makedirs(args.out, exist_ok=True)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
