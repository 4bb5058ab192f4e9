"""Command-line runner.

Commands write CSV files into ``--out`` (default ``out``).  Exit codes:
0 success, 1 usage or input errors, 2 non-convergence, 3 equivalence
conditions unmet, 4 equivalence gap above tolerance, 5 size or convexity
guards.
"""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .bellman import Operator, value_iteration
from .cmdp import GridSpec, build_double_integrator, load_cmdp
from .demo import DemoConfig, run_ablation, run_demo
from .errors import (
    ConditionsUnmet,
    FuzzyDPError,
    NoConvergence,
    NonFinite,
    NotConvex,
    TooLarge,
)
from .lagrangian import equivalence_check, load_kernels
from .learner import DensityModel, TrainConfig, save_model, train
from .measure import (
    FuzzyMeasure,
    all_dual_measures,
    all_subset_measures,
    core_extreme_points,
    members,
)
from .uncertainty import UncertaintyLevels

EQUIV_TOL = 1e-6
SUBSET_PRINT_MAX_K = 10

EXIT_OK, EXIT_USAGE, EXIT_NO_CONVERGENCE, EXIT_UNMET, EXIT_GAP, EXIT_GUARD = range(6)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else _fmt(v) for v in row])


# -- builders -----------------------------------------------------------------


def build_cmdp(cfg: cfgmod.RunConfig):
    if cfg.env == "file":
        cmdp = load_cmdp(cfg.cmdp_file)
    else:
        grid = GridSpec(cfg.grid_lows, cfg.grid_highs, cfg.grid_cells, cfg.n_actions)
        cmdp = build_double_integrator(grid, cfg.dynamics, cfg.dt)
    if cfg.gamma is not None:
        cmdp = cmdp.with_gamma(cfg.gamma)
    if cfg.budget is not None:
        cmdp = cmdp.with_budget(cfg.budget)
    return cmdp.check()


def build_measure(cfg: cfgmod.RunConfig, K: int | None = None) -> FuzzyMeasure:
    K = cfg.K if K is None else K
    if cfg.densities:
        if len(cfg.densities) != K:
            raise ValueError(f"{len(cfg.densities)} densities given for K = {K}")
        return FuzzyMeasure.from_densities(cfg.densities)
    if K == 1:
        return FuzzyMeasure.from_densities([0.5])
    return FuzzyMeasure.from_densities([cfg.density_sum / K] * K)


def build_levels(cfg: cfgmod.RunConfig) -> UncertaintyLevels:
    return UncertaintyLevels(cfg.K, cfg.eps_base, cfg.M, cfg.seed)


def demo_config(cfg: cfgmod.RunConfig, seed: int | None = None) -> DemoConfig:
    if len(set(cfg.grid_cells)) != 1 or len(cfg.grid_cells) != 2:
        raise ValueError("the demo needs a square 2-D grid")
    return DemoConfig(cells=cfg.grid_cells[0], n_actions=cfg.n_actions, dt=cfg.dt,
                      gamma=0.97 if cfg.gamma is None else cfg.gamma, penalty=cfg.penalty, K=cfg.K,
                      eps_base=cfg.eps_base, M=cfg.M, density_sum=cfg.density_sum,
                      test_level=cfg.test_level, episodes=cfg.episodes, horizon=cfg.horizon,
                      tol=cfg.tol, max_iter=cfg.max_iter, seed=cfg.seed if seed is None else seed,
                      threads=cfg.threads)


# -- commands -----------------------------------------------------------------


def cmd_vi(cfg, out: Path) -> int:
    cmdp = build_cmdp(cfg)
    if cfg.operator == "nominal":
        op = Operator("nominal")
    elif cfg.operator == "minmax":
        op = Operator("minmax", build_levels(cfg), threads=cfg.threads)
    else:
        op = Operator("fuzzy", build_levels(cfg), build_measure(cfg), threads=cfg.threads)
    V, trace = value_iteration(cmdp, op, tol=cfg.tol, max_iter=cfg.max_iter)
    write_csv(out / "residuals.csv", ["sweep", "residual"], enumerate(trace.residuals, start=1))
    write_csv(out / "values.csv", ["state", "V"], enumerate(V))
    status = "converged" if trace.converged else "not converged"
    print(f"{cfg.operator}: {status} after {trace.iterations} sweeps, residual {trace.residuals[-1]:.3e}")
    return EXIT_OK if trace.converged else EXIT_NO_CONVERGENCE


def cmd_demo_di(cfg, out: Path) -> int:
    results = run_demo(demo_config(cfg))
    write_csv(out / "demo.csv", ["operator", "AvgRet", "AvgRisk", "episodes"],
              [(r.operator, r.avg_return, r.avg_risk, r.episodes) for r in results])
    for r in results:
        print(f"{r.operator:8s} AvgRet {r.avg_return:9.3f}  AvgRisk {r.avg_risk:.3f}")
    return EXIT_OK if all(r.converged for r in results) else EXIT_NO_CONVERGENCE


def cmd_ablation(cfg, out: Path) -> int:
    rows = run_ablation(demo_config(cfg), cfg.ablation_K, cfg.seeds)
    write_csv(out / "ablation.csv", ["K", "seed", "AvgRet", "AvgRisk", "episodes"],
              [(K, seed, r.avg_return, r.avg_risk, r.episodes) for K, seed, r in rows])
    for K, seed, r in rows:
        print(f"K {K:3d} seed {seed}  AvgRet {r.avg_return:9.3f}  AvgRisk {r.avg_risk:.3f}")
    return EXIT_OK if all(r.converged for _, _, r in rows) else EXIT_NO_CONVERGENCE


def cmd_train(cfg, out: Path) -> int:
    cmdp = build_cmdp(cfg)
    if cfg.density_mode == "network":
        n_features = cmdp.geometry.centers().shape[1]
        model = DensityModel.network(n_features, cfg.K, lr=cfg.lr, seed=cfg.seed)
    else:
        model = DensityModel.tabular(cmdp.n_states, cfg.K, lr=cfg.lr)
        if cfg.densities:
            raise ValueError("train learns densities; leave 'densities' unset")
    tcfg = TrainConfig(alpha=cfg.alpha, iters=cfg.iters, sweeps_per_iter=cfg.sweeps_per_iter,
                       fuzzy_every=cfg.fuzzy_every, episodes=cfg.train_episodes,
                       horizon=cfg.train_horizon, seed=cfg.seed)
    result = train(cmdp, build_levels(cfg), model, tcfg, threads=cfg.threads)
    write_csv(out / "train.csv", ["iter", "J_r", "J_c", "multiplier", "fuzzy_loss"], result.history)
    write_csv(out / "policy.csv", ["state", "action"], enumerate(result.policy))
    save_model(result.model, out / "model.txt")
    last = result.history[-1]
    print(f"stopped ({result.stop_reason}) after {len(result.history)} iterations: "
          f"J_r {last[1]:.6f}, J_c {last[2]:.6f}, multiplier {last[3]:.6f}")
    return EXIT_OK


def cmd_equiv(cfg, out: Path) -> int:
    if not cfg.cmdp_file or not cfg.kernels_file:
        raise ValueError("equiv needs cmdp_file and kernels_file")
    cmdp = load_cmdp(cfg.cmdp_file)
    if cfg.gamma is not None:
        cmdp = cmdp.with_gamma(cfg.gamma)
    kernels = load_kernels(cfg.kernels_file)
    densities = cfg.densities or tuple(build_measure(cfg, kernels.K).g)
    try:
        report = equivalence_check(cmdp, kernels, densities, cfg.uncertainty_set)
        code = EXIT_OK if max(report.gap_r, report.gap_c) <= EQUIV_TOL else EXIT_GAP
    except ConditionsUnmet as exc:
        report = exc.report
        code = EXIT_UNMET
    out.mkdir(parents=True, exist_ok=True)
    (out / "equiv.txt").write_text(report.text())
    write_csv(out / "equiv.csv", ["objective", "J_fuzzy", "J_robust", "gap"], report.csv_rows())
    sys.stdout.write(report.text())
    return code


def cmd_measure(args) -> int:
    g = [float(x) for x in args.densities.replace(",", " ").split()]
    m = FuzzyMeasure.from_densities(g)
    print(f"lambda = {m.lam!r}")
    if m.K <= SUBSET_PRINT_MAX_K:
        table = all_subset_measures(m)
        duals = all_dual_measures(m)
        print("subset,measure,dual")
        for A in range(1 << m.K):
            label = "{" + " ".join(str(k + 1) for k in members(A)) + "}"
            print(f"{label},{float(table[A])!r},{float(duals[A])!r}")
    if args.core:
        core = core_extreme_points(m)
        print("permutation,point")
        for perm, point in zip(core.permutations, core.points):
            print(" ".join(str(int(k) + 1) for k in perm) + "," + " ".join(repr(float(x)) for x in point))
    return EXIT_OK


COMMANDS = {"vi": cmd_vi, "demo-di": cmd_demo_di, "ablation": cmd_ablation, "train": cmd_train,
            "equiv": cmd_equiv}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file; flags override it")
    for f in cfgmod.RunConfig.__dataclass_fields__.values():
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None, metavar="VALUE",
                       help=f"default: {f.default!r}")


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fuzzydp", description="Fuzzy-measure dynamic programming for constrained MDPs.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {"vi": "value iteration; writes residuals.csv and values.csv",
             "demo-di": "double-integrator operator comparison; writes demo.csv",
             "ablation": "fuzzy demo across level counts; writes ablation.csv",
             "train": "primal-dual loop with learned densities; writes train.csv",
             "equiv": "fuzzy vs robust objectives on a kernel family; writes equiv.txt/csv"}
    for name, text in helps.items():
        _add_config_flags(sub.add_parser(name, help=text))
    p = sub.add_parser("measure", help="print lambda, subset measures and core points")
    p.add_argument("densities", help="comma-separated densities, e.g. 0.3,0.3")
    p.add_argument("--core", action="store_true", help="also list core extreme points")
    return parser


def resolve_config(args) -> cfgmod.RunConfig:
    file_values = cfgmod.load_config(args.config) if args.config else {}
    flags = {}
    for name in cfgmod.RunConfig.__dataclass_fields__:
        text = getattr(args, name)
        if text is not None:
            flags[name] = cfgmod.parse_value(name, text)
    return cfgmod.build_config(args.command, file_values, flags)


def main(argv=None) -> int:
    try:
        args = make_parser().parse_args(argv)
        if args.command == "measure":
            return cmd_measure(args)
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, Path(cfg.out))
    except SystemExit as exc:
        return int(exc.code or 0)
    except (TooLarge, NotConvex) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GUARD
    except (NoConvergence, NonFinite) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    except (UsageError, FuzzyDPError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
