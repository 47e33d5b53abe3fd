"""Command-line surface: run | sweep | schedule | check-grad | smoothness | verify-lemma.

Configs and problems are JSON (inline text or file paths); outputs are CSV
traces plus JSON reports on stdout.  Exit codes: 0 success, 1 validation
error (bad flags, bad config, failed check), 2 runtime failure.  The sweep
worker pool is capped by the BOREP_THREADS environment variable.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import diagnostics, problems, trace as trace_mod
from .baselines import SobaConfig, run_ma_soba, run_soba
from .core import BorepError, MissingAnalyticLayer, RngToken, derive_constants
from .lower import build_epoch_schedule, estimate_v0
from .solver import BorepConfig, ScheduleInput, practical_config, run_borep, theory_schedule


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage errors, not argparse's 2
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _load_json_arg(text):
    """Inline JSON or a path to a JSON file."""
    s = text.strip()
    if s.startswith("{") or s.startswith("["):
        return json.loads(s)
    with open(text) as fh:
        return json.load(fh)


def _parse_vector(text, dim, name):
    if text is None:
        return np.zeros(dim)
    vec = np.array([float(t) for t in text.split(",")], dtype=np.float64)
    if vec.shape != (dim,):
        raise ValueError(f"{name} needs {dim} comma-separated numbers")
    return vec


def _theory_inputs(problem, spec_text, x0, y_init, z0, seed):
    """Build a ScheduleInput from 'theory:eps=..,delta=..[,v0=..][,Delta=..]'."""
    opts = {}
    body = spec_text.split(":", 1)[1] if ":" in spec_text else ""
    for part in filter(None, body.split(",")):
        key, _, val = part.partition("=")
        opts[key.strip()] = float(val)
    if "eps" not in opts or "delta" not in opts:
        raise ValueError("theory config needs at least eps=..,delta=..")
    c = problem.constants
    der = derive_constants(c)
    if problem.has_analytic:
        grad0 = float(np.linalg.norm(problem.phi_grad_exact(x0)))
        big_delta = opts.get("Delta", max(problem.phi_value(x0), 1e-6))
        dz0 = float(np.sum((z0 - problem.z_star(x0)) ** 2))
    else:
        # no closed forms: estimate the initial gradient by the Monte-Carlo
        # mean of the estimator and bound ||z*|| by M/mu
        grad0 = float(np.linalg.norm(diagnostics.mc_hypergrad_mean(problem, x0, y_init, z0, 256, seed)))
        big_delta = opts.get("Delta", max(problem.f_value_estimate(x0, y_init, RngToken(seed, "upper")), 1e-6))
        dz0 = float(np.sum(z0**2)) + (c.M / c.mu) ** 2
    v0 = opts.get("v0")
    if v0 is None:
        try:
            v0 = estimate_v0(problem, x0, y_init, RngToken(seed, "lower-init"))
        except MissingAnalyticLayer:
            v0 = None
    return ScheduleInput(
        eps=opts["eps"],
        delta=opts["delta"],
        big_delta=big_delta,
        delta_z0=dz0,
        grad_phi_x0_norm=grad0,
        constants=c,
        derived=der,
        v0=v0,
    )


def _borep_config(problem, config_text, x0, y_init, z0, seed) -> BorepConfig:
    if config_text.strip().startswith("theory"):
        return theory_schedule(_theory_inputs(problem, config_text, x0, y_init, z0, seed))
    obj = _load_json_arg(config_text)
    return practical_config(
        eta=float(obj["eta"]),
        beta=float(obj.get("beta", 0.9)),
        nu=float(obj["nu"]),
        period=int(obj.get("I", 2)),
        n_steps=int(obj.get("N", 3)),
        gamma=float(obj["gamma"]),
        radius=float(obj.get("R", 0.5)),
        total_iters=int(obj["K"]),
        init_steps=int(obj.get("init_steps", 100)),
        init_alpha=obj.get("init_alpha"),
    )


def _run_one(problem, args, seed, out_path):
    x0 = _parse_vector(args.x0, problem.d_x, "--x0")
    y0 = _parse_vector(args.y0, problem.d_y, "--y0")
    z0 = _parse_vector(args.z0, problem.d_y, "--z0")
    if args.algo == "borep":
        cfg = _borep_config(problem, args.config, x0, y0, z0, seed)
        result = run_borep(problem, cfg, x0, y0, z0, seed, trace_every=args.trace_every)
    else:
        obj = _load_json_arg(args.config)
        cfg = SobaConfig(
            eta_x=float(obj["eta_x"]),
            eta_y=float(obj["eta_y"]),
            eta_z=float(obj["eta_z"]),
            beta=float(obj.get("beta", 0.0)),
            total_iters=int(obj["K"]),
        )
        runner = run_soba if args.algo == "soba" else run_ma_soba
        result = runner(problem, cfg, x0, y0, z0, seed, trace_every=args.trace_every)
    if out_path:
        trace_mod.write_csv(result, out_path, timing=args.timing)
    return result


def _final_stationarity(tr: trace_mod.RunTrace, window: float = 0.1) -> float:
    vals = [r.grad_phi_exact for r in tr.records if r.grad_phi_exact is not None]
    if not vals:
        vals = [r.grad_est_norm for r in tr.records if r.grad_est_norm is not None]
    if not vals:
        return math.nan
    tail = vals[-max(1, int(len(vals) * window)):]
    return float(np.mean(tail))


def _cmd_run(args) -> int:
    problem = problems.from_json(_load_json_arg(args.problem))
    result = _run_one(problem, args, args.seed, args.out)
    final = result.final
    print(json.dumps({
        "schema": 1,
        "algo": args.algo,
        "seed": args.seed,
        "iterations": final.k,
        "final_stationarity": _final_stationarity(result),
        "oracle_f": final.oracle_f,
        "oracle_g": final.oracle_g,
        "out": args.out,
    }))
    return 0


def _parse_seed_spec(spec: str) -> list:
    if ".." in spec:
        lo, hi = spec.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in spec.split(",")]


def _cmd_sweep(args) -> int:
    problem = problems.from_json(_load_json_arg(args.problem))
    seeds = _parse_seed_spec(args.seeds)
    os.makedirs(args.out_dir, exist_ok=True)
    workers = int(os.environ.get("BOREP_THREADS", "0")) or min(8, os.cpu_count() or 1)

    def one(seed):
        out = os.path.join(args.out_dir, f"run_{seed}.csv")
        tr = _run_one(problem, args, seed, out)
        return seed, _final_stationarity(tr)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = dict(pool.map(one, seeds))

    finals = np.array([results[s] for s in seeds], dtype=np.float64)
    summary = {
        "schema": 1,
        "algo": args.algo,
        "seeds": seeds,
        "final_stationarity_mean": float(np.nanmean(finals)),
        "final_stationarity_std": float(np.nanstd(finals)),
        "per_seed": {str(s): results[s] for s in seeds},
    }
    with open(os.path.join(args.out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    print(json.dumps(summary))
    return 0


def _cmd_schedule(args) -> int:
    problem = problems.from_json(_load_json_arg(args.problem))
    x0 = _parse_vector(args.x0, problem.d_x, "--x0")
    y0 = _parse_vector(args.y0, problem.d_y, "--y0")
    z0 = np.zeros(problem.d_y)
    spec = f"theory:eps={args.eps},delta={args.delta}"
    if args.v0 is not None:
        spec += f",v0={args.v0}"
    inp = _theory_inputs(problem, spec, x0, y0, z0, args.seed)
    cfg = theory_schedule(inp)
    epoch = cfg.epoch if cfg.epoch is not None else build_epoch_schedule(
        inp.v0 if inp.v0 is not None else 1.0, cfg.k0, args.eps, args.delta, problem.constants
    )
    out = {
        "schema": 1,
        "eps": args.eps,
        "delta": args.delta,
        "I": cfg.lower.period,
        "N": cfg.lower.n_steps,
        "gamma": cfg.lower.gamma,
        "R": cfg.lower.radius,
        "eta": cfg.eta,
        "beta": cfg.beta,
        "nu": cfg.nu,
        "K": cfg.total_iters,
        "K0": cfg.k0,
        "epoch": epoch.to_dict(),
    }
    print(json.dumps(out, sort_keys=True))
    return 0


def _cmd_check_grad(args) -> int:
    problem = problems.from_json(_load_json_arg(args.problem))
    report = diagnostics.check_hypergrad(
        problem, n_points=args.n_points, tol=args.tol, h=args.h, seed=args.seed
    )
    print(json.dumps({"schema": 1, **report.to_dict()}))
    return 0 if report.passed else 1


def _cmd_smoothness(args) -> int:
    problem = problems.from_json(_load_json_arg(args.problem))
    if not problem.has_analytic:
        raise MissingAnalyticLayer("smoothness fitting needs exact gradients")
    x0 = _parse_vector(args.x0, problem.d_x, "--x0")
    y0 = _parse_vector(args.y0, problem.d_y, "--y0")
    z0 = np.zeros(problem.d_y)
    cfg = _borep_config(problem, args.config, x0, y0, z0, args.seed)
    xs = diagnostics.collect_x_trajectory(problem, cfg, x0, y0, None, args.seed)
    scatter = diagnostics.estimate_smoothness(problem.phi_grad_exact, xs)
    fit = diagnostics.fit_line(scatter)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("grad_norm,local_lipschitz\n")
            for gn, ll in zip(scatter.grad_norms, scatter.local_lip):
                fh.write(f"{gn:.17g},{ll:.17g}\n")
    print(json.dumps({"schema": 1, "n_points": len(scatter), **fit.to_dict()}))
    return 0


def _cmd_verify_lemma(args) -> int:
    problem = problems.from_json(_load_json_arg(args.problem))
    x0 = _parse_vector(args.x0, problem.d_x, "--x0")
    y0 = _parse_vector(args.y0, problem.d_y, "--y0")
    k0 = args.k0 if args.k0 is not None else derive_constants(problem.constants).K0
    if args.lemma == "init_refinement":
        v0 = args.v0 if args.v0 is not None else estimate_v0(
            problem, x0, y0, RngToken(args.seed, "lower-init")
        )
        schedule = build_epoch_schedule(v0, k0, args.eps, args.delta, problem.constants)
    elif args.lemma == "periodic_tracking":
        inp = _theory_inputs(
            problem,
            f"theory:eps={args.eps},delta={args.delta}" + (f",v0={args.v0}" if args.v0 else ""),
            x0, y0, np.zeros(problem.d_y), args.seed,
        )
        schedule = theory_schedule(inp)
        if args.max_iters is not None and schedule.total_iters > args.max_iters:
            schedule = BorepConfig(
                eta=schedule.eta, beta=schedule.beta, nu=schedule.nu,
                lower=schedule.lower, epoch=schedule.epoch,
                total_iters=args.max_iters, mode="theory",
                eps=schedule.eps, delta=schedule.delta, k0=schedule.k0,
            )
    else:
        schedule = None
    report = diagnostics.verify_lemma_ensemble(
        args.lemma, problem, schedule, args.seeds, args.delta,
        eps=args.eps, k0=k0, x0=x0, y_init=y0, seed=args.seed, n_draws=args.n_draws,
    )
    print(json.dumps({"schema": 1, **report.to_dict()}))
    return 0 if report.passed else 1


def build_parser() -> _Parser:
    parser = _Parser(prog="borep", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        p.add_argument("--problem", required=True, help="problem JSON (inline or path)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--x0", default=None, help="comma-separated initial x")
        p.add_argument("--y0", default=None, help="comma-separated initial y")
        if config:
            p.add_argument("--config", required=True,
                           help="config JSON, or theory:eps=..,delta=..")

    p_run = sub.add_parser("run", help="one solver run, CSV trace out")
    common(p_run)
    p_run.add_argument("--algo", choices=("borep", "soba", "ma-soba"), default="borep")
    p_run.add_argument("--z0", default=None)
    p_run.add_argument("--out", default=None, help="CSV trace path")
    p_run.add_argument("--timing", choices=("zero", "real"), default="zero")
    p_run.add_argument("--trace-every", type=int, default=1, dest="trace_every")
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="seed sweep with aggregate summary")
    common(p_sweep)
    p_sweep.add_argument("--algo", choices=("borep", "soba", "ma-soba"), default="borep")
    p_sweep.add_argument("--z0", default=None)
    p_sweep.add_argument("--seeds", required=True, help="e.g. 0..49 or 0,3,7")
    p_sweep.add_argument("--out-dir", required=True, dest="out_dir")
    p_sweep.add_argument("--timing", choices=("zero", "real"), default="zero")
    p_sweep.add_argument("--trace-every", type=int, default=1, dest="trace_every")
    p_sweep.set_defaults(func=_cmd_sweep)

    p_sched = sub.add_parser("schedule", help="print the full theory schedule as JSON")
    common(p_sched, config=False)
    p_sched.add_argument("--eps", type=float, required=True)
    p_sched.add_argument("--delta", type=float, required=True)
    p_sched.add_argument("--v0", type=float, default=None)
    p_sched.set_defaults(func=_cmd_schedule)

    p_check = sub.add_parser("check-grad", help="finite-difference hypergradient check")
    common(p_check, config=False)
    p_check.add_argument("--n-points", type=int, default=20, dest="n_points")
    p_check.add_argument("--tol", type=float, default=1e-5)
    p_check.add_argument("--h", type=float, default=1e-5)
    p_check.set_defaults(func=_cmd_check_grad)

    p_smooth = sub.add_parser("smoothness", help="secant smoothness fit along a run")
    common(p_smooth)
    p_smooth.add_argument("--out", default=None, help="scatter CSV path")
    p_smooth.set_defaults(func=_cmd_smoothness)

    p_lemma = sub.add_parser("verify-lemma", help="statistical lemma verification")
    common(p_lemma, config=False)
    p_lemma.add_argument("--lemma", required=True,
                         choices=("init_refinement", "periodic_tracking", "bias_at_optimum"))
    p_lemma.add_argument("--eps", type=float, required=True)
    p_lemma.add_argument("--delta", type=float, required=True)
    p_lemma.add_argument("--seeds", type=int, default=50)
    p_lemma.add_argument("--k0", type=float, default=None)
    p_lemma.add_argument("--v0", type=float, default=None)
    p_lemma.add_argument("--n-draws", type=int, default=10_000, dest="n_draws")
    p_lemma.add_argument("--max-iters", type=int, default=None, dest="max_iters")
    p_lemma.set_defaults(func=_cmd_verify_lemma)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, json.JSONDecodeError, MissingAnalyticLayer) as exc:
        sys.stderr.write(f"borep: {exc}\n")
        return 1
    except (BorepError, Exception) as exc:  # noqa: BLE001 - CLI boundary
        sys.stderr.write(f"borep: runtime failure: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
