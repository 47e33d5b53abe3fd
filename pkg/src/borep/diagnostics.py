"""Verification instruments: finite-difference gradient checks, secant-based
smoothness estimation along trajectories, and statistical ensembles that test
the solver's high-probability guarantees on problems with closed forms.

Everything here reports measured margins, not just pass/fail: the structural
bounds are often loose, and a pass at 100x margin says something different
from a pass at 1.05x.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import (
    MissingAnalyticLayer,
    RngToken,
    StochasticBilevelProblem,
    Vector,
    check_point,
    derive_constants,
)
from .lower import EpochSgdSchedule, epoch_sgd
from .solver import BorepConfig, hypergrad_estimate, run_borep, run_tracking_ensemble

STEP_GUARD = 1e-10


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def finite_diff_grad(fn: Callable[[np.ndarray], float], x: Vector, h: float) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        hi, lo = fn(x + e), fn(x - e)
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise ValueError(f"fn non-finite near coordinate {i}")
        grad[i] = (hi - lo) / (2.0 * h)
    return grad


@dataclass(frozen=True)
class GradCheckReport:
    n_points: int
    h: float
    tol: float
    max_rel_err: float
    passed: bool

    def to_dict(self) -> dict:
        return {
            "n_points": self.n_points, "h": self.h, "tol": self.tol,
            "max_rel_err": self.max_rel_err, "passed": self.passed,
        }


def check_hypergrad(
    problem: StochasticBilevelProblem,
    n_points: int = 20,
    tol: float = 1e-5,
    h: float = 1e-5,
    seed: int = 0,
    x_scale: float = 1.0,
) -> GradCheckReport:
    """Compare the closed-form hypergradient against central finite
    differences of x -> f(x, y*(x)) at random points."""
    if not problem.has_analytic:
        raise MissingAnalyticLayer("check_hypergrad needs the analytic layer")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_points):
        x = rng.standard_normal(problem.d_x) * x_scale
        exact = problem.phi_grad_exact(x)
        fd = finite_diff_grad(problem.phi_value, x, h)
        rel = float(np.linalg.norm(fd - exact) / max(np.linalg.norm(exact), 1e-30))
        worst = max(worst, rel)
    return GradCheckReport(n_points, h, tol, worst, worst <= tol)


# ---------------------------------------------------------------------------
# Smoothness estimation (secant method along a trajectory)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SmoothnessScatter:
    """(gradient norm, local Lipschitz estimate) pairs along a trajectory."""

    grad_norms: np.ndarray
    local_lip: np.ndarray

    def __post_init__(self):
        if self.grad_norms.shape != self.local_lip.shape:
            raise ValueError("mismatched scatter arrays")
        if np.any(self.local_lip < 0):
            raise ValueError("local Lipschitz estimates must be >= 0")

    def __len__(self) -> int:
        return self.grad_norms.size


@dataclass(frozen=True)
class LineFit:
    slope: float
    intercept: float
    r2: float

    def to_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "r2": self.r2}


def estimate_smoothness(
    grad_fn: Callable[[np.ndarray], np.ndarray], trajectory: Sequence[np.ndarray]
) -> SmoothnessScatter:
    """Secant smoothness estimates between consecutive trajectory points:
    local_L = ||grad(x_{k+1}) - grad(x_k)|| / ||x_{k+1} - x_k||, recorded
    against ||grad(x_k)|| whenever the step clears the 1e-10 guard."""
    pts = [np.asarray(p, dtype=np.float64) for p in trajectory]
    if len(pts) < 2:
        raise ValueError("trajectory must contain at least 2 points")
    grads = [np.asarray(grad_fn(p), dtype=np.float64) for p in pts]
    norms, lips = [], []
    for k in range(len(pts) - 1):
        step = float(np.linalg.norm(pts[k + 1] - pts[k]))
        if step <= STEP_GUARD:
            continue
        norms.append(float(np.linalg.norm(grads[k])))
        lips.append(float(np.linalg.norm(grads[k + 1] - grads[k])) / step)
    return SmoothnessScatter(np.asarray(norms), np.asarray(lips))


def fit_line(scatter: SmoothnessScatter) -> LineFit:
    """Ordinary least squares of local_L against gradient norm."""
    x, y = scatter.grad_norms, scatter.local_lip
    if x.size < 2 or np.unique(x).size < 2:
        raise ValueError("degenerate scatter: need >= 2 distinct gradient norms")
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - float(np.sum(resid**2)) / ss_tot
    return LineFit(float(slope), float(intercept), float(min(max(r2, 0.0), 1.0)))


def collect_x_trajectory(problem, cfg: BorepConfig, x0, y_init, z0=None, seed: int = 0) -> list:
    """x iterates of one solver run (initial point included as row 0)."""
    xs: list = []
    run_borep(
        problem, cfg, x0, y_init, z0, seed,
        observers=(lambda rec, state: xs.append(state.x.copy()),),
    )
    return xs


# ---------------------------------------------------------------------------
# Lemma-verification ensembles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LemmaReport:
    lemma: str
    n_trials: int
    threshold: float
    success_fraction: float
    required_fraction: float
    passed: bool
    margin_mean: float
    margin_worst: float
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "lemma": self.lemma,
            "n_trials": self.n_trials,
            "threshold": self.threshold,
            "success_fraction": self.success_fraction,
            "required_fraction": self.required_fraction,
            "passed": self.passed,
            "margin_mean": self.margin_mean,
            "margin_worst": self.margin_worst,
            **self.details,
        }


def _report(lemma, measured, threshold, delta, details) -> LemmaReport:
    measured = np.asarray(measured, dtype=np.float64)
    success = measured <= threshold
    margins = measured / threshold if threshold > 0 else measured
    return LemmaReport(
        lemma=lemma,
        n_trials=int(measured.size),
        threshold=float(threshold),
        success_fraction=float(np.mean(success)),
        required_fraction=1.0 - delta,
        passed=bool(np.mean(success) >= 1.0 - delta),
        margin_mean=float(np.mean(margins)),
        margin_worst=float(np.max(margins)),
        details=details,
    )


def verify_lemma_ensemble(
    lemma_id: str,
    problem: StochasticBilevelProblem,
    schedule,
    n_seeds: int,
    delta: float,
    *,
    eps: float,
    k0: Optional[float] = None,
    x0: Optional[Vector] = None,
    y_init: Optional[Vector] = None,
    seed: int = 0,
    n_draws: int = 10_000,
) -> LemmaReport:
    """Statistical check of one high-probability guarantee.

    * ``init_refinement``: ``schedule`` is an :class:`EpochSgdSchedule`; runs
      the refinement across seeds and checks ||y0 - y*(x0)|| <= eps/(8 K0).
    * ``periodic_tracking``: ``schedule`` is a :class:`BorepConfig`; runs the
      full solver dynamics across seeds and checks
      max_k ||y_k - y*(x_k)|| <= eps/(4 K0).
    * ``bias_at_optimum``: per trial, the mean of ``n_draws`` hypergradient
      samples at (y*(x0), z*(x0)) must match grad Phi(x0) within the
      structural bound at zero lower-level error plus 4-sigma Monte-Carlo
      slack.

    The report is a pure function of its inputs; identical calls agree exactly.
    """
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    if not problem.has_analytic:
        raise MissingAnalyticLayer("lemma ensembles measure errors against closed forms")
    if k0 is None:
        k0 = derive_constants(problem.constants).K0
    x0 = np.zeros(problem.d_x) if x0 is None else check_point(x0, problem.d_x, "x0")
    y_init = np.zeros(problem.d_y) if y_init is None else check_point(y_init, problem.d_y, "y_init")

    if lemma_id == "init_refinement":
        if not isinstance(schedule, EpochSgdSchedule):
            raise ValueError("init_refinement needs an EpochSgdSchedule")
        batch = np.broadcast_to(y_init, (n_seeds, problem.d_y)).copy()
        y0, calls = epoch_sgd(problem, x0, batch, schedule, RngToken(seed, "lower-init"))
        err = np.linalg.norm(y0 - problem.y_star(x0), axis=-1)
        return _report(
            "init_refinement", err, eps / (8.0 * k0), delta,
            {"oracle_calls_per_seed": calls, "eps": eps, "K0": k0},
        )

    if lemma_id == "periodic_tracking":
        if not isinstance(schedule, BorepConfig):
            raise ValueError("periodic_tracking needs a BorepConfig")
        stats = run_tracking_ensemble(problem, schedule, x0, y_init, seed, n_seeds)
        return _report(
            "periodic_tracking", stats.max_err, eps / (4.0 * k0), delta,
            {
                "eps": eps, "K0": k0, "K": stats.total_iters,
                "I": schedule.lower.period, "N": schedule.lower.n_steps,
                "eta": schedule.eta, "lower_calls": stats.lower_calls,
                "init_err_max": float(np.max(stats.init_err)),
            },
        )

    if lemma_id == "bias_at_optimum":
        c = problem.constants
        ys = problem.y_star(x0)
        zs = problem.z_star(x0)
        grad = problem.phi_grad_exact(x0)
        xb = np.broadcast_to(x0, (n_draws, problem.d_x))
        yb = np.broadcast_to(ys, (n_draws, problem.d_y))
        zb = np.broadcast_to(zs, (n_draws, problem.d_y))
        excess = np.empty(n_seeds)
        slacks = np.empty(n_seeds)
        for s in range(n_seeds):
            samples = hypergrad_estimate(problem, xb, yb, zb, RngToken(seed + s, "upper", 0))
            mean = samples.mean(axis=0)
            comp_var = samples.var(axis=0, ddof=1) if n_draws > 1 else np.zeros(problem.d_x)
            slack = 4.0 * math.sqrt(float(np.sum(comp_var)) / n_draws)
            # structural bound at measured dy = dz = 0 is exactly zero
            excess[s] = float(np.linalg.norm(mean - grad))
            slacks[s] = max(slack, 1e-12)
        return _report(
            "bias_at_optimum", excess / slacks, 1.0, delta,
            {"n_draws": n_draws, "grad_norm": float(np.linalg.norm(grad)),
             "mean_slack": float(np.mean(slacks))},
        )

    raise ValueError(f"unknown lemma_id {lemma_id!r}")


def lemma4_bias_bound(c, dy: float, dz: float, grad_norm: float) -> float:
    """Structural hypergradient-bias bound at measured lower-level errors:
    L_x1 dy ||grad Phi|| + (L_x0 + L_x1 C M / mu + tau M / mu) dy + C dz."""
    return (
        c.L_x1 * dy * grad_norm
        + (c.L_x0 + c.L_x1 * c.C_gxy * c.M / c.mu + c.tau * c.M / c.mu) * dy
        + c.C_gxy * dz
    )


def mc_hypergrad_mean(
    problem: StochasticBilevelProblem, x, y, z, n: int, seed: int = 0
) -> np.ndarray:
    """Monte-Carlo mean of the hypergradient estimator over fresh tokens."""
    xb = np.broadcast_to(np.asarray(x, dtype=np.float64), (n, problem.d_x))
    yb = np.broadcast_to(np.asarray(y, dtype=np.float64), (n, problem.d_y))
    zb = np.broadcast_to(np.asarray(z, dtype=np.float64), (n, problem.d_y))
    return hypergrad_estimate(problem, xb, yb, zb, RngToken(seed, "upper", 0)).mean(axis=0)
