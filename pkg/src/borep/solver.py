"""The main solver: hypergradient estimation, the linear-system variable z,
normalized-momentum upper updates, the theory parameter schedule, and the
full run loop.

Per iteration the solver (i) periodically refreshes the lower-level variable,
(ii) takes one stochastic step on the quadratic whose minimizer is
z*(x) = [grad2_y g]^{-1} grad_y f, (iii) forms the hypergradient estimate
grad_x F - (grad_x grad_y G) z and folds it into a momentum buffer, and
(iv) moves x a fixed distance eta along the momentum direction.  The
fixed-length step is what keeps the drift of y*(x_k) controllable under
unbounded smoothness, so the step-norm identity ||x_{k+1} - x_k|| = eta is
asserted by the trace tests rather than left implicit.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from .core import (
    KIND_GRAD_X_F,
    KIND_GRAD_Y_F,
    DerivedConstants,
    NonFiniteStateError,
    ProblemConstants,
    RngToken,
    StochasticBilevelProblem,
    Vector,
    check_point,
    smoothness_radius,
)
from .lower import (
    EpochSgdSchedule,
    LowerUpdateConfig,
    build_epoch_schedule,
    epoch_sgd,
    estimate_v0,
    tracking_gamma,
    tracking_lambda,
    tracking_n,
    update_lower,
)
from .trace import RunTrace, TraceRecord

DEGENERATE_MOMENTUM = 1e-12


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BorepConfig:
    """Every step size, period, count, and radius of one solver run.

    ``epoch`` may be None in theory mode, in which case the initialization
    schedule is built at run time from an estimated V0 (requires ``eps``,
    ``delta`` and ``k0`` to be present).
    """

    eta: float
    beta: float
    nu: float
    lower: LowerUpdateConfig
    epoch: Optional[EpochSgdSchedule]
    total_iters: int
    mode: str = "practical"
    eps: Optional[float] = None
    delta: Optional[float] = None
    k0: Optional[float] = None

    def __post_init__(self):
        if not (self.eta > 0 and self.nu > 0):
            raise ValueError("eta and nu must be positive")
        if not (0.0 <= self.beta < 1.0):
            raise ValueError("beta must be in [0, 1)")
        # K = 0 is allowed and yields a trace with only the initialization row.
        if self.total_iters < 0:
            raise ValueError("total_iters must be >= 0")
        if self.mode not in ("theory", "practical"):
            raise ValueError("mode must be 'theory' or 'practical'")
        if self.epoch is None and (self.eps is None or self.delta is None or self.k0 is None):
            raise ValueError("deferred epoch schedule needs eps, delta, and k0")

    def to_dict(self) -> dict:
        return {
            "eta": self.eta,
            "beta": self.beta,
            "nu": self.nu,
            "lower": self.lower.to_dict(),
            "epoch": self.epoch.to_dict() if self.epoch is not None else None,
            "K": self.total_iters,
            "mode": self.mode,
            "eps": self.eps,
            "delta": self.delta,
            "K0": self.k0,
        }


@dataclass(frozen=True)
class ScheduleInput:
    """Inputs of the theory schedule.

    ``big_delta`` bounds the initial suboptimality Phi(x0) - inf Phi,
    ``delta_z0`` is the squared distance of z0 from z*(x0), and
    ``grad_phi_x0_norm`` is (an upper bound on) the initial hypergradient
    norm.  ``v0`` optionally bounds the initial lower-level gap; left None,
    the solver estimates it at run time.
    """

    eps: float
    delta: float
    big_delta: float
    delta_z0: float
    grad_phi_x0_norm: float
    constants: ProblemConstants
    derived: DerivedConstants
    v0: Optional[float] = None

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not (0 < self.delta < 1):
            raise ValueError("delta must be in (0, 1)")
        if self.big_delta <= 0:
            raise ValueError("big_delta must be positive")
        if self.delta_z0 < 0 or self.grad_phi_x0_norm < 0:
            raise ValueError("delta_z0 and grad_phi_x0_norm must be >= 0")


def _safe_div(num: float, den: float) -> float:
    return math.inf if den == 0 else num / den


def theory_schedule(inp: ScheduleInput) -> BorepConfig:
    """Full parameter schedule achieving the high-probability guarantee.

    Order of computation: momentum level (1 - beta), then nu, the update
    period I, the step size eta (three-way cap), the iteration budget K, and
    finally the high-probability parameter lambda that fixes (gamma, N) of
    the periodic update and R = eps / (4 K0).
    """
    c, der = inp.constants, inp.derived
    eps, delta = inp.eps, inp.delta
    mu = c.mu
    k0, k1 = der.K0, der.K1
    if k0 <= 0:
        raise ValueError("K0 must be positive for the theory schedule")

    noise_mix = c.sigma_f1**2 + 2.0 * c.M**2 * c.sigma_g2**2 / mu**2
    coupling_damp = min(1.0, _safe_div(mu**2, 32.0 * c.C_gxy**2))
    eps_cap = min(
        _safe_div(k0, k1),
        math.sqrt(_safe_div(noise_mix, coupling_damp)) if noise_mix > 0 else 0.0,
    )
    if eps > eps_cap:
        warnings.warn(
            f"eps={eps:g} exceeds the admissible cap {eps_cap:g}; "
            "the high-probability guarantee may not apply",
            stacklevel=2,
        )

    # C_gxy = 0 decouples the levels: z never enters the hypergradient, so the
    # coupling-driven caps are vacuous and treated as +inf.
    one_minus_beta = min(
        _safe_div(eps**2, noise_mix) * coupling_damp,
        _safe_div(c.C_gxy**2, 8.0 * c.sigma_g2**2) if c.C_gxy > 0 else math.inf,
        _safe_div(mu**2, 16.0 * c.sigma_g2**2),
        0.25,
    )
    beta = 1.0 - one_minus_beta
    nu = one_minus_beta / mu

    period = max(1, math.ceil(_safe_div(c.sigma_g1**2 * k0**2, mu**2 * eps**2)))
    if c.sigma_g1 == 0:
        period = 1

    eta_head = 0.125 * one_minus_beta * min(
        _safe_div(1.0, k1),
        eps / k0,
        _safe_div(inp.big_delta, inp.grad_phi_x0_norm),
        _safe_div(eps * inp.big_delta, c.C_gxy**2 * inp.delta_z0),
    )
    eta = min(
        eta_head,
        smoothness_radius(c),
        _safe_div(mu * eps, 8.0 * k0 * period * c.C_gxy),
    )
    if not (eta > 0 and math.isfinite(eta)):
        raise ValueError(f"theory schedule produced eta={eta}")

    total_iters = math.ceil(4.0 * inp.big_delta / (eta * eps))
    lam = tracking_lambda(total_iters, period, delta)
    lower = LowerUpdateConfig(
        period=period,
        n_steps=tracking_n(eps, k0, lam, c),
        gamma=tracking_gamma(eps, k0, lam, c),
        radius=eps / (4.0 * k0),
    )
    epoch = build_epoch_schedule(inp.v0, k0, eps, delta, c) if inp.v0 is not None else None
    return BorepConfig(
        eta=eta,
        beta=beta,
        nu=nu,
        lower=lower,
        epoch=epoch,
        total_iters=total_iters,
        mode="theory",
        eps=eps,
        delta=delta,
        k0=k0,
    )


def practical_config(
    eta: float,
    beta: float,
    nu: float,
    period: int,
    n_steps: int,
    gamma: float,
    radius: float,
    total_iters: int,
    init_steps: int = 100,
    init_alpha: Optional[float] = None,
) -> BorepConfig:
    """Desk-scale configuration: user-chosen (I, N, gamma, R) and a
    single-epoch SGD refinement (init_alpha defaults to gamma)."""
    from .lower import practical_epoch_schedule

    return BorepConfig(
        eta=eta,
        beta=beta,
        nu=nu,
        lower=LowerUpdateConfig(period, n_steps, gamma, radius),
        epoch=practical_epoch_schedule(init_steps, gamma if init_alpha is None else init_alpha),
        total_iters=total_iters,
        mode="practical",
    )


# ---------------------------------------------------------------------------
# Single-step operations
# ---------------------------------------------------------------------------


def hypergrad_estimate(
    problem: StochasticBilevelProblem, x: Vector, y: Vector, z: Vector, token: RngToken
) -> Vector:
    """grad_x F sample minus the mixed-derivative product with z.

    Conditional mean: grad_x f(x, y) - grad_x grad_y g(x, y) z.  At
    (y*(x), z*(x)) with zero noise this is exactly grad Phi(x).
    """
    return problem.oracle_grad_x_f(x, y, token) - problem.oracle_jvp_xy_g(x, y, z, token)


def update_z(
    problem: StochasticBilevelProblem,
    x: Vector,
    y: Vector,
    z: Vector,
    nu: float,
    token: RngToken,
) -> Vector:
    """One SGD step on 0.5 <grad2_y g z, z> - <grad_y f, z>.

    Deterministically contracts toward [grad2_y g(x, y)]^{-1} grad_y f(x, y)
    at rate (1 - nu * eigenvalue) per step.  Theory mode keeps
    nu <= min(1/(4 mu), mu / (16 sigma_g2^2)) by construction.
    """
    z = check_point(z, problem.d_y, "z")
    hz = problem.oracle_hvp_yy_g(x, y, z, token)
    gyf = problem.oracle_grad_y_f(x, y, token)
    return z - nu * (hz - gyf)


def update_momentum(m: Vector, ghat: Vector, beta: float) -> Vector:
    """Moving average m <- beta m + (1 - beta) ghat."""
    if not (0.0 <= beta < 1.0):
        raise ValueError("beta must be in [0, 1)")
    return beta * np.asarray(m) + (1.0 - beta) * np.asarray(ghat)


def normalized_step(x: Vector, m: Vector, eta: float) -> tuple[Vector, bool]:
    """Fixed-length step along the momentum direction.

    Returns (new x, degenerate flag).  When ||m|| is at the floating-point
    floor the step is skipped and flagged instead of dividing by ~0.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    m = np.asarray(m, dtype=np.float64)
    nrm = float(np.linalg.norm(m))
    if nrm <= DEGENERATE_MOMENTUM:
        return np.asarray(x, dtype=np.float64), True
    return np.asarray(x, dtype=np.float64) - (eta / nrm) * m, False


# ---------------------------------------------------------------------------
# The run loop
# ---------------------------------------------------------------------------


@dataclass
class SolverState:
    """Mutable run bookkeeping handed to observers."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    m: np.ndarray
    k: int = 0
    oracle_counts: dict = field(default_factory=lambda: {
        "grad_x_f": 0, "grad_y_f": 0, "grad_y_g": 0, "hvp_yy_g": 0, "jvp_xy_g": 0,
    })

    @property
    def oracle_f(self) -> int:
        return self.oracle_counts["grad_x_f"] + self.oracle_counts["grad_y_f"]

    @property
    def oracle_g(self) -> int:
        return (
            self.oracle_counts["grad_y_g"]
            + self.oracle_counts["hvp_yy_g"]
            + self.oracle_counts["jvp_xy_g"]
        )

    @property
    def lower_oracle_total(self) -> int:
        return self.oracle_counts["grad_y_g"]


Observer = Callable[[TraceRecord, SolverState], None]


def _ensure_finite(state: SolverState, k: int) -> None:
    for name in ("x", "y", "z", "m"):
        arr = getattr(state, name)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteStateError(
                f"{name} became non-finite at iteration {k} "
                f"(max |{name}| = {np.max(np.abs(arr)):g})"
            )


def _resolve_epoch_schedule(problem, cfg: BorepConfig, x0, y_init, seed: int) -> EpochSgdSchedule:
    if cfg.epoch is not None:
        return cfg.epoch
    v0 = estimate_v0(problem, x0, y_init, RngToken(seed, "lower-init"))
    return build_epoch_schedule(v0, cfg.k0, cfg.eps, cfg.delta, problem.constants)


def _record(problem, state: SolverState, seed, ghat_norm, degenerate, t_start) -> TraceRecord:
    x, y, z = state.x, state.y, state.z
    grad_exact = y_err = z_err = None
    if problem.has_analytic:
        grad_exact = float(np.linalg.norm(problem.phi_grad_exact(x)))
        y_err = float(np.linalg.norm(y - problem.y_star(x)))
        z_err = float(np.linalg.norm(z - problem.z_star(x)))
    f_est = problem.f_value_estimate(x, y, RngToken(seed, "upper", state.k).advance(1 << 40))
    return TraceRecord(
        k=state.k,
        grad_phi_exact=grad_exact,
        grad_est_norm=ghat_norm,
        m_norm=float(np.linalg.norm(state.m)),
        f_est=None if (f_est is None or math.isnan(f_est)) else float(f_est),
        y_err=y_err,
        z_err=z_err,
        oracle_f=state.oracle_f,
        oracle_g=state.oracle_g,
        degenerate_step=degenerate,
        wall_ms=(time.perf_counter() - t_start) * 1e3,
    )


def run_borep(
    problem: StochasticBilevelProblem,
    cfg: BorepConfig,
    x0: Vector,
    y_init: Vector,
    z0: Optional[Vector] = None,
    seed: int = 0,
    observers: Iterable[Observer] = (),
    trace_every: int = 1,
) -> RunTrace:
    """One full solver run: initialization refinement, then K iterations of
    periodic lower updates, z steps, momentum, and normalized x steps.

    Deterministic given (cfg, x0, y_init, z0, seed).  The trace holds the
    post-refinement state as row k = 0 and one row per iteration (thinned by
    ``trace_every`` if requested; the final row is always kept).
    """
    if trace_every < 1:
        raise ValueError("trace_every must be >= 1")
    t_start = time.perf_counter()
    x0 = check_point(x0, problem.d_x, "x0")
    y_init = check_point(y_init, problem.d_y, "y_init")
    if x0.ndim != 1 or y_init.ndim != 1:
        raise ValueError("run_borep expects single (unbatched) initial points")
    z = np.zeros(problem.d_y) if z0 is None else np.array(check_point(z0, problem.d_y, "z0"))

    epoch_sched = _resolve_epoch_schedule(problem, cfg, x0, y_init, seed)
    y0, init_calls = epoch_sgd(problem, x0, y_init, epoch_sched, RngToken(seed, "lower-init"))

    state = SolverState(x=np.array(x0), y=np.asarray(y0), z=z, m=np.zeros(problem.d_x))
    state.oracle_counts["grad_y_g"] += init_calls

    trace = RunTrace(meta={
        "schema": 1,
        "algo": "borep",
        "seed": seed,
        "config": cfg.to_dict(),
        "problem": problem.metadata(),
        "epoch_schedule": epoch_sched.to_dict(),
    })
    observers = tuple(observers)

    def emit(ghat_norm, degenerate, force=False):
        if force or state.k % trace_every == 0 or state.k == cfg.total_iters:
            rec = _record(problem, state, seed, ghat_norm, degenerate, t_start)
            trace.append(rec)
            for obs in observers:
                obs(rec, state)

    emit(None, False, force=True)

    lower_token = RngToken(seed, "lower-periodic")
    for k in range(cfg.total_iters):
        y_next, n_calls = update_lower(problem, state.x, state.y, k, cfg.lower, lower_token)
        state.oracle_counts["grad_y_g"] += n_calls

        z_next = update_z(problem, state.x, state.y, state.z, cfg.nu, RngToken(seed, "z", k))
        state.oracle_counts["hvp_yy_g"] += 1
        state.oracle_counts["grad_y_f"] += 1

        ghat = hypergrad_estimate(problem, state.x, state.y, state.z, RngToken(seed, "upper", k))
        state.oracle_counts["grad_x_f"] += 1
        state.oracle_counts["jvp_xy_g"] += 1

        m_next = update_momentum(state.m, ghat, cfg.beta)
        x_next, degenerate = normalized_step(state.x, m_next, cfg.eta)

        state.x, state.y, state.z, state.m = x_next, y_next, z_next, m_next
        state.k = k + 1
        _ensure_finite(state, k)
        emit(float(np.linalg.norm(ghat)), degenerate)

    trace.meta["lower_oracle_total"] = state.lower_oracle_total
    trace.meta["oracle_counts"] = dict(state.oracle_counts)
    return trace


# ---------------------------------------------------------------------------
# Batched ensemble (lemma verification at scale)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrackingStats:
    """Per-seed tracking summary of a batched run: max_k ||y_k - y*(x_k)||
    measured at usage time (the pair entering iteration k)."""

    init_err: np.ndarray
    max_err: np.ndarray
    final_err: np.ndarray
    total_iters: int
    lower_calls: int


def run_tracking_ensemble(
    problem: StochasticBilevelProblem,
    cfg: BorepConfig,
    x0: Vector,
    y_init: Vector,
    seed: int,
    n_seeds: int,
) -> TrackingStats:
    """Run ``n_seeds`` independent solver replicas in lockstep and record the
    lower-level tracking error of each.

    Requires the analytic layer (to measure y*(x)) and batched oracles; used
    by the lemma-verification ensembles where per-replica traces would be
    prohibitive.  Replica b draws row b of each batched oracle call, so the
    ensemble is a pure function of (problem, cfg, x0, y_init, seed, n_seeds).
    """
    if not problem.has_analytic:
        raise ValueError("tracking ensembles need the analytic layer for y*(x)")
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    x0 = check_point(x0, problem.d_x, "x0")
    y_init = check_point(y_init, problem.d_y, "y_init")

    epoch_sched = _resolve_epoch_schedule(problem, cfg, x0, y_init, seed)
    y_batch = np.broadcast_to(y_init, (n_seeds, problem.d_y)).copy()
    y0, init_calls = epoch_sgd(problem, x0, y_batch, epoch_sched, RngToken(seed, "lower-init"))

    x = np.broadcast_to(x0, (n_seeds, problem.d_x)).copy()
    y = np.asarray(y0)
    z = np.zeros((n_seeds, problem.d_y))
    m = np.zeros((n_seeds, problem.d_x))

    def tracking_err():
        return np.linalg.norm(y - problem.y_star(x), axis=-1)

    init_err = tracking_err()
    max_err = init_err.copy()
    lower_calls = init_calls

    lower_token = RngToken(seed, "lower-periodic")
    for k in range(cfg.total_iters):
        err = tracking_err()
        np.maximum(max_err, err, out=max_err)

        y_next, n_calls = update_lower(problem, x, y, k, cfg.lower, lower_token)
        lower_calls += n_calls

        z_next = update_z(problem, x, y, z, cfg.nu, RngToken(seed, "z", k))

        ghat = hypergrad_estimate(problem, x, y, z, RngToken(seed, "upper", k))
        m = cfg.beta * m + (1.0 - cfg.beta) * ghat

        nrm = np.linalg.norm(m, axis=-1, keepdims=True)
        live = nrm > DEGENERATE_MOMENTUM
        step = np.where(live, cfg.eta / np.where(live, nrm, 1.0), 0.0)
        x = x - step * m

        y, z = np.asarray(y_next), z_next
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y)) and np.all(np.isfinite(z))):
            raise NonFiniteStateError(f"ensemble state became non-finite at iteration {k}")

    final_err = tracking_err()
    np.maximum(max_err, final_err, out=max_err)
    return TrackingStats(
        init_err=init_err,
        max_err=max_err,
        final_err=final_err,
        total_iters=cfg.total_iters,
        lower_calls=lower_calls,
    )
