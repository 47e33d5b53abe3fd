"""Lower-level machinery: ball projection, epoch schedules, Epoch-SGD
initialization refinement, and the periodic projected update.

The lower-level variable is handled in two phases.  A one-time Epoch-SGD run
(shrinking projection balls, per-epoch iterate averaging) refines the initial
y to high accuracy with high probability.  Afterwards y is refreshed only
every I iterations by N projected SGD steps confined to a ball of radius R
around the current iterate, with a running average as the output; between
refreshes it is frozen, relying on the step-norm-bounded drift of y*(x).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels
from .core import (
    KIND_GRAD_Y_G,
    ProblemConstants,
    RngToken,
    StochasticBilevelProblem,
    Vector,
    check_point,
)

# Reserved counter block for the V0 probe so it never collides with epoch steps.
_V0_COUNTER_BASE = 1 << 60


def project_ball(y: Vector, center: Vector, radius: float) -> Vector:
    """Euclidean projection of y onto the ball B(center, radius).

    Total on all inputs: interior points (including y == center) pass through
    unchanged; exterior points are pulled back onto the sphere.  Supports a
    leading batch axis, projecting each row onto its own ball.
    """
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")
    y = np.asarray(y, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    delta = y - center
    nrm = np.linalg.norm(delta, axis=-1, keepdims=True)
    scale = np.ones_like(nrm)
    np.divide(radius, nrm, out=scale, where=nrm > radius)
    return center + delta * scale


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpochSgdSchedule:
    """Per-epoch (radius, iteration count, step size) plan for Epoch-SGD.

    Theory-mode schedules built by :func:`build_epoch_schedule` obey the
    shrinking-ball relations (radius halves in squared norm each epoch,
    alpha <= 1/(2L)); practical single-epoch schedules may be constructed
    directly with any positive entries.
    """

    v0: float
    k_dagger: int
    lam: float
    radius: tuple
    iters: tuple
    alpha: tuple

    def __post_init__(self):
        if self.k_dagger < 1 or len(self.radius) != self.k_dagger \
                or len(self.iters) != self.k_dagger or len(self.alpha) != self.k_dagger:
            raise ValueError("schedule needs one (radius, T, alpha) triple per epoch")
        if self.v0 <= 0 or self.lam < 0:
            raise ValueError("V0 must be positive and lambda nonnegative")
        for r, t, a in zip(self.radius, self.iters, self.alpha):
            if not (r > 0 and t >= 1 and a > 0):
                raise ValueError(f"invalid epoch entry (radius={r}, T={t}, alpha={a})")

    @property
    def total_iterations(self) -> int:
        return int(sum(self.iters))

    def to_dict(self) -> dict:
        return {
            "V0": self.v0,
            "k_dagger": self.k_dagger,
            "lambda": self.lam,
            "epochs": [
                {"s": s, "radius": self.radius[s], "T": int(self.iters[s]), "alpha": self.alpha[s]}
                for s in range(self.k_dagger)
            ],
        }


def k_dagger_for(v0: float, k0: float, eps: float, mu: float) -> int:
    """Number of epochs needed to push the lower-level gap below
    mu/2 * (eps / 8 K0)^2, i.e. ceil(log2(128 K0^2 V0 / (mu eps^2)))."""
    if v0 <= 0 or k0 <= 0 or eps <= 0 or mu <= 0:
        raise ValueError("V0, K0, eps, mu must be positive")
    return max(1, math.ceil(math.log2(128.0 * k0 * k0 * v0 / (mu * eps * eps))))


def epoch_lambda(k_dagger: int, delta: float) -> float:
    """High-probability parameter: exp(-lam^2/3) + exp(-lam) <= delta / (2 k)."""
    if not (0 < delta < 1):
        raise ValueError("delta must be in (0, 1)")
    t = math.log(2.0 * k_dagger / delta)
    return max(math.sqrt(3.0 * t), t)


def epoch_entry(s: int, v0: float, lam: float, c: ProblemConstants) -> tuple[float, int, float]:
    """(radius_s, T_s, alpha_s) for epoch s of the shrinking-ball schedule."""
    if s < 0 or v0 <= 0:
        raise ValueError("epoch index must be >= 0 and V0 positive")
    mu, lip, sg1 = c.mu, c.L, c.sigma_g1
    radius = math.sqrt(2.0 * v0 / (mu * 2.0**s))
    branch = 16.0 * lip / mu
    if sg1 > 0:
        var_term = 32.0 * max(sg1**2, 4.0 * lam * lam * sg1**2) / (mu * v0 * 2.0 ** (-(s + 2)))
        branch = max(branch, var_term)
    iters = max(1, math.ceil(branch))
    alpha = 1.0 / (2.0 * lip)
    if sg1 > 0:
        alpha = min(alpha, math.sqrt(v0 * 2.0 ** (-s) / (2.0 * mu * iters)) / sg1)
    return radius, iters, alpha


def epoch_schedule(
    s: int, v0: float, k0: float, eps: float, delta: float, c: ProblemConstants
) -> tuple[float, int, float, float]:
    """One epoch's (radius_s, T_s, alpha_s, lambda) with lambda derived from
    the epoch count that (V0, K0, eps) implies."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    lam = epoch_lambda(k_dagger_for(v0, k0, eps, c.mu), delta)
    radius, iters, alpha = epoch_entry(s, v0, lam, c)
    return radius, iters, alpha, lam


def build_epoch_schedule(
    v0: float, k0: float, eps: float, delta: float, c: ProblemConstants
) -> EpochSgdSchedule:
    """Full theory-mode Epoch-SGD schedule for initialization refinement."""
    kd = k_dagger_for(v0, k0, eps, c.mu)
    lam = epoch_lambda(kd, delta)
    entries = [epoch_entry(s, v0, lam, c) for s in range(kd)]
    return EpochSgdSchedule(
        v0=v0,
        k_dagger=kd,
        lam=lam,
        radius=tuple(e[0] for e in entries),
        iters=tuple(e[1] for e in entries),
        alpha=tuple(e[2] for e in entries),
    )


def practical_epoch_schedule(iters: int, alpha: float, radius: float = 1e18) -> EpochSgdSchedule:
    """Single-epoch plain-SGD refinement used in practical mode."""
    return EpochSgdSchedule(
        v0=1.0, k_dagger=1, lam=0.0, radius=(radius,), iters=(int(iters),), alpha=(alpha,)
    )


@dataclass(frozen=True)
class LowerUpdateConfig:
    """Periodic update plan: every I iterations, N projected steps of size
    gamma inside a ball of radius R around the current iterate."""

    period: int
    n_steps: int
    gamma: float
    radius: float

    def __post_init__(self):
        if self.period < 1 or self.n_steps < 1:
            raise ValueError("period and n_steps must be >= 1")
        if not (self.gamma > 0 and self.radius > 0):
            raise ValueError("gamma and radius must be positive")

    def to_dict(self) -> dict:
        return {"I": self.period, "N": self.n_steps, "gamma": self.gamma, "R": self.radius}


def tracking_lambda(total_iters: int, period: int, delta: float) -> float:
    """High-probability parameter shared by the K/I periodic updates."""
    if total_iters < 1 or period < 1 or not (0 < delta < 1):
        raise ValueError("need K >= 1, I >= 1, delta in (0, 1)")
    t = math.log(max(math.e, 2.0 * total_iters / (delta * period)))
    return max(math.sqrt(3.0 * t), t)


def tracking_gamma(eps: float, k0: float, lam: float, c: ProblemConstants) -> float:
    """Fixed step size of the periodic update; 1/(2L) in the noiseless case."""
    if c.sigma_g1 == 0:
        return 1.0 / (2.0 * c.L)
    return (c.mu * eps * eps) / (
        512.0 * k0 * k0 * c.sigma_g1**2 * math.sqrt(lam + 1.0) * (lam + math.sqrt(lam + 1.0))
    )


def tracking_n(eps: float, k0: float, lam: float, c: ProblemConstants) -> int:
    """Iteration count of each periodic update."""
    if c.sigma_g1 == 0:
        return 1
    raw = 64.0**2 * c.sigma_g1**2 * k0 * k0 * (lam + math.sqrt(lam + 1.0)) ** 2 / (c.mu**2 * eps**2)
    return max(1, math.ceil(raw))


# ---------------------------------------------------------------------------
# Projected SGD with iterate averaging (shared inner loop)
# ---------------------------------------------------------------------------


def _psgd_average(
    problem: StochasticBilevelProblem,
    x: Vector,
    y0: np.ndarray,
    alpha: float,
    radius: float,
    steps: int,
    token: RngToken,
    counter_base: int,
) -> np.ndarray:
    """`steps` projected-SGD steps from y0 toward argmin_y g(x, .), confined
    to B(y0, radius); returns the average of the post-step iterates."""
    fast = problem.lower_affine(x)
    if fast is not None:
        a_mat, b_vec, sigma = fast
        squeeze = y0.ndim == 1
        y = np.atleast_2d(np.array(y0, dtype=np.float64))
        b2 = np.ascontiguousarray(np.broadcast_to(b_vec, y.shape), dtype=np.float64)
        center = y.copy()
        acc = np.zeros_like(y)
        nb, d = y.shape
        noise_scale = sigma / math.sqrt(d) if sigma > 0 else 0.0
        chunk = max(1, _kernels.CHUNK_VALUES // (nb * d))
        dummy = np.zeros((1, 1, 1))
        t0 = 0
        while t0 < steps:
            n = min(chunk, steps - t0)
            if noise_scale != 0.0:
                noise = token.at(counter_base + t0).generator(KIND_GRAD_Y_G).standard_normal((n, nb, d))
            else:
                noise = dummy
            _kernels.psgd_chunk(y, center, acc, noise, a_mat, b2, alpha, radius, noise_scale, n)
            t0 += n
        avg = acc / steps
        return avg[0] if squeeze else avg

    center = np.array(y0, dtype=np.float64)
    cur = center.copy()
    acc = np.zeros_like(cur)
    for t in range(steps):
        g = problem.oracle_grad_y_g(x, cur, token.at(counter_base + t))
        cur = project_ball(cur - alpha * g, center, radius)
        acc += cur
    return acc / steps


# ---------------------------------------------------------------------------
# Algorithms
# ---------------------------------------------------------------------------


def epoch_sgd(
    problem: StochasticBilevelProblem,
    x0: Vector,
    y_init: Vector,
    sched: EpochSgdSchedule,
    token: RngToken,
) -> tuple[np.ndarray, int]:
    """Initialization refinement: k-dagger epochs of projected SGD at fixed x0.

    Each epoch runs T_s steps inside the ball of radius radius_s centered at
    the epoch's start iterate, then seeds the next epoch with the average of
    the T_s iterates.  Returns the final epoch-start iterate and the number
    of gradient-oracle calls (sum of the T_s).

    ``y_init`` may carry a leading batch axis; rows evolve as independent
    replicas sharing the schedule (their noise is addressed jointly by the
    token, per-row independent).
    """
    x0 = check_point(x0, problem.d_x, "x0")
    y = np.array(check_point(y_init, problem.d_y, "y_init"), dtype=np.float64)
    count = 0
    base = 0
    for s in range(sched.k_dagger):
        steps = int(sched.iters[s])
        y = _psgd_average(problem, x0, y, sched.alpha[s], sched.radius[s], steps, token, base)
        base += steps
        count += steps
    return y, count


def update_lower(
    problem: StochasticBilevelProblem,
    x: Vector,
    y_k: Vector,
    k: int,
    cfg: LowerUpdateConfig,
    token: RngToken,
) -> tuple[np.ndarray, int]:
    """Periodic lower-level refresh.

    Off-period iterations (k = 0 or k not a multiple of I) return y_k
    unchanged and consume no randomness.  On-period, runs N projected steps
    confined to B(y_k, R) with step gamma and returns the running average of
    the iterates together with the oracle-call count N.
    """
    y_k = check_point(y_k, problem.d_y, "y_k")
    if k <= 0 or k % cfg.period != 0:
        return y_k, 0
    x = check_point(x, problem.d_x, "x")
    j = k // cfg.period
    avg = _psgd_average(problem, x, y_k, cfg.gamma, cfg.radius, cfg.n_steps, token, j * cfg.n_steps)
    return avg, cfg.n_steps


def estimate_v0(
    problem: StochasticBilevelProblem,
    x0: Vector,
    y_init: Vector,
    token: RngToken,
    probe_steps: int = 50,
) -> float:
    """Estimate an upper bound on the initial lower-level gap g(x0, y) - g(x0, y*).

    Runs a short unprojected SGD probe to find a cheap reference value, then
    doubles the observed gap (floored at 1e-6).  Used when the caller cannot
    supply V0 analytically.
    """
    x0 = check_point(x0, problem.d_x, "x0")
    y = np.array(check_point(y_init, problem.d_y, "y_init"), dtype=np.float64)
    if y.ndim != 1:
        raise ValueError("V0 probe expects a single initial point")
    g_init = problem.g_value(x0, y)
    alpha = 1.0 / (2.0 * problem.constants.L)
    cur = y.copy()
    for t in range(probe_steps):
        g = problem.oracle_grad_y_g(x0, cur, token.at(_V0_COUNTER_BASE + t))
        cur = cur - alpha * g
    g_low = problem.g_value(x0, cur)
    return max(2.0 * (g_init - g_low), 1e-6)
