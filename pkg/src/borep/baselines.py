"""Single-loop comparison algorithms sharing the oracle contract and trace
format: simultaneous SGD on (y, z, x) with an unnormalized x step, plus the
momentum-averaged variant.  Update rules follow the cited originals in their
simplest faithful single-loop form; neither touches ball projection or the
epoch refinement, so oracle accounting separates them from the main solver.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import NonFiniteStateError, RngToken, StochasticBilevelProblem, Vector, check_point
from .solver import SolverState, _record, hypergrad_estimate
from .trace import RunTrace


@dataclass(frozen=True)
class SobaConfig:
    """Step sizes for the simultaneous single-loop baselines.

    ``beta`` is the x-direction momentum (0 recovers the plain variant;
    ``eta_x`` may be 0 to freeze x for ablations).
    """

    eta_x: float
    eta_y: float
    eta_z: float
    beta: float = 0.0
    total_iters: int = 1000

    def __post_init__(self):
        if self.eta_x < 0 or self.eta_y <= 0 or self.eta_z <= 0:
            raise ValueError("eta_y and eta_z must be positive, eta_x nonnegative")
        if not (0.0 <= self.beta < 1.0):
            raise ValueError("beta must be in [0, 1)")
        if self.total_iters < 0:
            raise ValueError("total_iters must be >= 0")

    def to_dict(self) -> dict:
        return {
            "eta_x": self.eta_x, "eta_y": self.eta_y, "eta_z": self.eta_z,
            "beta": self.beta, "K": self.total_iters,
        }


def _run_soba_family(problem, cfg, x0, y_init, z0, seed, algo, trace_every):
    t_start = time.perf_counter()
    x0 = check_point(x0, problem.d_x, "x0")
    y_init = check_point(y_init, problem.d_y, "y_init")
    z = np.zeros(problem.d_y) if z0 is None else np.array(check_point(z0, problem.d_y, "z0"))

    state = SolverState(x=np.array(x0), y=np.array(y_init), z=z, m=np.zeros(problem.d_x))
    trace = RunTrace(meta={
        "schema": 1,
        "algo": algo,
        "seed": seed,
        "config": cfg.to_dict(),
        "problem": problem.metadata(),
    })

    def emit(ghat_norm, force=False):
        if force or state.k % trace_every == 0 or state.k == cfg.total_iters:
            trace.append(_record(problem, state, seed, ghat_norm, False, t_start))

    emit(None, force=True)

    for k in range(cfg.total_iters):
        lower_tok = RngToken(seed, "lower-periodic", k)
        z_tok = RngToken(seed, "z", k)
        upper_tok = RngToken(seed, "upper", k)

        gy = problem.oracle_grad_y_g(state.x, state.y, lower_tok)
        hz = problem.oracle_hvp_yy_g(state.x, state.y, state.z, z_tok)
        gyf = problem.oracle_grad_y_f(state.x, state.y, z_tok)
        ghat = hypergrad_estimate(problem, state.x, state.y, state.z, upper_tok)
        state.oracle_counts["grad_y_g"] += 1
        state.oracle_counts["hvp_yy_g"] += 1
        state.oracle_counts["grad_y_f"] += 1
        state.oracle_counts["grad_x_f"] += 1
        state.oracle_counts["jvp_xy_g"] += 1

        y_next = state.y - cfg.eta_y * gy
        z_next = state.z - cfg.eta_z * (hz - gyf)
        m_next = cfg.beta * state.m + (1.0 - cfg.beta) * ghat
        x_next = state.x - cfg.eta_x * m_next

        state.x, state.y, state.z, state.m = x_next, y_next, z_next, m_next
        state.k = k + 1
        for name, arr in (("x", state.x), ("y", state.y), ("z", state.z)):
            if not np.all(np.isfinite(arr)):
                raise NonFiniteStateError(f"{algo}: {name} became non-finite at iteration {k}")
        emit(float(np.linalg.norm(ghat)))

    trace.meta["oracle_counts"] = dict(state.oracle_counts)
    trace.meta["lower_oracle_total"] = state.lower_oracle_total
    return trace


def run_soba(
    problem: StochasticBilevelProblem,
    cfg: SobaConfig,
    x0: Vector,
    y_init: Vector,
    z0: Optional[Vector] = None,
    seed: int = 0,
    trace_every: int = 1,
) -> RunTrace:
    """Plain simultaneous single-loop baseline (momentum ignored)."""
    plain = SobaConfig(cfg.eta_x, cfg.eta_y, cfg.eta_z, 0.0, cfg.total_iters)
    return _run_soba_family(problem, plain, x0, y_init, z0, seed, "soba", trace_every)


def run_ma_soba(
    problem: StochasticBilevelProblem,
    cfg: SobaConfig,
    x0: Vector,
    y_init: Vector,
    z0: Optional[Vector] = None,
    seed: int = 0,
    trace_every: int = 1,
) -> RunTrace:
    """Momentum-averaged variant: x follows the moving average of the
    hypergradient estimates instead of the raw sample."""
    return _run_soba_family(problem, cfg, x0, y_init, z0, seed, "ma-soba", trace_every)
