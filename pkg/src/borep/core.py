"""Domain types, the stochastic oracle contract, and derived smoothness constants.

A bilevel problem  min_x  f(x, y*(x))  s.t.  y*(x) = argmin_y g(x, y)  is
accessed only through five stochastic oracles (gradients of f, gradient of g,
and Hessian/Jacobian-vector products of g).  Every oracle is unbiased and is a
pure function of the query point and an :class:`RngToken`, so runs are exactly
replayable and safe to evaluate concurrently.

The constants that drive every step-size schedule live in
:class:`ProblemConstants`; the relaxed-smoothness constants of the reduced
objective Phi(x) = f(x, y*(x)) are computed from them by :func:`derive_k0_k1`
and :func:`derive_lz_star`.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.random import Generator, Philox

Vector = np.ndarray


class BorepError(Exception):
    """Base class for solver-library errors."""


class MissingAnalyticLayer(BorepError):
    """Requested a closed-form quantity from a problem that has none."""


class NonFiniteStateError(BorepError):
    """Solver state left the space of finite floats."""


# ---------------------------------------------------------------------------
# Randomness tokens
# ---------------------------------------------------------------------------

#: Named streams.  Each consumer of randomness in the solver owns one stream,
#: so e.g. changing the lower-level update period never perturbs upper-level
#: draws.
STREAMS = ("upper", "z", "lower-periodic", "lower-init")

_STREAM_IDS = {name: i + 1 for i, name in enumerate(STREAMS)}

# Oracle kinds, mixed into the key so that two different oracles queried with
# the *same* token (one data sample feeding several derivative operators)
# return distinct but reproducible noise.
KIND_GRAD_X_F = 1
KIND_GRAD_Y_F = 2
KIND_GRAD_Y_G = 3
KIND_HVP_YY_G = 4
KIND_JVP_XY_G = 5
KIND_MINIBATCH = 6

_MASK64 = (1 << 64) - 1


def _mix64(z: int) -> int:
    # splitmix64 finalizer
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _philox_key(seed: int, stream_id: int, counter: int, kind: int) -> np.ndarray:
    h = _mix64(seed & _MASK64)
    h = _mix64(h ^ stream_id)
    h = _mix64(h ^ (counter & _MASK64))
    h = _mix64(h ^ kind)
    return np.array([h, _mix64(h ^ 0xD1B54A32D192ED03)], dtype=np.uint64)


@dataclass(frozen=True)
class RngToken:
    """Address of one reproducible random draw.

    ``(seed, stream, counter)`` fully determines the sample: replaying a run
    with equal tokens replays identical oracle outputs, and distinct counters
    or streams give statistically independent Philox streams.
    """

    seed: int
    stream: str
    counter: int = 0

    def __post_init__(self):
        if self.stream not in _STREAM_IDS:
            raise ValueError(f"unknown stream {self.stream!r}; expected one of {STREAMS}")
        if self.counter < 0:
            raise ValueError("counter must be nonnegative")

    def at(self, counter: int) -> "RngToken":
        return dataclasses.replace(self, counter=counter)

    def advance(self, n: int = 1) -> "RngToken":
        return dataclasses.replace(self, counter=self.counter + n)

    def generator(self, kind: int = 0) -> Generator:
        """Fresh counter-based generator for this token (and oracle kind)."""
        key = _philox_key(self.seed, _STREAM_IDS[self.stream], self.counter, kind)
        return Generator(Philox(key=key))


def normal_noise(token: RngToken, kind: int, shape: tuple) -> np.ndarray:
    """Standard-normal draw addressed by (token, kind)."""
    return token.generator(kind).standard_normal(shape)


# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProblemConstants:
    """Curvature, coupling, and noise constants of a bilevel instance.

    ``mu``/``L`` bound the lower-level Hessian spectrum, ``C_gxy`` bounds the
    cross derivative of g, ``tau``/``rho`` are the Lipschitz constants of the
    second derivatives of g, ``M`` bounds the y-gradient of f along the
    lower-level solution path, and the four ``L_*`` constants are the relaxed
    (affine-in-gradient-norm) smoothness constants of f.  The sigmas bound the
    second moments of the oracle noise at the norm level.
    """

    mu: float
    L: float
    C_gxy: float = 0.0
    tau: float = 0.0
    rho: float = 0.0
    M: float = 0.0
    L_x0: float = 0.0
    L_x1: float = 0.0
    L_y0: float = 0.0
    L_y1: float = 0.0
    sigma_f1: float = 0.0
    sigma_f2: float = 0.0  # carried for completeness; no schedule consumes it
    sigma_g1: float = 0.0
    sigma_g2: float = 0.0

    def __post_init__(self):
        if not (self.mu > 0):
            raise ValueError(f"mu must be positive, got {self.mu}")
        if self.L < self.mu:
            raise ValueError(f"L must be >= mu, got L={self.L}, mu={self.mu}")
        for name in ("C_gxy", "tau", "rho", "M", "L_x0", "L_x1", "L_y0", "L_y1",
                     "sigma_f1", "sigma_f2", "sigma_g1", "sigma_g2"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ProblemConstants":
        return cls(**d)


@dataclass(frozen=True)
class DerivedConstants:
    """Relaxed-smoothness constants of Phi plus the Lipschitz constant of z*."""

    K0: float
    K1: float
    L_zstar: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def derive_k0_k1(c: ProblemConstants) -> tuple[float, float]:
    """Relaxed-smoothness constants (K0, K1) of the reduced objective.

    Phi inherits  ||grad Phi(x) - grad Phi(x')|| <= (K0 + K1 ||grad Phi(x')||) ||x - x'||
    for nearby x, x', with

        K0 = sqrt(1 + (C_gxy/mu)^2) * (L_x0 + L_x1 C_gxy M / mu
             + (C_gxy/mu)(L_y0 + L_y1 M) + M (C_gxy rho + tau mu) / mu^2)
        K1 = sqrt(1 + (C_gxy/mu)^2) * L_x1
    """
    mu = c.mu
    ratio = c.C_gxy / mu
    root = math.sqrt(1.0 + ratio * ratio)
    k0 = root * (
        c.L_x0
        + c.L_x1 * c.C_gxy * c.M / mu
        + ratio * (c.L_y0 + c.L_y1 * c.M)
        + c.M * (c.C_gxy * c.rho + c.tau * mu) / (mu * mu)
    )
    k1 = root * c.L_x1
    return k0, k1


def derive_lz_star(c: ProblemConstants) -> float:
    """Lipschitz constant of the linear-system solution map x -> z*(x)."""
    mu = c.mu
    ratio = c.C_gxy / mu
    root = math.sqrt(1.0 + ratio * ratio)
    return root * (c.rho * c.M / (mu * mu) + (c.L_y0 + c.L_y1 * c.M) / mu)


def derive_constants(c: ProblemConstants) -> DerivedConstants:
    k0, k1 = derive_k0_k1(c)
    return DerivedConstants(K0=k0, K1=k1, L_zstar=derive_lz_star(c))


def smoothness_radius(c: ProblemConstants) -> float:
    """Largest ||x - x'|| for which the (K0, K1) inequality is guaranteed.

    Returns +inf for problems with L_x1 = L_y1 = 0 (bounded smoothness).
    """
    s = 2.0 * (1.0 + (c.C_gxy / c.mu) ** 2) * (c.L_x1**2 + c.L_y1**2)
    return math.inf if s == 0 else 1.0 / math.sqrt(s)


# ---------------------------------------------------------------------------
# The oracle contract
# ---------------------------------------------------------------------------


def check_point(v: np.ndarray, dim: int, name: str) -> np.ndarray:
    """Validate a (possibly batched) point: trailing axis `dim`, all finite."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 0 or v.shape[-1] != dim:
        raise ValueError(f"{name} must have trailing dimension {dim}, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite entries")
    return v


class StochasticBilevelProblem:
    """Oracle contract for one bilevel instance.

    Subclasses implement five unbiased stochastic oracles.  All oracles accept
    points with an optional leading batch axis (shape ``(..., d)``) and return
    matching shapes; the token addresses the randomness of the whole batched
    call.  Problems are immutable after construction, so oracle calls are safe
    from concurrent threads.

    Problems with closed forms additionally expose the analytic layer
    (:meth:`y_star`, :meth:`z_star`, :meth:`phi_grad_exact`, :meth:`phi_value`)
    used by diagnostics and exact-stationarity traces.
    """

    d_x: int
    d_y: int
    constants: ProblemConstants

    # -- stochastic oracles -------------------------------------------------

    def oracle_grad_x_f(self, x: Vector, y: Vector, token: RngToken) -> Vector:
        raise NotImplementedError

    def oracle_grad_y_f(self, x: Vector, y: Vector, token: RngToken) -> Vector:
        raise NotImplementedError

    def oracle_grad_y_g(self, x: Vector, y: Vector, token: RngToken) -> Vector:
        raise NotImplementedError

    def oracle_hvp_yy_g(self, x: Vector, y: Vector, v: Vector, token: RngToken) -> Vector:
        raise NotImplementedError

    def oracle_jvp_xy_g(self, x: Vector, y: Vector, v: Vector, token: RngToken) -> Vector:
        raise NotImplementedError

    # -- analytic layer (optional) ------------------------------------------

    @property
    def has_analytic(self) -> bool:
        return False

    def y_star(self, x: Vector) -> Vector:
        raise MissingAnalyticLayer(f"{type(self).__name__} has no closed-form y*(x)")

    def z_star(self, x: Vector) -> Vector:
        raise MissingAnalyticLayer(f"{type(self).__name__} has no closed-form z*(x)")

    def phi_grad_exact(self, x: Vector) -> Vector:
        raise MissingAnalyticLayer(f"{type(self).__name__} has no closed-form grad Phi(x)")

    def phi_value(self, x: Vector) -> float:
        raise MissingAnalyticLayer(f"{type(self).__name__} has no closed-form Phi(x)")

    # -- deterministic helpers ----------------------------------------------

    def g_value(self, x: Vector, y: Vector) -> float:
        """Full-batch lower-level value, used to estimate initial gaps."""
        raise MissingAnalyticLayer(f"{type(self).__name__} exposes no g value")

    def f_value_estimate(self, x: Vector, y: Vector, token: RngToken) -> float:
        """Cheap stochastic estimate of f for trace records; NaN if unavailable."""
        return math.nan

    def lower_affine(self, x: Vector) -> Optional[tuple]:
        """Fast-path hook: ``(A, b, sigma)`` when grad_y g(x, y) = A y - b + noise.

        Problems whose lower-level gradient is affine in y with additive
        Gaussian noise of scale ``sigma`` (norm level) return the triple so
        inner loops can run a fused kernel; all others return None.
        """
        return None

    def metadata(self) -> dict:
        """JSON-serializable description for trace headers."""
        return {
            "kind": type(self).__name__,
            "d_x": self.d_x,
            "d_y": self.d_y,
            "constants": self.constants.to_dict(),
        }
