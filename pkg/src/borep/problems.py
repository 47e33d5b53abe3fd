"""Analytic and applied bilevel problem instances.

Two families:

* Quadratic lower level ``g(x, y) = 0.5 y'Ay - y'(Bx + c)`` paired with
  either a quadratic upper level (bounded smoothness) or a quartic upper
  level ``f = (scale/4) ||x + Wy - target||^4`` whose Hessian grows with the
  gradient norm.  Both expose closed forms for y*(x), z*(x), grad Phi(x), so
  every estimator in the library can be checked exactly.

  Sign convention: with g as above, grad_y g = Ay - (Bx + c), so the mixed
  second derivative (the d_x-by-d_y operator applied to z) is -B'.  This is
  fixed here once and used consistently by the jvp oracle and the analytic
  hypergradient.

* Logistic-regression instances of data reweighting (per-sample weights
  through a sigmoid) and scalar regularizer tuning, with minibatch sampling
  as the oracle noise.  No closed forms; constants that lack them are
  estimated and flagged in the metadata.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import (
    KIND_GRAD_X_F,
    KIND_GRAD_Y_F,
    KIND_GRAD_Y_G,
    KIND_HVP_YY_G,
    KIND_JVP_XY_G,
    KIND_MINIBATCH,
    MissingAnalyticLayer,
    ProblemConstants,
    RngToken,
    StochasticBilevelProblem,
    Vector,
    check_point,
)


@dataclass(frozen=True)
class NoiseSpec:
    """Norm-level oracle noise scales for synthetic problems.

    ``sigma_f`` drives both gradient oracles of f, ``sigma_g1`` the gradient
    oracle of g, and ``sigma_g2`` the Hessian/Jacobian-vector oracles, which
    add a Gaussian random matrix E with E||Ev||^2 = sigma_g2^2 ||v||^2 so the
    products stay exactly linear in v.
    """

    sigma_f: float = 0.0
    sigma_g1: float = 0.0
    sigma_g2: float = 0.0

    def __post_init__(self):
        for name in ("sigma_f", "sigma_g1", "sigma_g2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def from_json(cls, obj) -> "NoiseSpec":
        if obj is None:
            return cls()
        if isinstance(obj, (int, float)):
            return cls(sigma_f=float(obj), sigma_g1=float(obj), sigma_g2=float(obj))
        return cls(**obj)


def _sym_eig_interval(a: np.ndarray) -> tuple[float, float]:
    w = np.linalg.eigvalsh(a)
    return float(w[0]), float(w[-1])


class QuadraticBilevel(StochasticBilevelProblem):
    """Strongly convex quadratic lower level with a closed-form analytic layer.

    ``upper_kind`` selects the upper level:

    * ``"quadratic"``: f = 0.5 wx ||x - a||^2 + 0.5 wy ||y - b||^2
    * ``"quartic"``:   f = (scale/4) ||x + Wy - target||^4
    """

    def __init__(
        self,
        a_mat: np.ndarray,
        b_mat: np.ndarray,
        c_vec: np.ndarray,
        upper_kind: str = "quadratic",
        *,
        weight_x: float = 1.0,
        weight_y: float = 1.0,
        target_x: Optional[np.ndarray] = None,
        target_y: Optional[np.ndarray] = None,
        w_mat: Optional[np.ndarray] = None,
        scale: float = 1.0,
        quartic_target: Optional[np.ndarray] = None,
        noise: NoiseSpec = NoiseSpec(),
        m_bound: Optional[float] = None,
    ):
        a_mat = np.asarray(a_mat, dtype=np.float64)
        b_mat = np.asarray(b_mat, dtype=np.float64)
        c_vec = np.asarray(c_vec, dtype=np.float64)
        if a_mat.ndim != 2 or a_mat.shape[0] != a_mat.shape[1]:
            raise ValueError("A must be square")
        if not np.allclose(a_mat, a_mat.T, atol=1e-12):
            raise ValueError("A must be symmetric")
        d_y = a_mat.shape[0]
        if b_mat.shape[0] != d_y:
            raise ValueError("B must have d_y rows")
        d_x = b_mat.shape[1]
        if c_vec.shape != (d_y,):
            raise ValueError("c must be a d_y vector")
        mu, lip = _sym_eig_interval(a_mat)
        if mu <= 0:
            raise ValueError(f"A must be positive definite, min eigenvalue {mu}")

        self.d_x = d_x
        self.d_y = d_y
        self.A = a_mat
        self.B = b_mat
        self.c = c_vec
        self._A_inv = np.linalg.inv(a_mat)
        self.noise = noise
        self.upper_kind = upper_kind

        if upper_kind == "quadratic":
            self.weight_x = float(weight_x)
            self.weight_y = float(weight_y)
            self.target_x = np.zeros(d_x) if target_x is None else np.asarray(target_x, dtype=np.float64)
            self.target_y = np.zeros(d_y) if target_y is None else np.asarray(target_y, dtype=np.float64)
            l_x0, l_x1 = self.weight_x, 0.0
            l_y0, l_y1 = self.weight_y, 0.0
        elif upper_kind == "quartic":
            if w_mat is None:
                raise ValueError("quartic upper level needs W")
            self.W = np.asarray(w_mat, dtype=np.float64)
            if self.W.shape != (d_x, d_y):
                raise ValueError(f"W must be {d_x}x{d_y}, got {self.W.shape}")
            if scale <= 0:
                raise ValueError("scale must be positive")
            self.scale = float(scale)
            self.quartic_target = (
                np.zeros(d_x) if quartic_target is None else np.asarray(quartic_target, dtype=np.float64)
            )
            # Hessian of the quartic is bounded by 3*scale*kappa*||r||^2 with
            # kappa = ||[I W]||; split via ||r||^2 <= 1 + ||r||^3 to get the
            # affine-in-gradient-norm constants.
            kappa = math.sqrt(1.0 + np.linalg.norm(self.W, 2) ** 2)
            l_x0 = 3.0 * self.scale * kappa
            l_x1 = 3.0 * kappa
            smin = float(np.linalg.svd(self.W, compute_uv=False)[-1]) if min(self.W.shape) > 0 else 0.0
            if smin > 1e-12:
                l_y0 = 3.0 * self.scale * kappa * np.linalg.norm(self.W, 2)
                l_y1 = 3.0 * kappa * np.linalg.norm(self.W, 2) / smin
            else:
                l_y0 = 3.0 * self.scale * kappa * np.linalg.norm(self.W, 2)
                l_y1 = 0.0
        else:
            raise ValueError(f"unknown upper_kind {upper_kind!r}")

        self._m_is_estimate = m_bound is None
        if m_bound is None:
            m_bound = self._estimate_m()
        self.constants = ProblemConstants(
            mu=mu,
            L=lip,
            C_gxy=float(np.linalg.norm(b_mat, 2)),
            tau=0.0,
            rho=0.0,
            M=float(m_bound),
            L_x0=l_x0,
            L_x1=l_x1,
            L_y0=l_y0,
            L_y1=l_y1,
            sigma_f1=noise.sigma_f,
            sigma_f2=noise.sigma_f,
            sigma_g1=noise.sigma_g1,
            sigma_g2=noise.sigma_g2,
        )

    # -- closed forms ---------------------------------------------------------

    @property
    def has_analytic(self) -> bool:
        return True

    def y_star(self, x: Vector) -> Vector:
        x = check_point(x, self.d_x, "x")
        return (x @ self.B.T + self.c) @ self._A_inv.T

    def _grad_x_f_mean(self, x, y):
        if self.upper_kind == "quadratic":
            return self.weight_x * (x - self.target_x)
        r = x + y @ self.W.T - self.quartic_target
        n2 = np.sum(r * r, axis=-1, keepdims=True)
        return self.scale * n2 * r

    def _grad_y_f_mean(self, x, y):
        if self.upper_kind == "quadratic":
            return self.weight_y * (y - self.target_y)
        r = x + y @ self.W.T - self.quartic_target
        n2 = np.sum(r * r, axis=-1, keepdims=True)
        return self.scale * n2 * (r @ self.W)

    def f_value(self, x: Vector, y: Vector) -> float:
        x = check_point(x, self.d_x, "x")
        y = check_point(y, self.d_y, "y")
        if self.upper_kind == "quadratic":
            val = 0.5 * self.weight_x * np.sum((x - self.target_x) ** 2, axis=-1)
            val = val + 0.5 * self.weight_y * np.sum((y - self.target_y) ** 2, axis=-1)
        else:
            r = x + y @ self.W.T - self.quartic_target
            val = 0.25 * self.scale * np.sum(r * r, axis=-1) ** 2
        return val if np.ndim(val) else float(val)

    def g_value(self, x: Vector, y: Vector) -> float:
        x = check_point(x, self.d_x, "x")
        y = check_point(y, self.d_y, "y")
        val = 0.5 * np.sum((y @ self.A.T) * y, axis=-1) - np.sum(y * (x @ self.B.T + self.c), axis=-1)
        return val if np.ndim(val) else float(val)

    def z_star(self, x: Vector) -> Vector:
        ys = self.y_star(x)
        return self._grad_y_f_mean(check_point(x, self.d_x, "x"), ys) @ self._A_inv.T

    def phi_grad_exact(self, x: Vector) -> Vector:
        x = check_point(x, self.d_x, "x")
        ys = self.y_star(x)
        # grad Phi = grad_x f(x, y*) - (mixed derivative) z* = grad_x f + B' z*
        return self._grad_x_f_mean(x, ys) + self.z_star(x) @ self.B

    def phi_value(self, x: Vector) -> float:
        return self.f_value(x, self.y_star(x))

    def _estimate_m(self) -> float:
        rng = np.random.default_rng(0)
        pts = rng.standard_normal((16, self.d_x)) * 3.0
        norms = np.linalg.norm(self._grad_y_f_mean(pts, self.y_star(pts)), axis=-1)
        return 2.0 * float(np.max(norms)) + 1.0

    # -- stochastic oracles ----------------------------------------------------

    def oracle_grad_x_f(self, x, y, token: RngToken):
        x = check_point(x, self.d_x, "x")
        y = check_point(y, self.d_y, "y")
        mean = self._grad_x_f_mean(x, y)
        if self.noise.sigma_f == 0:
            return mean
        eps = token.generator(KIND_GRAD_X_F).standard_normal(np.broadcast(x, mean).shape)
        return mean + (self.noise.sigma_f / math.sqrt(self.d_x)) * eps

    def oracle_grad_y_f(self, x, y, token: RngToken):
        x = check_point(x, self.d_x, "x")
        y = check_point(y, self.d_y, "y")
        mean = self._grad_y_f_mean(x, y)
        if self.noise.sigma_f == 0:
            return mean
        eps = token.generator(KIND_GRAD_Y_F).standard_normal(mean.shape)
        return mean + (self.noise.sigma_f / math.sqrt(self.d_y)) * eps

    def oracle_grad_y_g(self, x, y, token: RngToken):
        x = check_point(x, self.d_x, "x")
        y = check_point(y, self.d_y, "y")
        mean = y @ self.A.T - (x @ self.B.T + self.c)
        if self.noise.sigma_g1 == 0:
            return mean
        eps = token.generator(KIND_GRAD_Y_G).standard_normal(mean.shape)
        return mean + (self.noise.sigma_g1 / math.sqrt(self.d_y)) * eps

    def oracle_hvp_yy_g(self, x, y, v, token: RngToken):
        check_point(x, self.d_x, "x")
        check_point(y, self.d_y, "y")
        v = check_point(v, self.d_y, "v")
        mean = v @ self.A.T
        if self.noise.sigma_g2 == 0:
            return mean
        e = token.generator(KIND_HVP_YY_G).standard_normal(v.shape[:-1] + (self.d_y, self.d_y))
        noise = np.einsum("...ij,...j->...i", e, v) * (self.noise.sigma_g2 / math.sqrt(self.d_y))
        return mean + noise

    def oracle_jvp_xy_g(self, x, y, v, token: RngToken):
        check_point(x, self.d_x, "x")
        check_point(y, self.d_y, "y")
        v = check_point(v, self.d_y, "v")
        mean = -(v @ self.B)
        if self.noise.sigma_g2 == 0:
            return mean
        e = token.generator(KIND_JVP_XY_G).standard_normal(v.shape[:-1] + (self.d_x, self.d_y))
        noise = np.einsum("...ij,...j->...i", e, v) * (self.noise.sigma_g2 / math.sqrt(self.d_x))
        return mean + noise

    # -- fast path ---------------------------------------------------------------

    def lower_affine(self, x):
        x = check_point(x, self.d_x, "x")
        return self.A, x @ self.B.T + self.c, self.noise.sigma_g1

    def f_value_estimate(self, x, y, token: RngToken) -> float:
        return float(np.mean(self.f_value(x, y)))

    def metadata(self) -> dict:
        md = super().metadata()
        md.update(
            kind="quadratic" if self.upper_kind == "quadratic" else "quartic",
            noise=dataclasses.asdict(self.noise),
            m_is_estimate=self._m_is_estimate,
        )
        return md


def _random_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def make_quadratic(
    dims: tuple[int, int],
    spectrum,
    coupling=1.0,
    upper_kind: str = "quadratic",
    noise: NoiseSpec = NoiseSpec(),
    seed: int = 0,
    **upper_params,
) -> QuadraticBilevel:
    """Random quadratic instance with the given lower-level Hessian spectrum.

    ``spectrum`` lists the eigenvalues of A (conjugated by a random rotation);
    ``coupling`` is either a scalar (B = coupling * random column-orthonormal
    matrix, so ||B|| = coupling) or an explicit d_y-by-d_x matrix.
    """
    d_x, d_y = int(dims[0]), int(dims[1])
    spectrum = np.asarray(spectrum, dtype=np.float64)
    if spectrum.shape != (d_y,) or np.any(spectrum <= 0):
        raise ValueError("spectrum must list d_y positive eigenvalues")
    rng = np.random.default_rng(seed)
    q = _random_orthogonal(d_y, rng)
    a_mat = (q * spectrum) @ q.T
    a_mat = 0.5 * (a_mat + a_mat.T)
    if np.ndim(coupling) == 0:
        m = rng.standard_normal((d_y, d_x))
        u, _, vt = np.linalg.svd(m, full_matrices=False)
        b_mat = float(coupling) * (u @ vt)
    else:
        b_mat = np.asarray(coupling, dtype=np.float64)
    c_vec = rng.standard_normal(d_y) * 0.5
    return QuadraticBilevel(a_mat, b_mat, c_vec, upper_kind, noise=noise, **upper_params)


def make_quartic_upper(
    p: QuadraticBilevel,
    w_mat,
    scale: float,
    target: Optional[np.ndarray] = None,
    m_bound: Optional[float] = None,
) -> QuadraticBilevel:
    """Same lower level as ``p``, quartic upper level on top."""
    return QuadraticBilevel(
        p.A,
        p.B,
        p.c,
        "quartic",
        w_mat=w_mat,
        scale=scale,
        quartic_target=target,
        noise=p.noise,
        m_bound=m_bound,
    )


def identity_fixture(d: int = 2, noise: NoiseSpec = NoiseSpec(), m_bound: float = 10.0) -> QuadraticBilevel:
    """A = B = I, c = 0, f = 0.5||y||^2: y*(x) = z*(x) = x and grad Phi(x) = x."""
    return QuadraticBilevel(
        np.eye(d), np.eye(d), np.zeros(d), "quadratic",
        weight_x=0.0, weight_y=1.0, noise=noise, m_bound=m_bound,
    )


# ---------------------------------------------------------------------------
# Synthetic text-classification stand-in datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    """Two-class Gaussian-blob data with optionally corrupted training labels."""

    x_train: np.ndarray
    y_train: np.ndarray        # labels in {-1, +1}, possibly flipped
    y_train_clean: np.ndarray
    flipped: np.ndarray        # bool mask of corrupted training labels
    x_val: np.ndarray
    y_val: np.ndarray
    p_corrupt: float
    seed: int

    @property
    def n_train(self) -> int:
        return self.x_train.shape[0]

    @property
    def n_val(self) -> int:
        return self.x_val.shape[0]

    @property
    def dim(self) -> int:
        return self.x_train.shape[1]

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            cols = ",".join(f"x{j}" for j in range(self.dim))
            fh.write(f"split,{cols},label,clean_label\n")
            for xs, ys, yc in zip(self.x_train, self.y_train, self.y_train_clean):
                row = ",".join(f"{v:.17g}" for v in xs)
                fh.write(f"train,{row},{int(ys)},{int(yc)}\n")
            for xs, ys in zip(self.x_val, self.y_val):
                row = ",".join(f"{v:.17g}" for v in xs)
                fh.write(f"val,{row},{int(ys)},{int(ys)}\n")


def gen_synthetic_dataset(
    n: int,
    d: int,
    class_sep: float = 2.0,
    p_corrupt: float = 0.0,
    seed: int = 0,
    n_val: Optional[int] = None,
) -> Dataset:
    """Two Gaussian blobs; each training label flips to the opposite class
    with probability ``p_corrupt``.  Validation labels stay clean."""
    if n < 1 or d < 1:
        raise ValueError("n and d must be >= 1")
    if not (0.0 <= p_corrupt < 1.0):
        raise ValueError("p_corrupt must be in [0, 1)")
    if n_val is None:
        n_val = max(20, n // 4)
    rng = np.random.default_rng(seed)
    offset = np.zeros(d)
    offset[0] = class_sep / 2.0

    def draw(m):
        labels = rng.integers(0, 2, size=m) * 2 - 1
        x = rng.standard_normal((m, d)) + labels[:, None] * offset
        return x, labels.astype(np.float64)

    x_train, y_clean = draw(n)
    x_val, y_val = draw(n_val)
    flips = rng.random(n) < p_corrupt
    y_train = np.where(flips, -y_clean, y_clean)
    return Dataset(x_train, y_train, y_clean, flips, x_val, y_val, p_corrupt, seed)


# ---------------------------------------------------------------------------
# Logistic-regression bilevel instances
# ---------------------------------------------------------------------------


def _sigmoid(t):
    out = np.empty_like(t, dtype=np.float64)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    et = np.exp(t[~pos])
    out[~pos] = et / (1.0 + et)
    return out


def _softplus(t):
    return np.logaddexp(0.0, t)


class _LogisticBase(StochasticBilevelProblem):
    """Shared machinery: logistic losses, minibatch tokens, value oracles."""

    def __init__(self, dataset: Dataset, batch: int):
        if dataset.n_train == 0 or dataset.n_val == 0:
            raise ValueError("dataset must be nonempty")
        self.data = dataset
        self.batch = int(batch) if batch else dataset.n_train
        if self.batch < 1:
            raise ValueError("batch must be >= 1")

    def _single(self, x, dim, name):
        x = check_point(x, dim, name)
        if x.ndim != 1:
            raise ValueError(f"{name}: logistic oracles accept single points, got shape {x.shape}")
        return x

    def _train_batch(self, token: RngToken):
        n = self.data.n_train
        if self.batch >= n:
            return np.arange(n)
        return token.generator(KIND_MINIBATCH).integers(0, n, size=self.batch)

    def _val_batch(self, token: RngToken):
        n = self.data.n_val
        if self.batch >= n:
            return np.arange(n)
        return token.generator(KIND_MINIBATCH + 7).integers(0, n, size=self.batch)

    @staticmethod
    def _loss_terms(xs, ys, w):
        margins = ys * (xs @ w)
        return _softplus(-margins), -_sigmoid(-margins) * ys  # loss_i, dloss/dmargin * y

    def _val_grad(self, w, idx):
        xs, ys = self.data.x_val[idx], self.data.y_val[idx]
        _, coef = self._loss_terms(xs, ys, w)
        return (coef[:, None] * xs).mean(axis=0)

    def val_loss(self, w) -> float:
        loss, _ = self._loss_terms(self.data.x_val, self.data.y_val, w)
        return float(loss.mean())


class HyperCleanProblem(_LogisticBase):
    """Per-sample reweighting of a corrupted training set.

    Upper variable: one raw weight per training sample, squashed through a
    sigmoid inside the lower objective

        g(lam, w) = (1/n) sum_i sigmoid(lam_i) loss_i(w) + creg ||w||^2,

    which is 2*creg strongly convex in w.  Upper objective: clean validation
    loss of w (independent of lam, so grad_x f = 0).
    """

    def __init__(self, dataset: Dataset, creg: float, batch: int = 0):
        super().__init__(dataset, batch)
        if creg <= 0:
            raise ValueError("creg must be positive")
        self.creg = float(creg)
        self.d_x = dataset.n_train
        self.d_y = dataset.dim
        n = dataset.n_train
        gram_top = float(np.linalg.norm(dataset.x_train, 2) ** 2) / n
        self.constants = ProblemConstants(
            mu=2.0 * creg,
            L=2.0 * creg + 0.25 * gram_top,
            C_gxy=float(np.linalg.norm(dataset.x_train) / (4.0 * n)),
            M=1.0 + float(np.max(np.linalg.norm(dataset.x_val, axis=1))),
            sigma_g1=gram_top,  # crude minibatch-noise scale, flagged as estimate
            sigma_g2=gram_top,
        )

    def oracle_grad_x_f(self, x, y, token):
        lam = self._single(x, self.d_x, "lam")
        self._single(y, self.d_y, "w")
        return np.zeros_like(lam)

    def oracle_grad_y_f(self, x, y, token):
        self._single(x, self.d_x, "lam")
        w = self._single(y, self.d_y, "w")
        return self._val_grad(w, self._val_batch(token))

    def oracle_grad_y_g(self, x, y, token):
        lam = self._single(x, self.d_x, "lam")
        w = self._single(y, self.d_y, "w")
        idx = self._train_batch(token)
        xs, ys = self.data.x_train[idx], self.data.y_train[idx]
        _, coef = self._loss_terms(xs, ys, w)
        weights = _sigmoid(lam[idx])
        return (weights * coef) @ xs / len(idx) + 2.0 * self.creg * w

    def oracle_hvp_yy_g(self, x, y, v, token):
        lam = self._single(x, self.d_x, "lam")
        w = self._single(y, self.d_y, "w")
        v = self._single(v, self.d_y, "v")
        idx = self._train_batch(token)
        xs, ys = self.data.x_train[idx], self.data.y_train[idx]
        s = _sigmoid(-ys * (xs @ w))
        curv = _sigmoid(lam[idx]) * s * (1.0 - s)
        return (curv * (xs @ v)) @ xs / len(idx) + 2.0 * self.creg * v

    def oracle_jvp_xy_g(self, x, y, v, token):
        lam = self._single(x, self.d_x, "lam")
        w = self._single(y, self.d_y, "w")
        v = self._single(v, self.d_y, "v")
        idx = self._train_batch(token)
        xs, ys = self.data.x_train[idx], self.data.y_train[idx]
        _, coef = self._loss_terms(xs, ys, w)
        sig = _sigmoid(lam[idx])
        contrib = sig * (1.0 - sig) * coef * (xs @ v) / len(idx)
        out = np.zeros(self.d_x)
        np.add.at(out, idx, contrib)
        return out

    def g_value(self, x, y) -> float:
        lam = self._single(x, self.d_x, "lam")
        w = self._single(y, self.d_y, "w")
        loss, _ = self._loss_terms(self.data.x_train, self.data.y_train, w)
        return float((_sigmoid(lam) * loss).mean() + self.creg * np.dot(w, w))

    def f_value_estimate(self, x, y, token) -> float:
        w = self._single(y, self.d_y, "w")
        idx = self._val_batch(token)
        loss, _ = self._loss_terms(self.data.x_val[idx], self.data.y_val[idx], w)
        return float(loss.mean())

    def metadata(self) -> dict:
        md = super().metadata()
        md.update(kind="hyperclean", creg=self.creg, batch=self.batch,
                  p_corrupt=self.data.p_corrupt, constants_are_estimates=True)
        return md


class HyperOptProblem(_LogisticBase):
    """Scalar regularization tuning with a softplus-floored regularizer.

    The raw upper variable lam enters through creg(lam) = c0 + softplus(lam),
    so the lower level g(lam, w) = train_loss(w) + creg(lam)/2 ||w||^2 stays
    at least c0-strongly convex for every lam (the raw parametrization of the
    regularizer would lose strong convexity at lam <= 0).
    """

    def __init__(self, dataset: Dataset, c0: float, batch: int = 0):
        super().__init__(dataset, batch)
        if c0 <= 0:
            raise ValueError("c0 must be positive")
        self.c0 = float(c0)
        self.d_x = 1
        self.d_y = dataset.dim
        n = dataset.n_train
        gram_top = float(np.linalg.norm(dataset.x_train, 2) ** 2) / n
        ref_reg = self.c0 + float(_softplus(np.array(3.0)))
        self.constants = ProblemConstants(
            mu=c0,
            L=ref_reg + 0.25 * gram_top,
            C_gxy=4.0,  # sigmoid(lam) * ||w|| on a desk-scale ball; estimate
            M=1.0 + float(np.max(np.linalg.norm(dataset.x_val, axis=1))),
            sigma_g1=gram_top,
            sigma_g2=gram_top,
        )

    def effective_reg(self, lam) -> float:
        return self.c0 + float(_softplus(np.asarray(lam, dtype=np.float64)).reshape(-1)[0])

    def oracle_grad_x_f(self, x, y, token):
        self._single(x, 1, "lam")
        self._single(y, self.d_y, "w")
        return np.zeros(1)

    def oracle_grad_y_f(self, x, y, token):
        self._single(x, 1, "lam")
        w = self._single(y, self.d_y, "w")
        return self._val_grad(w, self._val_batch(token))

    def oracle_grad_y_g(self, x, y, token):
        lam = self._single(x, 1, "lam")
        w = self._single(y, self.d_y, "w")
        idx = self._train_batch(token)
        xs, ys = self.data.x_train[idx], self.data.y_train[idx]
        _, coef = self._loss_terms(xs, ys, w)
        return coef @ xs / len(idx) + self.effective_reg(lam) * w

    def oracle_hvp_yy_g(self, x, y, v, token):
        lam = self._single(x, 1, "lam")
        w = self._single(y, self.d_y, "w")
        v = self._single(v, self.d_y, "v")
        idx = self._train_batch(token)
        xs, ys = self.data.x_train[idx], self.data.y_train[idx]
        s = _sigmoid(-ys * (xs @ w))
        curv = s * (1.0 - s)
        return (curv * (xs @ v)) @ xs / len(idx) + self.effective_reg(lam) * v

    def oracle_jvp_xy_g(self, x, y, v, token):
        lam = self._single(x, 1, "lam")
        w = self._single(y, self.d_y, "w")
        v = self._single(v, self.d_y, "v")
        # d/dlam of grad_w g = sigmoid(lam) * w, independent of the minibatch
        return np.array([float(_sigmoid(lam)[0] * np.dot(w, v))])

    def g_value(self, x, y) -> float:
        lam = self._single(x, 1, "lam")
        w = self._single(y, self.d_y, "w")
        loss, _ = self._loss_terms(self.data.x_train, self.data.y_train, w)
        return float(loss.mean() + 0.5 * self.effective_reg(lam) * np.dot(w, w))

    def f_value_estimate(self, x, y, token) -> float:
        w = self._single(y, self.d_y, "w")
        idx = self._val_batch(token)
        loss, _ = self._loss_terms(self.data.x_val[idx], self.data.y_val[idx], w)
        return float(loss.mean())

    def metadata(self) -> dict:
        md = super().metadata()
        md.update(kind="hyperopt", c0=self.c0, batch=self.batch, constants_are_estimates=True)
        return md


def make_hyperclean(dataset: Dataset, creg: float, batch: int = 0) -> HyperCleanProblem:
    return HyperCleanProblem(dataset, creg, batch)


def make_hyperopt(dataset: Dataset, c0: float, batch: int = 0) -> HyperOptProblem:
    return HyperOptProblem(dataset, c0, batch)


# ---------------------------------------------------------------------------
# JSON construction
# ---------------------------------------------------------------------------

SCHEMA_VERSION = 1


def from_json(spec) -> StochasticBilevelProblem:
    """Build a problem from its JSON description (dict, JSON text, or path).

    Schema: ``{"schema": 1, "kind": "quadratic|quartic|hyperclean|hyperopt",
    "seed": int, "noise": float | {...}, ...kind-specific parameters}``.
    """
    if isinstance(spec, (str, bytes)):
        text = spec
        try:
            obj = json.loads(text)
        except json.JSONDecodeError:
            with open(text) as fh:
                obj = json.load(fh)
    else:
        obj = dict(spec)
    if obj.get("schema", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema {obj.get('schema')}")
    kind = obj.get("kind")
    seed = int(obj.get("seed", 0))
    noise = NoiseSpec.from_json(obj.get("noise"))

    if kind in ("quadratic", "quartic"):
        dims = tuple(obj.get("dims", (2, 2)))
        spectrum = obj.get("spectrum", [1.0] * dims[1])
        coupling = obj.get("coupling", 1.0)
        if obj.get("identity", False):
            base = identity_fixture(dims[1], noise=noise, m_bound=obj.get("m_bound", 10.0))
        else:
            base = make_quadratic(
                dims, spectrum, coupling, "quadratic", noise=noise, seed=seed,
                weight_x=obj.get("weight_x", 1.0), weight_y=obj.get("weight_y", 1.0),
                m_bound=obj.get("m_bound"),
            )
        if kind == "quadratic":
            return base
        d_x, d_y = base.d_x, base.d_y
        w_mat = np.asarray(obj["w_mat"], dtype=np.float64) if "w_mat" in obj else np.eye(d_x, d_y)
        return make_quartic_upper(
            base, w_mat, obj.get("scale", 1.0),
            target=np.asarray(obj["target"], dtype=np.float64) if "target" in obj else None,
            m_bound=obj.get("m_bound"),
        )

    if kind in ("hyperclean", "hyperopt"):
        ds = gen_synthetic_dataset(
            n=int(obj.get("n", 400)),
            d=int(obj.get("d", 10)),
            class_sep=float(obj.get("class_sep", 2.0)),
            p_corrupt=float(obj.get("p_corrupt", 0.0)),
            seed=seed,
        )
        batch = int(obj.get("batch", 0))
        if kind == "hyperclean":
            return make_hyperclean(ds, float(obj.get("creg", 0.05)), batch)
        return make_hyperopt(ds, float(obj.get("c0", 0.05)), batch)

    raise ValueError(f"unknown problem kind {kind!r}")
