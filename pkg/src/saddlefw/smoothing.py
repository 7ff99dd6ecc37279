"""Smoothed primal objective and Moreau-envelope utilities.

Regularizing the dual variable around ``y_bar`` with weight ``1/(2 gamma)``
turns the saddle problem into the minimization of

    F(x) = f(x) + h_{gamma, y_bar}(Kx)
    h_{gamma, y_bar}(Kx) = gamma/2 ||Kx||^2 + <Kx, y_bar> - m(y_bar + gamma Kx)

where ``m`` is the Moreau envelope of ``h*`` with parameter ``gamma``. The
gradient is ``grad f(x) + K* prox_{gamma h*}(y_bar + gamma Kx)``.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .core import DimensionError, LinearMap, ProxFunction, SmoothPart, as_vector
from .frankwolfe import SmoothObjective, project_simplex

__all__ = [
    "RankDeficientError",
    "AffineConstraintSet",
    "AffineIndicator",
    "AffineSupportFunction",
    "SimplexIndicator",
    "SmoothedPrimal",
    "smoothed_value",
    "smoothed_gradient",
    "project_affine",
    "moreau_envelope",
    "moreau_identity_check",
    "as_smooth_objective",
]


class RankDeficientError(ValueError):
    """The constraint matrix of an affine set lacks full row rank."""


class AffineConstraintSet:
    """The affine set ``{y : C y = d}`` with a cached factorization of ``C C*``."""

    def __init__(self, C, d):
        C = np.array(C, dtype=float, ndmin=2)
        d = as_vector(d, "d")
        if C.shape[0] != d.size:
            raise DimensionError(C.shape[0], d.size, "rows of C and d")
        rank = np.linalg.matrix_rank(C)
        if rank < C.shape[0]:
            raise RankDeficientError(
                f"C has rank {rank} < {C.shape[0]} rows; remove redundant or "
                "conflicting constraints (row-reduce C) before building the set"
            )
        self.C = C
        self.d = d
        gram = C @ C.T
        self.jittered = False
        try:
            self._chol = scipy.linalg.cho_factor(gram)
        except np.linalg.LinAlgError:
            self.jittered = True
            self._chol = scipy.linalg.cho_factor(gram + 1e-12 * np.eye(len(gram)))

    @property
    def dim(self) -> int:
        return self.C.shape[1]

    def project(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        lam = scipy.linalg.cho_solve(self._chol, self.d - self.C @ z)
        return z + self.C.T @ lam

    def residual(self, y) -> float:
        return float(np.linalg.norm(self.C @ y - self.d))

    def min_norm_point(self) -> np.ndarray:
        return self.project(np.zeros(self.dim))

    def rowspace_projection(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        return self.C.T @ scipy.linalg.cho_solve(self._chol, self.C @ v)


def project_affine(aset: AffineConstraintSet, z) -> np.ndarray:
    """Euclidean projection ``z + C*(CC*)^{-1}(d - Cz)``."""
    return aset.project(z)


class AffineIndicator(ProxFunction):
    """Indicator of ``{C y = d}``; its prox is the projection."""

    affine = True

    def __init__(self, aset: AffineConstraintSet, tol: float = 1e-9):
        self.set = aset
        self.tol = tol

    def prox(self, tau, z):
        return self.set.project(z)

    def value(self, y):
        ok = self.set.residual(y) <= self.tol * (1.0 + np.linalg.norm(self.set.d))
        return 0.0 if ok else np.inf

    def domain_projection(self, z):
        return self.set.project(z)

    def conjugate(self, v):
        # finite only on the row space of C, where sup_{Cy=d} <v,y> = <v, y0>
        v = np.asarray(v, dtype=float)
        off = v - self.set.rowspace_projection(v)
        if np.linalg.norm(off) > self.tol * (1.0 + np.linalg.norm(v)):
            return np.inf
        return float(v @ self.set.min_norm_point())


class AffineSupportFunction(ProxFunction):
    """Support function of ``{C y = d}``, the conjugate of :class:`AffineIndicator`.

    ``sigma(v) = <v, y0> + indicator(v in range C*)`` with ``y0`` the
    min-norm feasible point; ``prox_tau(z) = P_range(z - tau y0)``.
    """

    affine = True

    def __init__(self, aset: AffineConstraintSet, tol: float = 1e-9):
        self.set = aset
        self.tol = tol
        self.y0 = aset.min_norm_point()

    def prox(self, tau, z):
        return self.set.rowspace_projection(np.asarray(z, dtype=float) - tau * self.y0)

    def value(self, v):
        v = np.asarray(v, dtype=float)
        off = v - self.set.rowspace_projection(v)
        if np.linalg.norm(off) > self.tol * (1.0 + np.linalg.norm(v)):
            return np.inf
        return float(v @ self.y0)

    def conjugate(self, y):
        return 0.0 if self.set.residual(y) <= self.tol * (1.0 + np.linalg.norm(self.set.d)) else np.inf


class SimplexIndicator(ProxFunction):
    """Indicator of the unit simplex."""

    def __init__(self, dim: int, tol: float = 1e-9):
        self.dim = int(dim)
        self.tol = tol
        self.domain_diameter = float(np.sqrt(2.0)) if dim > 1 else 0.0

    def prox(self, tau, z):
        return project_simplex(z)

    def value(self, y):
        y = np.asarray(y, dtype=float)
        ok = y.min() >= -self.tol and abs(y.sum() - 1.0) <= self.tol
        return 0.0 if ok else np.inf

    def domain_projection(self, z):
        return project_simplex(z)

    def conjugate(self, v):
        return float(np.max(v))


def moreau_envelope(h: ProxFunction, mu: float, z) -> float:
    """``m_h^mu(z) = h(p) + ||z - p||^2 / (2 mu)`` with ``p = prox_{mu h}(z)``."""
    if mu <= 0:
        raise ValueError("mu must be positive")
    z = np.asarray(z, dtype=float)
    p = h.prox(mu, z)
    hp = h.value(p)
    if not np.isfinite(hp):
        raise ValueError("prox output lies outside the domain of h")
    r = z - p
    return hp + float(r @ r) / (2.0 * mu)


def moreau_identity_check(h: ProxFunction, h_star: ProxFunction, mu: float, z) -> float:
    """Residual ``||z - prox_{mu h}(z) - mu prox_{h*/mu}(z/mu)||``."""
    z = np.asarray(z, dtype=float)
    return float(np.linalg.norm(z - h.prox(mu, z) - mu * h_star.prox(1.0 / mu, z / mu)))


class SmoothedPrimal:
    """``F(x) = f(x) + h_{gamma, y_bar}(Kx)`` with Lipschitz constant ``L_f + gamma L_K^2``."""

    def __init__(self, gamma: float, y_bar, K: LinearMap, f: SmoothPart, h_star: ProxFunction):
        if not gamma > 0:
            raise ValueError("gamma must be positive")
        y_bar = as_vector(y_bar, "y_bar")
        if y_bar.size != K.shape[0]:
            raise DimensionError(y_bar.size, K.shape[0], "y_bar and range of K")
        self.gamma = float(gamma)
        self.y_bar = y_bar
        self.K = K
        self.f = f
        self.h_star = h_star
        self.lipschitz = f.lipschitz + self.gamma * K.norm_bound**2

    def dual_point(self, x) -> np.ndarray:
        """The maximizing dual ``prox_{gamma h*}(y_bar + gamma Kx)``."""
        return self.h_star.prox(self.gamma, self.y_bar + self.gamma * self.K.apply(x))

    def coupling_value(self, Kx) -> float:
        g = self.gamma
        z = self.y_bar + g * Kx
        p = self.h_star.prox(g, z)
        hp = self.h_star.value(p)
        if not np.isfinite(hp):
            raise RuntimeError("prox of h* returned a point outside its domain")
        r = z - p
        env = hp + float(r @ r) / (2.0 * g)
        return 0.5 * g * float(Kx @ Kx) + float(Kx @ self.y_bar) - env

    def value(self, x) -> float:
        return self.f.value(x) + self.coupling_value(self.K.apply(x))

    def gradient(self, x) -> np.ndarray:
        return self.f.gradient(x) + self.K.adjoint(self.dual_point(x))

    @property
    def quadratic(self) -> bool:
        return self.f.kind in ("linear", "quadratic") and self.h_star.affine

    def hessian_apply(self, d) -> np.ndarray:
        if not self.quadratic:
            raise NotImplementedError("smoothed primal is not quadratic")
        g = self.gamma
        lin = self.h_star.prox(g, g * self.K.apply(d)) - self._prox_zero
        return self.f.hessian_apply(d) + self.K.adjoint(lin)

    @property
    def _prox_zero(self):
        if not hasattr(self, "_pz"):
            self._pz = self.h_star.prox(self.gamma, np.zeros(self.K.shape[0]))
        return self._pz


def smoothed_value(sp: SmoothedPrimal, x) -> float:
    return sp.value(x)


def smoothed_gradient(sp: SmoothedPrimal, x) -> np.ndarray:
    return sp.gradient(x)


def as_smooth_objective(sp: SmoothedPrimal) -> SmoothObjective:
    """Wrap ``sp`` for the Frank-Wolfe solver.

    Declares quadratic curvature when ``f`` is linear/quadratic and the prox
    of ``h*`` is affine; the Hessian is applied through ``K`` and the prox,
    never assembled.
    """
    hess = sp.hessian_apply if sp.quadratic else None
    return SmoothObjective(sp.value, sp.gradient, sp.lipschitz, hess)
