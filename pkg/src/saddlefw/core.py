"""Problem abstractions shared by every solver.

A saddle problem ``min_x max_y <Kx, y> + f(x) + delta_P(x) - h*(y)`` is
described by four pieces:

* a :class:`LinearMap` ``K`` with its adjoint and an operator-norm bound,
* a smooth convex part ``f`` (:class:`SmoothPart` and subclasses),
* a linear minimization oracle for the polytope ``P`` (:class:`Lmo`),
* a proximable convex function ``h*`` (:class:`ProxFunction`).

Vectors are plain one-dimensional float64 numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Optional

import numpy as np

__all__ = [
    "DimensionError",
    "NonFiniteError",
    "as_vector",
    "inner_product",
    "LinearMap",
    "estimate_operator_norm",
    "SmoothPart",
    "LinearPart",
    "QuadraticPart",
    "Atom",
    "Lmo",
    "SimplexLmo",
    "VertexLmo",
    "ProxFunction",
    "ZeroFunction",
    "PointIndicator",
    "LinearFunction",
    "HalfSquaredNorm",
    "SaddleProblem",
]

# the operator-norm estimate is a lower bound; callers needing an upper
# bound multiply by this factor
NORM_SAFETY = 1.01


class DimensionError(ValueError):
    """Raised when two vectors or a vector and a map disagree in size."""

    def __init__(self, left: int, right: int, what: str = "vectors"):
        self.left = left
        self.right = right
        super().__init__(f"dimension mismatch between {what}: {left} != {right}")


class NonFiniteError(ValueError):
    """Raised when a vector contains NaN or Inf entries."""


def as_vector(a, name: str = "vector") -> np.ndarray:
    """Convert ``a`` to a finite 1-D float array, raising on NaN/Inf."""
    v = np.asarray(a, dtype=float)
    if v.ndim == 0:
        v = v.reshape(1)
    if v.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return v


def inner_product(a, b) -> float:
    """Euclidean inner product ``sum_i a_i b_i``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionError(a.size, b.size)
    return float(np.dot(a.ravel(), b.ravel()))


class LinearMap:
    """A linear operator given by forward and adjoint callables.

    Parameters
    ----------
    apply, adjoint : callable
        ``apply(x)`` maps ``R^n -> R^m`` and ``adjoint(y)`` maps back.
    shape : (m, n)
    norm_bound : float, optional
        Upper bound on the operator norm. If omitted it is estimated by
        power iteration and inflated by ``NORM_SAFETY``.
    """

    def __init__(self, apply: Callable, adjoint: Callable, shape, norm_bound=None):
        self._apply = apply
        self._adjoint = adjoint
        self.shape = (int(shape[0]), int(shape[1]))
        if norm_bound is None:
            norm_bound = NORM_SAFETY * estimate_operator_norm(self, 200)
        if norm_bound < 0:
            raise ValueError("norm_bound must be nonnegative")
        self.norm_bound = float(norm_bound)

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.shape[1],):
            raise DimensionError(x.size, self.shape[1], "input and map domain")
        return self._apply(x)

    def adjoint(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.shape != (self.shape[0],):
            raise DimensionError(y.size, self.shape[0], "input and map range")
        return self._adjoint(y)

    __call__ = apply

    @classmethod
    def from_matrix(cls, M) -> "LinearMap":
        M = np.array(M, dtype=float, ndmin=2)
        norm = float(np.linalg.norm(M, 2)) if M.size else 0.0
        m = cls(lambda x: M @ x, lambda y: M.T @ y, M.shape, norm_bound=norm)
        m.matrix = M
        return m

    @classmethod
    def identity(cls, n: int) -> "LinearMap":
        return cls(lambda x: x.copy(), lambda y: y.copy(), (n, n), norm_bound=1.0)

    @classmethod
    def zero(cls, m: int, n: int) -> "LinearMap":
        return cls(lambda x: np.zeros(m), lambda y: np.zeros(n), (m, n), norm_bound=0.0)


def estimate_operator_norm(K: LinearMap, iters: int, seed: int = 0) -> float:
    """Power iteration on ``K*K``.

    Returns ``||K v||`` for the final unit vector ``v``, which never exceeds
    the true norm and converges to it.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    n = K.shape[1]
    if n == 0 or K.shape[0] == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        w = K._adjoint(K._apply(v))
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
    est = float(np.linalg.norm(K._apply(v)))
    return est


class SmoothPart:
    """Convex function with Lipschitz gradient.

    ``kind`` is one of ``"linear"``, ``"quadratic"`` or ``"general"``; the
    first two also provide :meth:`hessian_apply`.
    """

    kind = "general"

    def __init__(self, value: Callable, gradient: Callable, lipschitz: float):
        self._value = value
        self._gradient = gradient
        self.lipschitz = float(lipschitz)

    def value(self, x) -> float:
        return float(self._value(x))

    def gradient(self, x) -> np.ndarray:
        return np.asarray(self._gradient(x), dtype=float)

    def hessian_apply(self, d) -> np.ndarray:
        raise NotImplementedError("general smooth parts have no constant Hessian")


class LinearPart(SmoothPart):
    """``f(x) = <c, x> + const``."""

    kind = "linear"

    def __init__(self, c, const: float = 0.0):
        self.c = as_vector(c, "c")
        self.const = float(const)
        self.lipschitz = 0.0

    def value(self, x) -> float:
        return float(self.c @ x) + self.const

    def gradient(self, x) -> np.ndarray:
        return self.c.copy()

    def hessian_apply(self, d) -> np.ndarray:
        return np.zeros_like(self.c)


class QuadraticPart(SmoothPart):
    """``f(x) = 1/2 <Qx, x> + <q, x> + const`` with ``Q`` symmetric PSD."""

    kind = "quadratic"

    def __init__(self, Q, q, const: float = 0.0):
        Q = np.array(Q, dtype=float, ndmin=2)
        q = as_vector(q, "q")
        if Q.shape != (q.size, q.size):
            raise DimensionError(Q.shape[0], q.size, "Q and q")
        if not np.allclose(Q, Q.T, rtol=0, atol=1e-12 * max(1.0, np.abs(Q).max())):
            raise ValueError("Q must be symmetric")
        eig = np.linalg.eigvalsh(Q)
        if eig[0] < -1e-10 * max(1.0, abs(eig[-1])):
            raise ValueError(f"Q must be positive semidefinite (min eigenvalue {eig[0]:.3g})")
        self.Q = Q
        self.q = q
        self.const = float(const)
        self.lipschitz = float(max(eig[-1], 0.0))

    def value(self, x) -> float:
        return 0.5 * float(x @ (self.Q @ x)) + float(self.q @ x) + self.const

    def gradient(self, x) -> np.ndarray:
        return self.Q @ x + self.q

    def hessian_apply(self, d) -> np.ndarray:
        return self.Q @ d


@dataclass(frozen=True, eq=False)
class Atom:
    """A vertex of the primal polytope.

    ``id`` is a canonical content key: two atoms with equal ids have equal
    points, which is what active sets use for deduplication.
    """

    id: Hashable
    point: np.ndarray
    aux: Any = None

    def __eq__(self, other):
        return isinstance(other, Atom) and self.id == other.id

    def __hash__(self):
        return hash(self.id)


class Lmo:
    """Linear minimization oracle base class.

    Subclasses implement :meth:`_argmin`. Every call to :meth:`minimize`
    with ``count=True`` increments :attr:`calls`; diagnostics that should not
    be charged to a solver pass ``count=False``.
    """

    #: whether ``minimize`` may be called from several threads at once
    concurrent = False

    def __init__(self, dim: int, diameter: float):
        self.dim = int(dim)
        self.diameter = float(diameter)
        self.calls = 0

    def minimize(self, a, count: bool = True) -> Atom:
        a = np.asarray(a, dtype=float)
        if a.shape != (self.dim,):
            raise DimensionError(a.size, self.dim, "direction and polytope")
        if count:
            self.calls += 1
        return self._argmin(a)

    def _argmin(self, a: np.ndarray) -> Atom:
        raise NotImplementedError

    def contains(self, x, tol: float = 1e-9) -> bool:
        raise NotImplementedError


class SimplexLmo(Lmo):
    """Unit simplex ``{x >= 0, sum x = 1}``; atoms are the unit vectors."""

    def __init__(self, dim: int):
        super().__init__(dim, np.sqrt(2.0) if dim > 1 else 0.0)

    def vertex(self, i: int) -> Atom:
        e = np.zeros(self.dim)
        e[i] = 1.0
        return Atom(int(i), e)

    def _argmin(self, a):
        # np.argmin returns the first minimizer: smallest index wins ties
        return self.vertex(int(np.argmin(a)))

    def contains(self, x, tol=1e-9):
        x = np.asarray(x, dtype=float)
        return bool(x.min() >= -tol and abs(x.sum() - 1.0) <= tol)


class VertexLmo(Lmo):
    """Polytope given as the convex hull of an explicit vertex list."""

    def __init__(self, vertices):
        V = np.array(vertices, dtype=float, ndmin=2)
        self.vertices = V
        diffs = V[:, None, :] - V[None, :, :]
        diam = float(np.sqrt((diffs**2).sum(-1)).max()) if len(V) else 0.0
        super().__init__(V.shape[1], diam)

    def _argmin(self, a):
        i = int(np.argmin(self.vertices @ a))
        return Atom(i, self.vertices[i].copy())

    def contains(self, x, tol=1e-9):
        from scipy.optimize import linprog

        x = np.asarray(x, dtype=float)
        k = len(self.vertices)
        A_eq = np.vstack([self.vertices.T, np.ones((1, k))])
        b_eq = np.concatenate([x, [1.0]])
        res = linprog(np.zeros(k), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
        return bool(res.status == 0)


class ProxFunction:
    """Convex function accessed through its proximal map.

    ``prox(tau, z)`` returns ``argmin_y phi(y) + ||y - z||^2 / (2 tau)``.
    ``value`` may return ``inf`` outside the domain. ``affine`` declares that
    ``z -> prox(tau, z)`` is an affine map, which makes smoothed objectives
    quadratic. ``conjugate`` evaluates ``phi*`` when a closed form exists.
    """

    affine = False
    domain_diameter: Optional[float] = None

    def prox(self, tau: float, z) -> np.ndarray:
        raise NotImplementedError

    def value(self, y) -> float:
        raise NotImplementedError

    def domain_projection(self, z) -> np.ndarray:
        return np.array(z, dtype=float)

    def conjugate(self, v) -> float:
        raise NotImplementedError(f"{type(self).__name__} has no closed-form conjugate")


def _close(a, b, tol=1e-9) -> bool:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return bool(np.linalg.norm(a - b) <= tol * (1.0 + np.linalg.norm(b)))


class ZeroFunction(ProxFunction):
    """``phi = 0``; prox is the identity, conjugate is the indicator of {0}."""

    affine = True

    def prox(self, tau, z):
        return np.array(z, dtype=float)

    def value(self, y):
        return 0.0

    def conjugate(self, v):
        return 0.0 if _close(v, np.zeros_like(v)) else np.inf


class PointIndicator(ProxFunction):
    """Indicator of a single point (``{0}`` by default)."""

    affine = True
    domain_diameter = 0.0

    def __init__(self, point):
        self.point = as_vector(point, "point")

    @classmethod
    def origin(cls, dim: int) -> "PointIndicator":
        return cls(np.zeros(dim))

    def prox(self, tau, z):
        return self.point.copy()

    def value(self, y):
        return 0.0 if _close(y, self.point, 1e-12) else np.inf

    def domain_projection(self, z):
        return self.point.copy()

    def conjugate(self, v):
        return float(np.dot(v, self.point))


class LinearFunction(ProxFunction):
    """``phi(y) = <b, y>``, the dual term of an equality-constrained problem."""

    affine = True

    def __init__(self, b):
        self.b = as_vector(b, "b")

    def prox(self, tau, z):
        return np.asarray(z, dtype=float) - tau * self.b

    def value(self, y):
        return float(np.dot(self.b, y))

    def conjugate(self, v):
        return 0.0 if _close(v, self.b) else np.inf


class HalfSquaredNorm(ProxFunction):
    """``phi(y) = 1/2 ||y||^2``, its own conjugate."""

    affine = True

    def prox(self, tau, z):
        return np.asarray(z, dtype=float) / (1.0 + tau)

    def value(self, y):
        return 0.5 * float(np.dot(y, y))

    def conjugate(self, v):
        return 0.5 * float(np.dot(v, v))


@dataclass
class SaddleProblem:
    """``min_{x in P} max_y <Kx, y> + f(x) - h*(y)``.

    ``A`` and ``b`` are set when the problem came from the equality
    constrained form ``min f_P(x) s.t. Ax = b`` (then ``K = A`` and
    ``h*(y) = <b, y>``). ``source`` carries the structured instance (e.g.
    the grid MRF) for decoding.
    """

    K: LinearMap
    f: SmoothPart
    lmo: Lmo
    h_star: ProxFunction
    A: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    source: Any = None
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.K.shape[1] != self.lmo.dim:
            raise DimensionError(self.K.shape[1], self.lmo.dim, "K domain and polytope")

    @property
    def primal_dim(self) -> int:
        return self.K.shape[1]

    @property
    def dual_dim(self) -> int:
        return self.K.shape[0]

    @property
    def is_axb(self) -> bool:
        return self.A is not None

    def lagrangian(self, x, y) -> float:
        return float(self.K.apply(x) @ y) + self.f.value(x) - self.h_star.value(y)

    @classmethod
    def from_equality_constrained(cls, f: SmoothPart, lmo: Lmo, A, b, name="") -> "SaddleProblem":
        A = np.array(A, dtype=float, ndmin=2)
        b = as_vector(b, "b")
        if A.shape[0] != b.size:
            raise DimensionError(A.shape[0], b.size, "A rows and b")
        return cls(LinearMap.from_matrix(A), f, lmo, LinearFunction(b), A=A, b=b, name=name)
