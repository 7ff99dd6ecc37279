"""Inexact accelerated proximal point method on the dual.

Each outer iteration minimizes the smoothed primal ``F_{gamma, y_bar}`` to
Frank-Wolfe accuracy ``eps_n`` (warm-started from the previous active set),
reads off the dual iterate ``y_n = prox_{gamma h*}(y_bar + gamma K x_n)``
and extrapolates

    y_bar_n = y_n + ((t_n - 1) / t_{n+1}) * (y_n - y_{n-1}).

``t_n = 1`` gives the plain (inexact) proximal point method.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import Lmo, SaddleProblem
from .frankwolfe import ActiveSet, FwResult, FwStats, SmoothObjective, fw_gap, fw_until
from .smoothing import SmoothedPrimal, as_smooth_objective

__all__ = [
    "TSchedule",
    "t_next",
    "EpsSchedule",
    "AppaState",
    "appa_init",
    "appa_iterate",
    "ergodic_primal",
    "ergodic_dual",
    "eval_dual",
    "primal_value",
    "infeasibility",
    "smoothed_certificate",
    "appa_solve",
]

T_KINDS = ("constant_one", "nesterov", "aujol_dossal", "aggressive")


class TSchedule:
    """Momentum sequence ``t_n`` with ``t_1 = 1``.

    Parameters
    ----------
    kind : {"constant_one", "nesterov", "aujol_dossal", "aggressive"}
    a, d : float
        Parameters of ``t_n = ((n + a - 1) / a) ** d`` (``aujol_dossal``
        only); requires ``0 < d <= 1`` and ``a > max(1, (2d)^(1/d))``.

    On construction ``rho_n = t_{n-1}^2 - t_n^2 + t_n > 0`` is checked for
    the first ``check_terms`` terms. The Nesterov sequence has
    ``rho_n = 0`` exactly, so for it rounding-level violations are allowed.
    """

    def __init__(self, kind: str, a: Optional[float] = None, d: Optional[float] = None, check_terms: int = 10_000):
        if kind not in T_KINDS:
            raise ValueError(f"unknown t-schedule {kind!r}; expected one of {T_KINDS}")
        self.kind = kind
        if kind == "aujol_dossal":
            if a is None or d is None:
                raise ValueError("aujol_dossal needs parameters a and d")
            if not 0 < d <= 1:
                raise ValueError(f"aujol_dossal needs 0 < d <= 1, got d={d}")
            lower = max(1.0, (2.0 * d) ** (1.0 / d))
            if not a > lower:
                raise ValueError(f"aujol_dossal needs a > max(1, (2d)^(1/d)) = {lower:.6g}, got a={a}")
        self.a = a
        self.d = d
        self._check(check_terms)

    def next(self, n: int, t_n: float) -> float:
        """``t_{n+1}`` from ``t_n``."""
        if n < 1:
            raise ValueError("n must be >= 1")
        if self.kind == "constant_one":
            return 1.0
        if self.kind == "nesterov":
            return 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t_n * t_n))
        if self.kind == "aggressive":
            return 0.5 * (n + 2)
        return ((n + self.a) / self.a) ** self.d

    def sequence(self, N: int) -> np.ndarray:
        t = np.empty(N)
        t[0] = 1.0
        for n in range(1, N):
            t[n] = self.next(n, t[n - 1])
        return t

    @staticmethod
    def rho(t_prev: float, t_n: float) -> float:
        return t_prev * t_prev - t_n * t_n + t_n

    def _check(self, N: int):
        if N < 2:
            return
        t = self.sequence(N)
        rho = t[:-1] ** 2 - t[1:] ** 2 + t[1:]
        if self.kind == "nesterov":
            bad = rho < -1e-9 * t[1:] ** 2
        else:
            bad = rho <= 0
        if bad.any():
            n = int(np.flatnonzero(bad)[0]) + 2
            raise ValueError(f"t-schedule violates rho_n > 0 at n={n} (rho={rho[n - 2]:.3g})")

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "aujol_dossal":
            out.update(a=self.a, d=self.d)
        return out


def t_next(s: TSchedule, n: int, t_n: float) -> float:
    """Next momentum parameter ``t_{n+1}``."""
    if t_n < 1:
        raise ValueError("t_n must be >= 1")
    return s.next(n, t_n)


class EpsSchedule:
    """Inner accuracies ``eps_n``.

    ``power``: ``scale * n**(-alpha)``; ``theory``: ``scale * n**(-(4 + delta))``.
    When ``scale`` is None it is set to the first measured Frank-Wolfe gap
    (see :meth:`calibrate`). ``floor`` bounds ``eps_n`` from below, relative
    to the scale, so that inner solves stay above rounding level.
    """

    def __init__(self, kind: str = "theory", alpha: float = 3.0, delta: float = 0.1,
                 scale: Optional[float] = None, floor: float = 0.0):
        if kind not in ("power", "theory"):
            raise ValueError(f"unknown eps schedule {kind!r}")
        if kind == "power" and not alpha > 0:
            raise ValueError("alpha must be positive")
        if kind == "theory" and not delta > 0:
            raise ValueError("delta must be positive")
        if scale is not None and not scale > 0:
            raise ValueError("scale must be positive")
        if floor < 0:
            raise ValueError("floor must be nonnegative")
        self.kind = kind
        self.alpha = float(alpha)
        self.delta = float(delta)
        self.scale = None if scale is None else float(scale)
        self.floor = float(floor)

    @property
    def exponent(self) -> float:
        return self.alpha if self.kind == "power" else 4.0 + self.delta

    def calibrate(self, gap0: float) -> None:
        if self.scale is None:
            # a zero initial gap still needs a positive tolerance
            self.scale = float(gap0) if gap0 > 0 else 1e-12

    def __call__(self, n: int) -> float:
        if self.scale is None:
            raise RuntimeError("eps schedule has no scale; call calibrate(gap0) first")
        return self.scale * max(float(n) ** (-self.exponent), self.floor)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "alpha": self.alpha, "delta": self.delta, "scale": self.scale, "floor": self.floor}


@dataclass
class AppaState:
    """State of the outer loop after ``n`` iterations."""

    n: int
    gamma: float
    y: np.ndarray
    y_prev: np.ndarray
    y_bar: np.ndarray
    x_active: ActiveSet
    t: float
    u: np.ndarray
    A_n: float = 0.0
    B_n: float = 0.0
    T_n: float = 0.0
    x_erg_num: Optional[np.ndarray] = None
    y_erg_num: Optional[np.ndarray] = None
    stats: FwStats = field(default_factory=FwStats)
    initial_atoms: int = 1
    last: Optional[dict] = None
    history: Optional[dict] = None

    @property
    def x(self) -> np.ndarray:
        return self.x_active.point


class _UncountedLmo(Lmo):
    """View of an lmo whose calls are not charged to its counter."""

    def __init__(self, lmo: Lmo):
        self.inner = lmo
        self.dim = lmo.dim
        self.diameter = lmo.diameter
        self.calls = 0

    def _argmin(self, a):
        return self.inner.minimize(a, count=False)


def _initial_atom(prob: SaddleProblem, count: bool = True):
    return prob.lmo.minimize(np.zeros(prob.primal_dim), count=count)


def appa_init(prob: SaddleProblem, gamma: float, eps: EpsSchedule, keep_history: bool = False) -> AppaState:
    """Initial state: ``y_0`` is the origin projected onto dom h*, ``x_0 = lmo(0)``.

    Also calibrates ``eps`` with the Frank-Wolfe gap of ``F_{gamma, y_0}``
    at ``x_0`` when its scale is unset.
    """
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    stats = FwStats()
    y0 = prob.h_star.domain_projection(np.zeros(prob.dual_dim))
    x0 = ActiveSet.single(_initial_atom(prob))
    stats.lmo_calls += 1
    sp = SmoothedPrimal(gamma, y0, prob.K, prob.f, prob.h_star)
    gap0, _ = fw_gap(x0, as_smooth_objective(sp), prob.lmo)
    stats.lmo_calls += 1
    eps.calibrate(gap0)
    state = AppaState(
        n=0,
        gamma=float(gamma),
        y=y0.copy(),
        y_prev=y0.copy(),
        y_bar=y0.copy(),
        x_active=x0,
        t=1.0,
        u=y0.copy(),
        x_erg_num=np.zeros(prob.primal_dim),
        y_erg_num=np.zeros(prob.dual_dim),
        stats=stats,
        initial_atoms=len(x0),
    )
    state.gap0 = gap0
    if keep_history:
        state.history = {"t": [], "eps": [], "y": [y0.copy()], "x": [], "u": [], "y_bar": [y0.copy()]}
    return state


def appa_iterate(state: AppaState, prob: SaddleProblem, ts: TSchedule, es: EpsSchedule,
                 max_steps: Optional[int] = None) -> AppaState:
    """One outer iteration, updating ``state`` in place (and returning it)."""
    gamma = state.gamma
    n = state.n + 1
    t_n = 1.0 if n == 1 else ts.next(n - 1, state.t)
    eps = es(n)
    y_bar = state.y_bar
    sp = SmoothedPrimal(gamma, y_bar, prob.K, prob.f, prob.h_star)
    obj = as_smooth_objective(sp)
    res: FwResult = fw_until(state.x_active, obj, prob.lmo, eps, state.stats, max_steps=max_steps, warm_start=True)
    x_n = res.active.point
    y_n = sp.dual_point(x_n)
    y_old = state.y
    t_next_ = ts.next(n, t_n)

    state.u = y_old + t_n * (y_n - y_old)
    state.A_n += t_n * math.sqrt(2.0 * gamma * eps)
    state.B_n += gamma * t_n * t_n * eps
    state.T_n += t_n
    state.x_erg_num = state.x_erg_num + t_n * x_n
    if n >= 2:
        state.y_erg_num = state.y_erg_num + TSchedule.rho(state.t, t_n) * y_old
    state.y_prev = y_old
    state.y = y_n
    state.y_bar = y_n + ((t_n - 1.0) / t_next_) * (y_n - y_old)
    state.x_active = res.active
    state.t = t_n
    state.n = n
    state.last = {
        "eps": eps,
        "gap": res.gap,
        "capped": res.capped,
        "steps": res.steps,
        "F": obj.value(x_n),
        "y_bar_used": y_bar,
    }
    if state.history is not None:
        h = state.history
        h["t"].append(t_n)
        h["eps"].append(eps)
        h["y"].append(y_n.copy())
        h["x"].append(x_n.copy())
        h["u"].append(state.u.copy())
        h["y_bar"].append(state.y_bar.copy())
    return state


def ergodic_primal(state: AppaState) -> np.ndarray:
    """``sum_k t_k x_k / T_n``."""
    if state.n < 1:
        raise ValueError("no iterations yet")
    return state.x_erg_num / state.T_n


def ergodic_dual(state: AppaState) -> np.ndarray:
    """``(t_n^2 y_n + sum_{k=2}^n rho_k y_{k-1}) / T_n``."""
    if state.n < 1:
        raise ValueError("no iterations yet")
    return (state.t**2 * state.y + state.y_erg_num) / state.T_n


def eval_dual(prob: SaddleProblem, y, tol_H: float = 1e-9):
    """Dual function ``H(y) = min_{x in P} L(x, y)``.

    Returns ``(H, exact)``. For linear ``f`` a single (uncounted) lmo call
    gives the exact value; otherwise Frank-Wolfe is run to accuracy
    ``tol_H`` and the certified lower bound ``value - gap`` is returned.
    """
    y = np.asarray(y, dtype=float)
    hy = prob.h_star.value(y)
    if not np.isfinite(hy):
        raise ValueError("h*(y) is infinite; project y onto dom h* before evaluating the dual")
    Ky = prob.K.adjoint(y)
    if prob.f.kind == "linear":
        a = prob.f.c + Ky
        s = prob.lmo.minimize(a, count=False)
        return float(a @ s.point) + prob.f.const - hy, True
    lmo = _UncountedLmo(prob.lmo)

    def value(x):
        return prob.f.value(x) + float(Ky @ x)

    def grad(x):
        return prob.f.gradient(x) + Ky

    hess = prob.f.hessian_apply if prob.f.kind == "quadratic" else None
    obj = SmoothObjective(value, grad, prob.f.lipschitz, hess)
    x0 = ActiveSet.single(lmo.minimize(grad(np.zeros(prob.primal_dim))))
    res = fw_until(x0, obj, lmo, tol_H, FwStats(), warm_start=True)
    return value(res.active.point) - res.gap - hy, False


def primal_value(prob: SaddleProblem, x) -> float:
    """``max_y L(x, y) = f(x) + h**(Kx)``; may be ``inf``."""
    return prob.f.value(x) + prob.h_star.conjugate(prob.K.apply(x))


def infeasibility(prob: SaddleProblem, x) -> float:
    """``||A x - b||`` for equality-constrained problems."""
    if not prob.is_axb:
        raise ValueError("infeasibility needs a problem in the form min f_P(x) s.t. Ax = b")
    return float(np.linalg.norm(prob.A @ np.asarray(x, dtype=float) - prob.b))


def smoothed_certificate(state: AppaState, prob: SaddleProblem) -> float:
    """``F_{gamma, y_bar}(x_n) - H_{gamma, y_bar}(y_n) - eps_n`` for the last iteration.

    ``H_{gamma, y_bar}(y) = H(y) - ||y - y_bar||^2 / (2 gamma)``; the result
    is ``<= 0`` (up to the accuracy of ``H``) when the inner solve is sound.
    """
    last = state.last
    if last is None:
        raise ValueError("no iterations yet")
    H, _ = eval_dual(prob, state.y)
    r = state.y - last["y_bar_used"]
    return last["F"] - (H - float(r @ r) / (2.0 * state.gamma)) - last["eps"]


def appa_solve(
    prob: SaddleProblem,
    gamma: float,
    ts: TSchedule,
    es: EpsSchedule,
    max_iters: int,
    max_lmo_calls: Optional[int] = None,
    callback: Optional[Callable[[AppaState], None]] = None,
    keep_history: bool = False,
) -> AppaState:
    """Run outer iterations until ``max_iters`` or the lmo budget is spent."""
    state = appa_init(prob, gamma, es, keep_history=keep_history)
    for _ in range(max_iters):
        if max_lmo_calls is not None and state.stats.lmo_calls >= max_lmo_calls:
            break
        appa_iterate(state, prob, ts, es)
        if callback is not None:
            callback(state)
    return state
