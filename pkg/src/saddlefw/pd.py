"""Inexact primal-dual (Chambolle-Pock type) method with a Frank-Wolfe primal prox.

    y_{n+1} = prox_{sigma h*}(y_n + sigma K (2 x_n - x_{n-1}))
    x_{n+1} ~ argmin_{x in P} f(x) + ||x - (x_n - tau K* y_{n+1})||^2 / (2 tau)

The primal subproblem is strongly convex and is solved by :func:`fw_until`
to accuracy ``eps_{n+1} = scale * (n + 1)**(-(2 + delta))``, warm-started
from the atoms of ``x_n``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .appa import eval_dual
from .core import SaddleProblem
from .frankwolfe import ActiveSet, FwStats, SmoothObjective, fw_gap, fw_until

__all__ = ["PdConfig", "PdState", "pd_init", "pd_iterate", "pd_gap", "pd_certificate_bound", "pd_solve"]

STEP_MARGIN = 1e-6


@dataclass
class PdConfig:
    """Step sizes and inner-accuracy schedule.

    ``tau`` and ``sigma`` default to ``0.99 / L_K``; :meth:`validate`
    enforces ``sigma * tau * L_K**2 <= 1 - 1e-6``.
    """

    tau: Optional[float] = None
    sigma: Optional[float] = None
    delta: float = 0.1
    scale: Optional[float] = None
    floor: float = 0.0

    def validate(self, norm_bound: float) -> "PdConfig":
        L = float(norm_bound)
        default = 0.99 / L if L > 0 else 1.0
        tau = default if self.tau is None else float(self.tau)
        sigma = default if self.sigma is None else float(self.sigma)
        if not (tau > 0 and sigma > 0):
            raise ValueError("tau and sigma must be positive")
        if sigma * tau * L * L > 1.0 - STEP_MARGIN:
            raise ValueError(
                f"step sizes violate sigma*tau*L_K^2 < 1 with margin {STEP_MARGIN}: "
                f"got {sigma * tau * L * L:.9g} (L_K={L:.6g})"
            )
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.scale is not None and not self.scale > 0:
            raise ValueError("scale must be positive")
        return PdConfig(tau, sigma, self.delta, self.scale, self.floor)

    def eps(self, n: int) -> float:
        return self.scale * max(float(n) ** (-(2.0 + self.delta)), self.floor)


@dataclass
class PdState:
    n: int
    x_active: ActiveSet
    x_prev: np.ndarray
    y: np.ndarray
    x0: np.ndarray
    y0: np.ndarray
    x_sum: np.ndarray
    y_sum: np.ndarray
    A_n: float = 0.0
    B_n: float = 0.0
    stats: FwStats = field(default_factory=FwStats)
    initial_atoms: int = 1
    last: Optional[dict] = None

    @property
    def x(self) -> np.ndarray:
        return self.x_active.point

    @property
    def x_erg(self) -> np.ndarray:
        return self.x_sum / max(self.n, 1)

    @property
    def y_erg(self) -> np.ndarray:
        return self.y_sum / max(self.n, 1)


def _prox_objective(prob: SaddleProblem, z, tau) -> SmoothObjective:
    f = prob.f

    def value(x):
        r = x - z
        return f.value(x) + float(r @ r) / (2.0 * tau)

    def grad(x):
        return f.gradient(x) + (x - z) / tau

    def hess(d):
        return f.hessian_apply(d) + d / tau

    exact_curvature = f.kind in ("linear", "quadratic")
    return SmoothObjective(value, grad, f.lipschitz + 1.0 / tau, hess if exact_curvature else None)


def pd_init(prob: SaddleProblem, cfg: PdConfig):
    """``x_0 = lmo(0)``, ``y_0`` the origin projected onto dom h*, ``x_{-1} = x_0``."""
    cfg = cfg.validate(prob.K.norm_bound)
    stats = FwStats()
    x0 = ActiveSet.single(prob.lmo.minimize(np.zeros(prob.primal_dim)))
    stats.lmo_calls += 1
    y0 = prob.h_star.domain_projection(np.zeros(prob.dual_dim))
    state = PdState(
        n=0,
        x_active=x0,
        x_prev=x0.point.copy(),
        y=y0.copy(),
        x0=x0.point.copy(),
        y0=y0.copy(),
        x_sum=np.zeros(prob.primal_dim),
        y_sum=np.zeros(prob.dual_dim),
        stats=stats,
    )
    return state, cfg


def pd_iterate(state: PdState, prob: SaddleProblem, cfg: PdConfig) -> PdState:
    """One primal-dual step, in place. ``cfg`` must already be validated."""
    tau, sigma = cfg.tau, cfg.sigma
    x_n = state.x
    x_bar = 2.0 * x_n - state.x_prev
    y_new = prob.h_star.prox(sigma, state.y + sigma * prob.K.apply(x_bar))
    z = x_n - tau * prob.K.adjoint(y_new)
    obj = _prox_objective(prob, z, tau)
    if cfg.scale is None:
        # calibrate on the first inner problem
        gap0, _ = fw_gap(state.x_active, obj, prob.lmo)
        state.stats.lmo_calls += 1
        cfg.scale = gap0 if gap0 > 0 else 1e-12
    n1 = state.n + 1
    eps = cfg.eps(n1)
    res = fw_until(state.x_active, obj, prob.lmo, eps, state.stats, warm_start=True)
    state.x_prev = x_n.copy()
    state.x_active = res.active
    state.y = y_new
    state.n = n1
    state.x_sum = state.x_sum + res.active.point
    state.y_sum = state.y_sum + y_new
    state.A_n += math.sqrt(2.0 * tau * eps)
    state.B_n += tau * eps
    state.last = {"eps": eps, "gap": res.gap, "capped": res.capped, "steps": res.steps}
    return state


def pd_gap(prob: SaddleProblem, x, y, pair=None) -> float:
    """Primal-dual gap ``F(x) - H(y)``, or the gap restricted to a comparison pair.

    ``F(x) = f(x) + (h*)*(Kx)`` needs a closed-form conjugate of ``h*``
    and ``H`` is exact for linear ``f``. When either is unavailable (or
    infinite) the restricted gap ``L(x, y_hat) - L(x_hat, y)`` for
    ``pair = (x_hat, y_hat)`` is returned instead.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if pair is not None:
        x_hat, y_hat = pair
        return prob.lagrangian(x, y_hat) - prob.lagrangian(x_hat, y)
    try:
        F = prob.f.value(x) + prob.h_star.conjugate(prob.K.apply(x))
    except NotImplementedError:
        F = np.inf
    H, exact = eval_dual(prob, y)
    if not np.isfinite(F):
        raise ValueError(
            "max_y L(x, y) is not computable for this problem; pass a comparison pair (x_hat, y_hat)"
        )
    return F - H


def pd_certificate_bound(state: PdState, cfg: PdConfig, diameter: float, x, y) -> float:
    """Right side of the ergodic bound for the comparison point ``(x, y)``.

    ``(1/n) (||x - x0||^2 / (2 tau) + ||y - y0||^2 / (2 sigma)
    + diameter / tau * A_n + B_n / tau)``.
    """
    n = state.n
    if n < 1:
        raise ValueError("no iterations yet")
    dx = np.asarray(x) - state.x0
    dy = np.asarray(y) - state.y0
    tau, sigma = cfg.tau, cfg.sigma
    total = float(dx @ dx) / (2 * tau) + float(dy @ dy) / (2 * sigma)
    total += diameter / tau * state.A_n + state.B_n / tau
    return total / n


def pd_solve(
    prob: SaddleProblem,
    cfg: PdConfig,
    max_iters: int,
    max_lmo_calls: Optional[int] = None,
    callback: Optional[Callable[[PdState], None]] = None,
):
    """Run until ``max_iters`` or the lmo budget. Returns ``(state, cfg)``."""
    state, cfg = pd_init(prob, cfg)
    for _ in range(max_iters):
        if max_lmo_calls is not None and state.stats.lmo_calls >= max_lmo_calls:
            break
        pd_iterate(state, prob, cfg)
        if callback is not None:
            callback(state, cfg)
    return state, cfg
