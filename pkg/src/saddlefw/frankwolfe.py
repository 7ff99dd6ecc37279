"""Certified Frank-Wolfe inner solver.

The iterate is an :class:`ActiveSet`, an explicit convex combination of
polytope vertices. :func:`fw_step` performs one blended step (a Frank-Wolfe
step followed by re-optimization of the weights over the current atoms) or
one away-step Frank-Wolfe step. :func:`fw_until` repeats steps until the
Frank-Wolfe gap, which upper-bounds primal suboptimality, drops below a
target accuracy.

Every step is classified as *good* or *bad*, and the counts are kept in
:class:`FwStats`. A bad step is one that makes the iterate sparser: it
drops atoms (a weight reaches zero, or a full unit step collapses the
active set) and ends with fewer atoms than it started with. A good step
adds at most one atom, so over any run ``N_bad <= N_good + atoms(x0) - 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import Atom, Lmo

__all__ = [
    "FwStats",
    "SmoothObjective",
    "ActiveSet",
    "FwResult",
    "fw_gap",
    "fw_step",
    "away_step_direction",
    "fw_until",
    "project_simplex",
    "simplex_reopt",
    "good_step_bound",
]

DROP_TOL = 1e-12
MAX_ATOMS = 500


@dataclass
class FwStats:
    """Counters accumulated over a solver run (all nondecreasing)."""

    good_steps: int = 0
    bad_steps: int = 0
    lmo_calls: int = 0
    fallback_steps: int = 0
    capped_runs: int = 0
    truncated_reopts: int = 0
    last_step_good: Optional[bool] = None

    def as_dict(self) -> dict:
        return {
            "good_steps": self.good_steps,
            "bad_steps": self.bad_steps,
            "lmo_calls": self.lmo_calls,
            "fallback_steps": self.fallback_steps,
            "capped_runs": self.capped_runs,
            "truncated_reopts": self.truncated_reopts,
        }


class SmoothObjective:
    """Smooth convex function minimized over the polytope.

    When ``hessian_apply`` is given the function is treated as quadratic
    (plus linear): line searches become exact and the simplex
    re-optimization assembles the restricted Gram matrix directly.
    """

    def __init__(
        self,
        value: Callable,
        gradient: Callable,
        lipschitz: float,
        hessian_apply: Optional[Callable] = None,
    ):
        self.value = value
        self.gradient = gradient
        self.lipschitz = float(lipschitz)
        self.hessian_apply = hessian_apply

    @property
    def quadratic(self) -> bool:
        return self.hessian_apply is not None

    def curvature_along(self, x, d) -> Optional[float]:
        """Second derivative of ``s -> value(x + s d)`` (quadratics only)."""
        if self.hessian_apply is None:
            return None
        return float(np.dot(d, self.hessian_apply(d)))

    @classmethod
    def from_part(cls, part) -> "SmoothObjective":
        hess = part.hessian_apply if part.kind in ("linear", "quadratic") else None
        return cls(part.value, part.gradient, part.lipschitz, hess)


class ActiveSet:
    """Convex combination ``sum_i w_i a_i`` of distinct atoms.

    The cached :attr:`point` is recomputed after every mutation.
    """

    def __init__(self, atoms, weights):
        atoms = list(atoms)
        w = np.asarray(weights, dtype=float)
        if len(atoms) == 0 or len(atoms) != w.size:
            raise ValueError("need one weight per atom and at least one atom")
        if w.min() < 0:
            raise ValueError("weights must be nonnegative")
        ids = [a.id for a in atoms]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate atom ids in active set")
        self.atoms = atoms
        self.weights = w / w.sum()
        self._index = {a.id: i for i, a in enumerate(atoms)}
        self._refresh()

    @classmethod
    def single(cls, atom: Atom) -> "ActiveSet":
        return cls([atom], [1.0])

    def copy(self) -> "ActiveSet":
        new = ActiveSet.__new__(ActiveSet)
        new.atoms = list(self.atoms)
        new.weights = self.weights.copy()
        new._index = dict(self._index)
        new._V = self._V
        new.point = self.point.copy()
        return new

    def __len__(self):
        return len(self.atoms)

    def __contains__(self, atom_id):
        return atom_id in self._index

    def index_of(self, atom_id) -> int:
        return self._index[atom_id]

    def matrix(self) -> np.ndarray:
        """Atoms as columns, shape ``(dim, m)``."""
        return self._V

    def _refresh(self):
        self._V = np.column_stack([a.point for a in self.atoms])
        self.point = self._V @ self.weights

    def _append(self, atom: Atom, weight: float):
        self.atoms.append(atom)
        self.weights = np.append(self.weights, weight)
        self._index[atom.id] = len(self.atoms) - 1
        self._V = np.column_stack([self._V, atom.point])

    def set_weights(self, w, drop_tol: float = DROP_TOL) -> int:
        """Install new weights, prune atoms below ``drop_tol``.

        Returns the number of atoms removed.
        """
        w = np.clip(np.asarray(w, dtype=float), 0.0, None)
        keep = w >= drop_tol
        if not keep.any():
            keep[np.argmax(w)] = True
        dropped = int((~keep).sum())
        if dropped:
            self.atoms = [a for a, k in zip(self.atoms, keep) if k]
            self._index = {a.id: i for i, a in enumerate(self.atoms)}
            self._V = self._V[:, keep]
            w = w[keep]
        self.weights = w / w.sum()
        self.point = self._V @ self.weights
        return dropped

    def check(self, tol: float = 1e-10) -> None:
        """Assert the representation invariants."""
        assert self.weights.min() >= 0
        assert abs(self.weights.sum() - 1.0) <= 1e-12
        assert len(self._index) == len(self.atoms)
        ref = sum(w * a.point for w, a in zip(self.weights, self.atoms))
        assert np.linalg.norm(ref - self.point) <= tol * (1.0 + np.linalg.norm(ref))


@dataclass
class FwResult:
    """Outcome of :func:`fw_until`."""

    active: ActiveSet
    gap: float
    steps: int
    good_steps: int
    capped: bool


def fw_gap(x: ActiveSet, obj: SmoothObjective, lmo: Lmo, count: bool = True):
    """Frank-Wolfe gap ``<grad(x), x - s>`` with ``s = lmo(grad(x))``.

    Returns ``(gap, s)``; the gap is clamped at zero against rounding.
    """
    g = obj.gradient(x.point)
    s = lmo.minimize(g, count=count)
    gap = float(np.dot(g, x.point - s.point))
    return max(gap, 0.0), s


def away_step_direction(x: ActiveSet, grad):
    """Active atom maximizing ``<grad, a>`` and its away gap ``<grad, a - x>``.

    Ties go to the smallest atom id.
    """
    scores = x.matrix().T @ grad
    best = scores.max()
    idx = [i for i in np.flatnonzero(scores == best)]
    i = min(idx, key=lambda j: x.atoms[j].id) if len(idx) > 1 else int(idx[0])
    gap = float(scores[i] - np.dot(grad, x.point))
    return x.atoms[i], max(gap, 0.0)


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto the unit simplex (sort and threshold)."""
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        raise ValueError("cannot project an empty vector onto the simplex")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.flatnonzero(u - css / k > 0)[-1]
    theta = css[rho] / (rho + 1.0)
    w = np.maximum(v - theta, 0.0)
    return w / w.sum()


def _restricted_gap(grad_w, w) -> float:
    return float(np.dot(grad_w, w) - grad_w.min())


class _RestrictedQuadratic:
    """``phi(w) = obj(V w)`` for quadratic ``obj``, relative to weights ``w0``.

    ``phi(w) - phi(w0) = <r, w - w0> + 1/2 (w - w0)' G (w - w0)``.
    """

    def __init__(self, active: ActiveSet, obj: SmoothObjective, cache: Optional[dict]):
        V = active.matrix()
        cols = []
        for a in active.atoms:
            hv = None if cache is None else cache.get(a.id)
            if hv is None:
                hv = obj.hessian_apply(a.point)
                if cache is not None:
                    cache[a.id] = hv
            cols.append(hv)
        HV = np.column_stack(cols)
        G = V.T @ HV
        self.G = 0.5 * (G + G.T)
        self.w0 = active.weights.copy()
        self.r = V.T @ obj.gradient(active.point)
        self.p = self.r - self.G @ self.w0

    def grad(self, w):
        return self.G @ w + self.p

    def delta(self, w):
        dw = w - self.w0
        return float(self.r @ dw + 0.5 * dw @ (self.G @ dw))


class _RestrictedGeneral:
    def __init__(self, active: ActiveSet, obj: SmoothObjective):
        self.V = active.matrix()
        self.obj = obj
        self.w0 = active.weights.copy()
        self.f0 = obj.value(active.point)

    def grad(self, w):
        return self.V.T @ self.obj.gradient(self.V @ w)

    def delta(self, w):
        return self.obj.value(self.V @ w) - self.f0


def _apg_simplex(phi, w0, lip, tol, max_iter):
    """Accelerated projected gradient on the simplex with function restart."""
    w = w0.copy()
    best_w, best_val = w.copy(), phi.delta(w)
    z = w.copy()
    t = 1.0
    step = 1.0 / lip
    val = best_val
    for _ in range(max_iter):
        g = phi.grad(z)
        w_new = project_simplex(z - step * g)
        val_new = phi.delta(w_new)
        if val_new > val:
            # restart momentum from the last accepted point
            z = w.copy()
            t = 1.0
            continue
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        z = w_new + ((t - 1.0) / t_new) * (w_new - w)
        w, val, t = w_new, val_new, t_new
        if val < best_val:
            best_w, best_val = w.copy(), val
        if _restricted_gap(phi.grad(w), w) <= tol:
            break
    return best_w, best_val


def _active_set_polish(phi: _RestrictedQuadratic, w_start, tol, max_iter=None):
    """Primal active-set method for the restricted QP, started at ``w_start``.

    Keeps a working set of free coordinates, solves the KKT system on it,
    moves toward that solution with a ratio test, and frees the inactive
    coordinate with the most negative reduced gradient once the face is
    optimal. Accepted iterates never increase ``phi``.
    """
    m = w_start.size
    w = w_start.copy()
    val = phi.delta(w)
    work = w > 0
    scale = 1.0 + np.abs(phi.p).max()
    for _ in range(max_iter or 3 * m + 10):
        idx = np.flatnonzero(work)
        k = idx.size
        KKT = np.zeros((k + 1, k + 1))
        KKT[:k, :k] = phi.G[np.ix_(idx, idx)]
        KKT[:k, k] = 1.0
        KKT[k, :k] = 1.0
        rhs = np.concatenate([-phi.p[idx], [1.0]])
        sol = np.linalg.lstsq(KKT, rhs, rcond=None)[0]
        if np.abs(KKT @ sol - rhs).max() > 1e-9 * scale:
            break
        target = np.zeros(m)
        target[idx] = sol[:k]
        if target[idx].min() >= 0.0:
            cand_val = phi.delta(target)
            if cand_val > val + 1e-15 * scale:
                break
            w, val = target, cand_val
            g = phi.grad(w)
            if _restricted_gap(g, w) <= tol:
                break
            red = g + (-sol[k])
            red[work] = np.inf
            j = int(np.argmin(red))
            if not np.isfinite(red[j]) or red[j] >= -1e-15 * scale:
                break
            work[j] = True
        else:
            d = target - w
            blocking = work & (d < 0)
            ratios = np.full(m, np.inf)
            ratios[blocking] = w[blocking] / -d[blocking]
            i_block = int(np.argmin(ratios))
            alpha = min(1.0, float(ratios[i_block]))
            cand = w + alpha * d
            cand[i_block] = 0.0
            cand = np.clip(cand, 0.0, None)
            cand /= cand.sum()
            cand_val = phi.delta(cand)
            if cand_val > val + 1e-15 * scale:
                break
            w, val = cand, cand_val
            work[i_block] = False
            work &= (w > 0) | (d >= 0)
    return w, val


def simplex_reopt(
    active: ActiveSet,
    obj: SmoothObjective,
    tol: float,
    max_atoms: int = MAX_ATOMS,
    cache: Optional[dict] = None,
    stats: Optional[FwStats] = None,
    max_iter: int = 300,
) -> np.ndarray:
    """Re-optimize the weights of ``active`` over the unit simplex.

    Minimizes ``w -> obj(V w)`` by accelerated projected gradient with
    restart until the restricted Frank-Wolfe gap is at most ``tol``, then
    polishes quadratic problems with an active-set solve. The returned
    weights are never worse than the input weights.
    """
    m = len(active)
    if m == 1:
        return np.ones(1)
    w0 = active.weights.copy()
    if m > max_atoms:
        order = np.argsort(w0, kind="stable")
        w0[order[: m - max_atoms]] = 0.0
        w0 /= w0.sum()
        if stats is not None:
            stats.truncated_reopts += 1
    if obj.quadratic:
        phi = _RestrictedQuadratic(active, obj, cache)
        lip = float(np.linalg.eigvalsh(phi.G)[-1]) if m > 1 else 0.0
    else:
        phi = _RestrictedGeneral(active, obj)
        lip = obj.lipschitz * float(np.linalg.eigvalsh(phi.V.T @ phi.V)[-1])
    base = phi.delta(w0)
    if _restricted_gap(phi.grad(w0), w0) <= tol or lip <= 0:
        return w0
    allowed = w0 > 0
    if not allowed.all():
        # capped atoms stay out of the optimization
        w_sub = w0[allowed]
        sub = ActiveSet([a for a, k in zip(active.atoms, allowed) if k], w_sub)
        w_opt = simplex_reopt(sub, obj, tol, max_atoms, cache, stats, max_iter)
        out = np.zeros(m)
        out[allowed] = w_opt
        return out
    w, val = _apg_simplex(phi, w0, lip, tol, max_iter)
    if obj.quadratic and _restricted_gap(phi.grad(w), w) > tol:
        w, val = _active_set_polish(phi, w, tol)
    if val > base:
        return w0
    return w


def _line_search(obj, x, d, gap, gamma_max, k, stats):
    """Step length along ``d`` (with ``<grad, d> = -gap``), capped at ``gamma_max``."""
    curv = obj.curvature_along(x, d)
    if curv is not None:
        if curv <= 0:
            return gamma_max
        return min(gamma_max, gap / curv)
    dd = float(np.dot(d, d))
    gamma = gamma_max if obj.lipschitz * dd <= 0 else min(gamma_max, gap / (obj.lipschitz * dd))
    f0 = obj.value(x)
    if obj.value(x + gamma * d) > f0:
        stats.fallback_steps += 1
        gamma = min(gamma_max, 2.0 / (k + 2.0))
        if obj.value(x + gamma * d) > f0:
            gamma = 0.0
    return gamma


def fw_step(
    x: ActiveSet,
    obj: SmoothObjective,
    lmo: Lmo,
    stats: FwStats,
    k: int = 0,
    variant: str = "blended",
    reopt_tol: float = 0.0,
    gap_info=None,
    cache: Optional[dict] = None,
    drop_tol: float = DROP_TOL,
) -> ActiveSet:
    """One descent step; returns a new active set.

    ``gap_info`` may carry a precomputed ``(gap, s)`` for the current
    point (saves the lmo call). ``variant`` is ``"blended"`` (Frank-Wolfe
    step then weight re-optimization) or ``"away"`` (away-step Frank-Wolfe).
    """
    if gap_info is None:
        gap, s = fw_gap(x, obj, lmo)
        stats.lmo_calls += 1
    else:
        gap, s = gap_info
    f_old = obj.value(x.point)
    if gap <= 0.0:
        stats.last_step_good = None
        return x.copy()

    new = x.copy()
    if variant == "away":
        grad = obj.gradient(x.point)
        v, away_gap = away_step_direction(x, grad)
        if away_gap > gap and len(x) > 1:
            i = x.index_of(v.id)
            alpha = x.weights[i]
            gamma_max = alpha / (1.0 - alpha)
            d = x.point - v.point
            gamma = _line_search(obj, x.point, d, away_gap, gamma_max, k, stats)
            w = x.weights * (1.0 + gamma)
            w[i] -= gamma
            if gamma >= gamma_max:
                w[i] = 0.0
            new.set_weights(w, drop_tol)
        else:
            d = s.point - x.point
            gamma = _line_search(obj, x.point, d, gap, 1.0, k, stats)
            _move_towards(new, s, gamma, drop_tol)
    elif variant == "blended":
        d = s.point - x.point
        gamma = _line_search(obj, x.point, d, gap, 1.0, k, stats)
        _move_towards(new, s, gamma, drop_tol)
        if len(new) > 1:
            w = simplex_reopt(new, obj, reopt_tol, cache=cache, stats=stats)
            new.set_weights(w, drop_tol)
    else:
        raise ValueError(f"unknown Frank-Wolfe variant {variant!r}")

    f_new = obj.value(new.point)
    if f_new > f_old + 1e-13 * (1.0 + abs(f_old)):
        # rounding made things worse: keep the old iterate
        stats.last_step_good = None
        return x.copy()
    good = len(new) >= len(x)
    stats.last_step_good = good
    if good:
        stats.good_steps += 1
    else:
        stats.bad_steps += 1
    return new


def _move_towards(active: ActiveSet, s: Atom, gamma: float, drop_tol: float) -> int:
    """``x <- (1 - gamma) x + gamma s`` on the weights; returns atoms dropped."""
    if gamma <= 0.0:
        return 0
    if gamma >= 1.0:
        n_old = len(active) - (1 if s.id in active else 0)
        active.atoms = [s]
        active._index = {s.id: 0}
        active._V = s.point[:, None].copy()
        active.weights = np.ones(1)
        active.point = s.point.copy()
        return n_old
    w = active.weights * (1.0 - gamma)
    if s.id in active:
        w[active.index_of(s.id)] += gamma
    else:
        active._append(s, 0.0)
        w = np.append(w, gamma)
    return active.set_weights(w, drop_tol)


def good_step_bound(g0: float, lipschitz: float, diameter: float, eps: float, theta: float) -> float:
    """Upper bound on good steps of ``fw_until`` for a per-step contraction ``theta``."""
    if g0 <= 0 or lipschitz <= 0 or diameter <= 0:
        return 0.0
    floor = min(0.5 * lipschitz * diameter**2, (eps / diameter) ** 2 / (2.0 * lipschitz))
    ratio = g0 / floor
    if ratio <= 1.0:
        return 0.0
    return math.log(ratio) / math.log(1.0 / theta)


def fw_until(
    x0: ActiveSet,
    obj: SmoothObjective,
    lmo: Lmo,
    eps: float,
    stats: FwStats,
    max_steps: Optional[int] = None,
    variant: str = "blended",
    warm_start: bool = False,
    reopt_tol: Optional[float] = None,
) -> FwResult:
    """Run Frank-Wolfe steps until the gap is at most ``eps``.

    The loop takes a step and then tests the gap. With ``warm_start`` the
    gap is also tested once before the first step, so an already converged
    starting point costs a single lmo call. The default step cap is ten
    times the good-step bound with contraction 0.99; hitting it returns the
    last iterate with ``capped=True``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = x0
    if reopt_tol is None:
        reopt_tol = 0.1 * eps
    info = None
    if warm_start or max_steps is None:
        info = fw_gap(x, obj, lmo)
        stats.lmo_calls += 1
        if warm_start and info[0] <= eps:
            return FwResult(x, info[0], 0, 0, False)
    if max_steps is None:
        bound = good_step_bound(info[0], obj.lipschitz, lmo.diameter, eps, 0.99)
        max_steps = max(100, int(math.ceil(10 * bound)))
    cache: dict = {} if obj.quadratic else None
    good_before = stats.good_steps
    gap = info[0] if info is not None else np.inf
    for k in range(max_steps):
        x = fw_step(x, obj, lmo, stats, k=k, variant=variant, reopt_tol=reopt_tol, gap_info=info, cache=cache)
        info = fw_gap(x, obj, lmo)
        stats.lmo_calls += 1
        gap = info[0]
        if gap <= eps:
            return FwResult(x, gap, k + 1, stats.good_steps - good_before, False)
    stats.capped_runs += 1
    return FwResult(x, gap, max_steps, stats.good_steps - good_before, True)
