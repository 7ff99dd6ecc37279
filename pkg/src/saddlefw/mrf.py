"""Grid MRF energies and their row/column chain decomposition.

The grid energy ``E(X) = sum_i theta_i(X_i) + sum_ij theta_ij(X_i, X_j)`` on a
4-connected ``height x width`` grid is split into ``height`` row chains and
``width`` column chains. Every node lies in exactly one row and one column
chain and receives half of its unary cost in each; every edge belongs to
exactly one chain.

Primal layout (length ``2 H W L + H + W``)::

    [ row indicators | column indicators | chain costs ]

Row indicators are indexed ``(r, c, l)`` in row-major order, column
indicators ``(c, r, l)``. Chain costs are ordered rows first, then columns.
The dual ``y`` has the same layout as the indicator part, and ``K`` simply
selects the indicator coordinates.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import List

import numpy as np

from .core import Atom, LinearMap, LinearPart, Lmo, ProxFunction, SaddleProblem

__all__ = [
    "Pairwise",
    "GridMrf",
    "ChainSubproblem",
    "ChainAtom",
    "decompose_grid",
    "chain_lmo",
    "chain_energy",
    "MrfLayout",
    "ChainProductLmo",
    "DualZeroSum",
    "project_dual_feasible",
    "build_saddle",
    "decode_primal",
    "decode_duals",
    "brute_force_map",
    "graph_cut_map",
]

PAIRWISE_KINDS = ("potts", "truncated_linear", "truncated_quadratic")


@dataclass(frozen=True)
class Pairwise:
    """One pairwise potential shared by all edges."""

    kind: str
    weight: float
    truncation: float = 0.0

    def __post_init__(self):
        if self.kind not in PAIRWISE_KINDS:
            raise ValueError(f"unknown pairwise kind {self.kind!r}; expected one of {PAIRWISE_KINDS}")
        if self.weight < 0 or self.truncation < 0:
            raise ValueError("pairwise weight and truncation must be nonnegative")

    def matrix(self, labels: int) -> np.ndarray:
        a = np.arange(labels)
        diff = np.abs(a[:, None] - a[None, :]).astype(float)
        if self.kind == "potts":
            return self.weight * (diff > 0)
        if self.kind == "truncated_linear":
            return self.weight * np.minimum(diff, self.truncation)
        return self.weight * np.minimum(diff**2, self.truncation)


@dataclass
class GridMrf:
    """Pairwise MRF on a 4-connected grid; ``unary`` has shape ``(H, W, L)``."""

    width: int
    height: int
    labels: int
    unary: np.ndarray
    pairwise: Pairwise

    def __post_init__(self):
        if self.width < 1 or self.height < 1 or self.labels < 1:
            raise ValueError("width, height and labels must be >= 1")
        u = np.asarray(self.unary, dtype=float)
        if u.size != self.width * self.height * self.labels:
            raise ValueError(
                f"unary has {u.size} entries, expected W*H*L = {self.width * self.height * self.labels}"
            )
        self.unary = u.reshape(self.height, self.width, self.labels)
        if not np.all(np.isfinite(self.unary)):
            raise ValueError("unary costs must be finite")
        self.theta = self.pairwise.matrix(self.labels)

    @property
    def n_nodes(self) -> int:
        return self.width * self.height

    def energy(self, labeling) -> float:
        X = np.asarray(labeling, dtype=int).reshape(self.height, self.width)
        r, c = np.indices(X.shape)
        e = self.unary[r, c, X].sum()
        e += self.theta[X[:, :-1], X[:, 1:]].sum()
        e += self.theta[X[:-1, :], X[1:, :]].sum()
        return float(e)

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "labels": self.labels,
            "unary": self.unary.reshape(-1).tolist(),
            "pairwise": {
                "kind": self.pairwise.kind,
                "weight": self.pairwise.weight,
                "truncation": self.pairwise.truncation,
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GridMrf":
        missing = {"width", "height", "labels", "unary", "pairwise"} - set(data)
        if missing:
            raise ValueError(f"MRF document lacks fields {sorted(missing)}")
        pw = data["pairwise"]
        return cls(
            int(data["width"]),
            int(data["height"]),
            int(data["labels"]),
            np.asarray(data["unary"], dtype=float),
            Pairwise(pw["kind"], float(pw["weight"]), float(pw.get("truncation", 0.0))),
        )


@dataclass
class ChainSubproblem:
    """A row or column chain: ordered grid nodes, unary share, edge potential."""

    nodes: List[tuple]
    unary_share: np.ndarray
    theta: np.ndarray
    orientation: str = "row"

    @property
    def length(self) -> int:
        return len(self.nodes)

    @property
    def labels(self) -> int:
        return self.unary_share.shape[1]


@dataclass(frozen=True)
class ChainAtom:
    labeling: tuple
    cost: float


def decompose_grid(mrf: GridMrf) -> List[ChainSubproblem]:
    """``height`` row chains followed by ``width`` column chains."""
    chains = []
    for r in range(mrf.height):
        chains.append(
            ChainSubproblem([(r, c) for c in range(mrf.width)], 0.5 * mrf.unary[r, :, :], mrf.theta, "row")
        )
    for c in range(mrf.width):
        chains.append(
            ChainSubproblem([(r, c) for r in range(mrf.height)], 0.5 * mrf.unary[:, c, :], mrf.theta, "col")
        )
    return chains


def chain_energy(chain: ChainSubproblem, labeling) -> float:
    lab = np.asarray(labeling, dtype=int)
    e = chain.unary_share[np.arange(chain.length), lab].sum()
    if chain.length > 1:
        e += chain.theta[lab[:-1], lab[1:]].sum()
    return float(e)


def _batched_min_sum(U: np.ndarray, theta: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Min-sum DP over a batch of equal-length chains.

    ``U`` has shape ``(B, n, L)``; chain ``b`` minimizes
    ``sum_i U[b, i, l_i] + scale[b] * sum_i theta[l_i, l_{i+1}]``.
    Ties go to the smallest label at every backtrack step.
    """
    B, n, L = U.shape
    M = U[:, 0, :].copy()
    back = np.zeros((B, n, L), dtype=np.int64)
    P = scale[:, None, None] * theta[None, :, :]
    for i in range(1, n):
        T = M[:, :, None] + P
        back[:, i, :] = np.argmin(T, axis=1)
        M = np.take_along_axis(T, back[:, i, None, :], axis=1)[:, 0, :] + U[:, i, :]
    lab = np.zeros((B, n), dtype=np.int64)
    lab[:, n - 1] = np.argmin(M, axis=1)
    rows = np.arange(B)
    for i in range(n - 1, 0, -1):
        lab[:, i - 1] = back[rows, i, lab[:, i]]
    return lab


def chain_lmo(chain: ChainSubproblem, duals) -> ChainAtom:
    """Labeling minimizing chain energy plus ``sum_pos duals[pos, label]``.

    The returned cost is the chain energy without the duals.
    """
    duals = np.asarray(duals, dtype=float)
    if duals.shape != chain.unary_share.shape:
        raise ValueError(f"duals have shape {duals.shape}, chain needs {chain.unary_share.shape}")
    U = (chain.unary_share + duals)[None]
    lab = _batched_min_sum(U, chain.theta, np.ones(1))[0]
    return ChainAtom(tuple(int(v) for v in lab), chain_energy(chain, lab))


class MrfLayout:
    """Index bookkeeping between grid nodes, chains and vector coordinates."""

    def __init__(self, mrf: GridMrf):
        self.mrf = mrf
        H, W, L = mrf.height, mrf.width, mrf.labels
        self.H, self.W, self.L = H, W, L
        self.n_rows, self.n_cols = H, W
        self.n_chains = H + W
        self.row_size = H * W * L
        self.dual_dim = 2 * H * W * L
        self.primal_dim = self.dual_dim + self.n_chains
        self.chains = decompose_grid(mrf)

    def split_dual(self, y):
        """Row block as ``(H, W, L)`` and column block as ``(W, H, L)`` views."""
        y = np.asarray(y)
        rows = y[: self.row_size].reshape(self.H, self.W, self.L)
        cols = y[self.row_size : self.dual_dim].reshape(self.W, self.H, self.L)
        return rows, cols

    def costs(self, x):
        return np.asarray(x)[self.dual_dim :]

    def atom_point(self, row_labels: np.ndarray, col_labels: np.ndarray, costs) -> np.ndarray:
        H, W = self.H, self.W
        x = np.zeros(self.primal_dim)
        rows, cols = self.split_dual(x[: self.dual_dim])
        r, c = np.indices((H, W))
        rows[r, c, row_labels] = 1.0
        cc, rr = np.indices((W, H))
        cols[cc, rr, col_labels] = 1.0
        x[self.dual_dim :] = costs
        return x

    def chain_blocks(self, x):
        """Per-chain ``(indicator matrix (n, L), cost)`` pairs."""
        rows, cols = self.split_dual(np.asarray(x)[: self.dual_dim])
        cost = self.costs(x)
        out = [(rows[r], cost[r]) for r in range(self.H)]
        out += [(cols[c], cost[self.H + c]) for c in range(self.W)]
        return out


class ChainProductLmo(Lmo):
    """Linear minimization over the product of chain polytopes.

    Each chain polytope is the convex hull of ``[indicator(X), E_t(X)]``.
    For a direction with indicator part ``a_ind`` and cost coefficient
    ``a_cost`` the chain minimizes ``a_cost * E_t(X) + <a_ind, indicator(X)>``
    by min-sum dynamic programming. Atom ids are the tuple of all chain
    labelings.
    """

    concurrent = False

    def __init__(self, layout: MrfLayout):
        self.layout = layout
        mrf = layout.mrf
        self._row_unary = 0.5 * mrf.unary  # (H, W, L)
        self._col_unary = 0.5 * np.transpose(mrf.unary, (1, 0, 2))  # (W, H, L)
        self.theta = mrf.theta
        # diameter of a product of chain polytopes: indicators differ in at
        # most 2 coordinates per node, costs by the chain energy range
        span = self._energy_spans()
        diam_sq = 2.0 * layout.dual_dim / layout.L + float(np.sum(span**2))
        super().__init__(layout.primal_dim, float(np.sqrt(diam_sq)))

    def _energy_spans(self) -> np.ndarray:
        spans = []
        for ch in self.layout.chains:
            lo = chain_lmo(ch, np.zeros_like(ch.unary_share)).cost
            U = -ch.unary_share[None]
            hi_lab = _batched_min_sum(U, self.theta, -np.ones(1))[0]
            hi = chain_energy(ch, hi_lab)
            spans.append(hi - lo)
        return np.asarray(spans)

    def _solve_block(self, unary, a_ind, a_cost):
        U = a_cost[:, None, None] * unary + a_ind
        lab = _batched_min_sum(U, self.theta, a_cost)
        B, n = lab.shape
        idx = np.arange(n)
        energy = unary[np.arange(B)[:, None], idx[None, :], lab].sum(1)
        if n > 1:
            energy = energy + self.theta[lab[:, :-1], lab[:, 1:]].sum(1)
        return lab, energy

    def _argmin(self, a):
        lay = self.layout
        rows_a, cols_a = lay.split_dual(a[: lay.dual_dim])
        cost_a = a[lay.dual_dim :]
        row_lab, row_e = self._solve_block(self._row_unary, rows_a, cost_a[: lay.H])
        col_lab, col_e = self._solve_block(self._col_unary, cols_a, cost_a[lay.H :])
        point = lay.atom_point(row_lab, col_lab, np.concatenate([row_e, col_e]))
        key = (tuple(map(tuple, row_lab.tolist())), tuple(map(tuple, col_lab.tolist())))
        aux = [ChainAtom(tuple(l), float(e)) for l, e in zip(row_lab.tolist(), row_e)]
        aux += [ChainAtom(tuple(l), float(e)) for l, e in zip(col_lab.tolist(), col_e)]
        return Atom(key, point, aux)

    def contains(self, x, tol=1e-9) -> bool:
        """Exact membership test for the product of chain polytopes.

        On a chain any node marginals with edge marginals consistent with
        them are realizable, so ``(mu, cost)`` lies in the chain polytope iff
        each node block is a distribution and the cost lies between the
        minimum and maximum expected energy over consistent edge marginals
        (small transportation LPs per edge).
        """
        from scipy.optimize import linprog

        L = self.layout.L
        for ch, (mu, cost) in zip(self.layout.chains, self.layout.chain_blocks(x)):
            if mu.min() < -tol or np.abs(mu.sum(1) - 1.0).max() > tol:
                return False
            mu = np.clip(mu, 0.0, None)
            mu = mu / mu.sum(1, keepdims=True)
            base = float((ch.unary_share * mu).sum())
            lo = hi = base
            A_eq = np.vstack([np.kron(np.eye(L), np.ones(L)), np.kron(np.ones(L), np.eye(L))])
            for i in range(ch.length - 1):
                b_eq = np.concatenate([mu[i], mu[i + 1]])
                th = ch.theta.reshape(-1)
                r1 = linprog(th, A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
                r2 = linprog(-th, A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
                lo += r1.fun
                hi -= r2.fun
            if cost < lo - tol * (1 + abs(lo)) or cost > hi + tol * (1 + abs(hi)):
                return False
        return True


def project_dual_feasible(y, layout: MrfLayout) -> np.ndarray:
    """Project onto ``{sum over chains containing v of Y_v = 0}`` per node and label.

    Each node lies in one row and one column chain, so the projection
    subtracts the per-(node, label) mean of the two entries. Writing the
    result as ``(r - c) / 2`` and its negative makes the map exactly
    idempotent in floating point.
    """
    y = np.array(y, dtype=float)
    rows, cols = layout.split_dual(y)
    half = 0.5 * (rows - np.transpose(cols, (1, 0, 2)))
    rows[...] = half
    cols[...] = -np.transpose(half, (1, 0, 2))
    return y


class DualZeroSum(ProxFunction):
    """Indicator of the zero-sum dual subspace of the chain decomposition."""

    affine = True

    def __init__(self, layout: MrfLayout, tol: float = 1e-10):
        self.layout = layout
        self.tol = tol

    def residual(self, y) -> float:
        rows, cols = self.layout.split_dual(y)
        return float(np.abs(rows + np.transpose(cols, (1, 0, 2))).max())

    def prox(self, tau, z):
        return project_dual_feasible(z, self.layout)

    def domain_projection(self, z):
        return project_dual_feasible(z, self.layout)

    def value(self, y):
        scale = 1.0 + float(np.abs(y).max()) if np.size(y) else 1.0
        return 0.0 if self.residual(y) <= self.tol * scale else np.inf

    def conjugate(self, v):
        # sup over the zero-sum subspace: finite iff v is orthogonal to it
        v = np.asarray(v, dtype=float)
        off = v - project_dual_feasible(v, self.layout)
        on = v - off
        return 0.0 if np.abs(on).max() <= 1e-9 * (1.0 + np.abs(v).max()) else np.inf


def build_saddle(mrf: GridMrf) -> SaddleProblem:
    """The Lagrangian relaxation of the grid MRF as a saddle problem.

    ``f`` sums the chain-cost coordinates, ``K`` selects the indicator
    coordinates (so ``||K|| = 1`` exactly), the lmo is the chain DP product
    and ``h*`` is the indicator of the zero-sum dual subspace.
    """
    lay = MrfLayout(mrf)
    nd, npr = lay.dual_dim, lay.primal_dim
    c = np.zeros(npr)
    c[nd:] = 1.0

    def apply(x):
        return x[:nd].copy()

    def adjoint(y):
        out = np.zeros(npr)
        out[:nd] = y
        return out

    K = LinearMap(apply, adjoint, (nd, npr), norm_bound=1.0)
    return SaddleProblem(
        K=K,
        f=LinearPart(c),
        lmo=ChainProductLmo(lay),
        h_star=DualZeroSum(lay),
        source=lay,
        name=f"grid_mrf_{mrf.height}x{mrf.width}x{mrf.labels}",
    )


def _decode_from_indicators(layout: MrfLayout, x):
    rows, cols = layout.split_dual(np.asarray(x)[: layout.dual_dim])
    mass = 0.5 * (rows + np.transpose(cols, (1, 0, 2)))
    # argmax returns the first maximum: smallest label on ties
    lab = np.argmax(mass, axis=2)
    return lab, layout.mrf.energy(lab)


def decode_primal(x, layout: MrfLayout):
    """Labeling from averaged node-label indicator mass, and its grid energy."""
    return _decode_from_indicators(layout, x)


def decode_duals(y, problem: SaddleProblem):
    """Decode the consensus of the chain minimizers at dual ``y`` (uncounted lmo)."""
    a = problem.f.gradient(np.zeros(problem.primal_dim)) + problem.K.adjoint(y)
    atom = problem.lmo.minimize(a, count=False)
    return _decode_from_indicators(problem.source, atom.point)


def _labelings(n_nodes: int, labels: int, limit: int) -> np.ndarray:
    total = labels**n_nodes
    if total > limit:
        raise ValueError(f"brute force over {total} labelings exceeds the limit {limit}")
    return np.array(list(itertools.product(range(labels), repeat=n_nodes)), dtype=np.int64).reshape(
        total, n_nodes
    )


def brute_force_map(mrf: GridMrf, limit: int = 10**6):
    """Exhaustive MAP labeling (first minimizer in lexicographic order)."""
    labs = _labelings(mrf.n_nodes, mrf.labels, limit).reshape(-1, mrf.height, mrf.width)
    r, c = np.indices((mrf.height, mrf.width))
    e = mrf.unary[r[None], c[None], labs].sum(axis=(1, 2))
    e = e + mrf.theta[labs[:, :, :-1], labs[:, :, 1:]].sum(axis=(1, 2))
    e = e + mrf.theta[labs[:, :-1, :], labs[:, 1:, :]].sum(axis=(1, 2))
    i = int(np.argmin(e))
    return labs[i], float(e[i])


def graph_cut_map(mrf: GridMrf):
    """Exact MAP for binary submodular grids via an s-t minimum cut."""
    import networkx as nx

    if mrf.labels != 2:
        raise ValueError("graph cut MAP needs exactly 2 labels")
    th = mrf.theta
    A, B, C, D = th[0, 0], th[0, 1], th[1, 0], th[1, 1]
    w = B + C - A - D
    if w < -1e-12:
        raise ValueError("pairwise potential is not submodular")
    H, W = mrf.height, mrf.width
    lin = mrf.unary[:, :, 1] - mrf.unary[:, :, 0]
    const = float(mrf.unary[:, :, 0].sum())

    def add_edge_pair(i, j):
        # A + (C - A) x_i + (D - C) x_j + w (1 - x_i) x_j
        lin[i] += C - A
        lin[j] += D - C
        if w > 0:
            G.add_edge(i, j, capacity=float(w))
        return A

    G = nx.DiGraph()
    G.add_node("s")
    G.add_node("t")
    for r in range(H):
        for c in range(W):
            if c + 1 < W:
                const += add_edge_pair((r, c), (r, c + 1))
            if r + 1 < H:
                const += add_edge_pair((r, c), (r + 1, c))
    for r in range(H):
        for c in range(W):
            a = float(lin[r, c])
            # label 1 <=> sink side
            if a > 0:
                G.add_edge("s", (r, c), capacity=a)
            elif a < 0:
                const += a
                G.add_edge((r, c), "t", capacity=-a)
            else:
                G.add_node((r, c))
    cut, (src_side, _) = nx.minimum_cut(G, "s", "t")
    lab = np.ones((H, W), dtype=np.int64)
    for node in src_side:
        if node != "s":
            lab[node] = 0
    return lab, float(const + cut), mrf.energy(lab)
