"""Benchmark harness: instance generation, solver runs, run logs and rate fits.

A run writes three files into its output directory:

``run.csv``
    one row per outer iteration with the fixed header
    ``n,lmo_calls,t_n,eps_n,dual_H,dual_exact,primal,gap,infeas,wall_ms``
    (quantities at the current iterate ``(x_n, y_n)``);
``ergodic.csv``
    ``n,dual_H,primal,infeas`` at the ergodic iterates;
``summary.json``
    config echo, final values, lmo and step counts, fitted slopes.

``primal`` is the decoded labeling energy for grid MRFs, ``f(x)`` for
equality-constrained problems and ``max_y L(x, y)`` otherwise.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import mrf
from .appa import EpsSchedule, TSchedule, appa_iterate, appa_init, ergodic_dual, ergodic_primal, eval_dual, primal_value
from .core import LinearMap, LinearPart, QuadraticPart, SaddleProblem, SimplexLmo
from .pd import PdConfig, pd_init, pd_iterate
from .smoothing import SimplexIndicator

__all__ = [
    "CSV_HEADER",
    "ConfigError",
    "RunConfig",
    "RunLog",
    "generate_instance",
    "load_instance",
    "problem_from_document",
    "run",
    "fit_rate",
    "read_log",
    "reference_value",
]

CSV_HEADER = ["n", "lmo_calls", "t_n", "eps_n", "dual_H", "dual_exact", "primal", "gap", "infeas", "wall_ms"]
ERGODIC_HEADER = ["n", "dual_H", "primal", "infeas"]
SOLVERS = ("appa", "ppa", "pd")


class ConfigError(ValueError):
    """Invalid run configuration or instance; ``context`` names the source."""

    def __init__(self, message: str, context: Optional[str] = None):
        self.context = context
        super().__init__(f"{context}: {message}" if context else message)


# ---------------------------------------------------------------------------
# instances


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(int(seed))


def generate_instance(spec: dict) -> dict:
    """Instance document for a generator spec (deterministic in ``seed``).

    Kinds
    -----
    random_grid_mrf : W, H, L, pairwise kind, w, t, seed
        unary costs uniform in [0, 1].
    submodular_grid : W, H, seed, w (default 0.3), unary (default "signed")
        2 labels with attractive Potts weight ``w``; the chain relaxation is
        tight. ``"signed"`` draws a field ``d`` uniform in [-1, 1] per node
        and charges ``max(d, 0)`` for label 0 and ``max(-d, 0)`` for label
        1; ``"uniform"`` draws both costs uniform in [0, 1].
    eq_qp : dim, constraints, seed
        ``min 1/2 ||x - c||^2`` over the simplex subject to ``Ax = b`` with
        ``b = A x_int`` for an interior point ``x_int``.
    matrix_game : rows, cols, seed
        ``min_x max_y <Mx, y>`` over two simplices, ``M`` standard normal.
    """
    spec = dict(spec)
    kind = spec.pop("kind", None)
    seed = spec.pop("seed", 0)
    rng = _rng(seed)
    if kind == "random_grid_mrf":
        W, H, L = int(spec["W"]), int(spec["H"]), int(spec["L"])
        pw = mrf.Pairwise(spec.get("pairwise", "potts"), float(spec.get("w", 1.0)), float(spec.get("t", 0.0)))
        doc = mrf.GridMrf(W, H, L, rng.random(H * W * L), pw).to_dict()
        doc["type"] = "grid_mrf"
    elif kind == "submodular_grid":
        W, H = int(spec["W"]), int(spec["H"])
        w = float(spec.get("w", 0.3))
        if w < 0:
            raise ConfigError("submodular_grid needs an attractive (nonnegative) Potts weight")
        field = spec.get("unary", "signed")
        if field == "signed":
            d = rng.uniform(-1.0, 1.0, (H, W))
            unary = np.stack([np.maximum(d, 0.0), np.maximum(-d, 0.0)], axis=-1)
        elif field == "uniform":
            unary = rng.random((H, W, 2))
        else:
            raise ConfigError(f"unknown unary field {field!r}; expected 'signed' or 'uniform'")
        doc = mrf.GridMrf(W, H, 2, unary, mrf.Pairwise("potts", w)).to_dict()
        doc["type"] = "grid_mrf"
    elif kind == "eq_qp":
        dim, k = int(spec["dim"]), int(spec.get("constraints", 0))
        if dim < 1:
            raise ConfigError("eq_qp needs dim >= 1")
        if k >= dim:
            raise ConfigError(f"eq_qp with {k} constraints in dimension {dim} leaves no interior feasible point")
        A = rng.standard_normal((k, dim))
        x_int = rng.dirichlet(np.ones(dim))
        c = float(spec.get("c_scale", 0.3)) * rng.standard_normal(dim)
        doc = {"type": "eq_qp", "A": A.tolist(), "b": (A @ x_int).tolist(), "c": c.tolist()}
    elif kind == "matrix_game":
        m, n = int(spec["rows"]), int(spec.get("cols", spec["rows"]))
        doc = {"type": "matrix_game", "M": rng.standard_normal((m, n)).tolist()}
    else:
        raise ConfigError(f"unknown instance kind {kind!r}")
    doc["generator"] = {"kind": kind, "seed": int(seed), **spec}
    return doc


def problem_from_document(doc: dict) -> SaddleProblem:
    kind = doc.get("type", "grid_mrf")
    if kind == "grid_mrf":
        return mrf.build_saddle(mrf.GridMrf.from_dict(doc))
    if kind == "eq_qp":
        c = np.asarray(doc["c"], dtype=float)
        dim = c.size
        A = np.asarray(doc["A"], dtype=float).reshape(-1, dim)
        b = np.asarray(doc["b"], dtype=float)
        f = QuadraticPart(np.eye(dim), -c, 0.5 * float(c @ c))
        return SaddleProblem.from_equality_constrained(f, SimplexLmo(dim), A, b, name="eq_qp")
    if kind == "matrix_game":
        M = np.array(doc["M"], dtype=float, ndmin=2)
        m, n = M.shape
        return SaddleProblem(
            LinearMap.from_matrix(M), LinearPart(np.zeros(n)), SimplexLmo(n), SimplexIndicator(m), name="matrix_game"
        )
    raise ConfigError(f"unknown problem type {kind!r}")


def load_instance(source, context: Optional[str] = None):
    """``(document, problem)`` from ``{"path": ...}`` or ``{"generate": spec}``."""
    try:
        if isinstance(source, (str, Path)):
            source = {"path": str(source)}
        if "path" in source:
            doc = json.loads(Path(source["path"]).read_text())
        elif "generate" in source:
            doc = generate_instance(source["generate"])
        else:
            raise ConfigError("instance needs either 'path' or 'generate'")
        return doc, problem_from_document(doc)
    except ConfigError as err:
        raise ConfigError(str(err), context) from err
    except (KeyError, TypeError, ValueError, OSError) as err:
        raise ConfigError(f"bad instance: {type(err).__name__}: {err}", context) from err


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    """Solver run parameters (see :meth:`from_dict`)."""

    solver: str
    instance: dict
    gamma: Optional[float] = None
    t_schedule: dict = field(default_factory=lambda: {"kind": "aggressive"})
    eps_schedule: dict = field(default_factory=lambda: {"kind": "theory", "delta": 0.1})
    tau: Optional[float] = None
    sigma: Optional[float] = None
    max_outer_iters: int = 100
    max_lmo_calls: Optional[int] = None
    seed: int = 0
    reference: Optional[float] = None
    slope_window: float = 0.5
    context: Optional[str] = None

    @classmethod
    def from_dict(cls, data: dict, context: Optional[str] = None) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__ if f != "context"}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown config fields {sorted(extra)}", context)
        if "solver" not in data or "instance" not in data:
            raise ConfigError("config needs 'solver' and 'instance'", context)
        cfg = cls(**data, context=context)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config: {err}", str(path)) from err
        return cls.from_dict(data, context=str(path))

    def validate(self) -> None:
        ctx = self.context
        if self.solver not in SOLVERS:
            raise ConfigError(f"solver must be one of {SOLVERS}, got {self.solver!r}", ctx)
        if self.solver in ("appa", "ppa"):
            if self.gamma is None:
                raise ConfigError("gamma is required for appa/ppa (no default)", ctx)
            if not self.gamma > 0:
                raise ConfigError(f"gamma must be positive, got {self.gamma}", ctx)
        if self.max_outer_iters < 1:
            raise ConfigError("max_outer_iters must be >= 1", ctx)
        if self.max_lmo_calls is not None and self.max_lmo_calls < 1:
            raise ConfigError("max_lmo_calls must be >= 1", ctx)
        if not 0 < self.slope_window <= 1:
            raise ConfigError("slope_window must lie in (0, 1]", ctx)
        try:
            self.make_t_schedule()
            self.make_eps_schedule()
        except (TypeError, ValueError) as err:
            raise ConfigError(str(err), ctx) from err

    def make_t_schedule(self) -> TSchedule:
        if self.solver == "ppa":
            return TSchedule("constant_one")
        ts = dict(self.t_schedule)
        return TSchedule(ts.pop("kind", "aggressive"), **ts)

    def make_eps_schedule(self) -> EpsSchedule:
        es = dict(self.eps_schedule)
        if self.solver == "pd":
            # validated here, consumed by PdConfig
            extra = set(es) - {"kind", "delta", "scale", "floor"}
            if extra:
                raise ValueError(f"pd eps schedule accepts delta, scale, floor; got {sorted(extra)}")
            return EpsSchedule("theory", delta=es.get("delta", 0.1), scale=es.get("scale"), floor=es.get("floor", 0.0))
        return EpsSchedule(**es)

    def make_pd_config(self) -> PdConfig:
        es = self.eps_schedule
        return PdConfig(self.tau, self.sigma, es.get("delta", 0.1), es.get("scale"), es.get("floor", 0.0))

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("context")
        return out


# ---------------------------------------------------------------------------
# running


@dataclass
class RunLog:
    rows: list
    ergodic: list
    summary: dict

    def column(self, name: str, ergodic: bool = False) -> np.ndarray:
        rows = self.ergodic if ergodic else self.rows
        return np.array([np.nan if r[name] is None else float(r[name]) for r in rows])

    def csv_text(self) -> str:
        return _csv(CSV_HEADER, self.rows)

    def ergodic_csv_text(self) -> str:
        return _csv(ERGODIC_HEADER, self.ergodic)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r[h]) for h in header])
    return buf.getvalue()


def _primal(prob: SaddleProblem, x) -> float:
    if isinstance(prob.source, mrf.MrfLayout):
        return mrf.decode_primal(x, prob.source)[1]
    if prob.is_axb:
        return prob.f.value(x)
    try:
        return primal_value(prob, x)
    except NotImplementedError:
        return prob.f.value(x)


def _infeas(prob: SaddleProblem, x):
    return float(np.linalg.norm(prob.A @ x - prob.b)) if prob.is_axb else None


def run(config: RunConfig, out_dir=None) -> RunLog:
    """Execute one solver run; writes ``run.csv``, ``ergodic.csv`` and
    ``summary.json`` into ``out_dir`` when given."""
    doc, prob = load_instance(config.instance, config.context)
    rows, erg = [], []
    t_start = time.perf_counter()
    flags = {"capped_inner_solves": 0}

    def record(n, t_n, eps_n, y, x, gap, capped, x_e, y_e):
        H, exact = eval_dual(prob, y)
        He, _ = eval_dual(prob, y_e)
        flags["capped_inner_solves"] += int(capped)
        rows.append(
            {
                "n": n,
                "lmo_calls": prob.lmo.calls,
                "t_n": t_n,
                "eps_n": eps_n,
                "dual_H": H,
                "dual_exact": exact,
                "primal": _primal(prob, x),
                "gap": gap,
                "infeas": _infeas(prob, x),
                "wall_ms": 1000.0 * (time.perf_counter() - t_start),
            }
        )
        erg.append({"n": n, "dual_H": He, "primal": _primal(prob, x_e), "infeas": _infeas(prob, x_e)})

    budget = config.max_lmo_calls
    if config.solver in ("appa", "ppa"):
        ts = config.make_t_schedule()
        es = config.make_eps_schedule()
        state = appa_init(prob, config.gamma, es)
        for _ in range(config.max_outer_iters):
            if budget is not None and prob.lmo.calls >= budget:
                break
            appa_iterate(state, prob, ts, es)
            last = state.last
            record(state.n, state.t, last["eps"], state.y, state.x, last["gap"], last["capped"],
                   ergodic_primal(state), ergodic_dual(state))
        stats, x0_atoms = state.stats, state.initial_atoms
        extra = {"gap0": state.gap0, "eps_scale": es.scale, "A_n": state.A_n, "B_n": state.B_n, "T_n": state.T_n}
    else:
        state, cfg = pd_init(prob, config.make_pd_config())
        for _ in range(config.max_outer_iters):
            if budget is not None and prob.lmo.calls >= budget:
                break
            pd_iterate(state, prob, cfg)
            last = state.last
            record(state.n, 1.0, last["eps"], state.y, state.x, last["gap"], last["capped"], state.x_erg, state.y_erg)
        stats, x0_atoms = state.stats, state.initial_atoms
        extra = {"tau": cfg.tau, "sigma": cfg.sigma, "eps_scale": cfg.scale, "A_n": state.A_n, "B_n": state.B_n}

    summary = {
        "config": config.to_dict(),
        "instance": doc.get("generator", {"type": doc.get("type")}),
        "iterations": len(rows),
        "lmo_calls_total": prob.lmo.calls,
        "lmo_calls_stats": stats.lmo_calls,
        "good_steps": stats.good_steps,
        "bad_steps": stats.bad_steps,
        "initial_atoms": x0_atoms,
        "step_flags": stats.as_dict(),
        "capped_inner_solves": flags["capped_inner_solves"],
        "final": {k: rows[-1][k] for k in ("dual_H", "primal", "gap", "infeas")} if rows else {},
        "final_ergodic": {k: erg[-1][k] for k in ("dual_H", "primal", "infeas")} if erg else {},
        **extra,
    }
    log = RunLog(rows, erg, summary)
    if config.reference is not None and rows:
        summary["reference"] = config.reference
        summary["slopes"] = _slopes(log, config.reference, config.slope_window)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "run.csv").write_text(log.csv_text())
        (out / "ergodic.csv").write_text(log.ergodic_csv_text())
        (out / "summary.json").write_text(json.dumps(summary, indent=2, default=_json_default) + "\n")
    return log


def _json_default(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(type(v).__name__)


def _slopes(log: RunLog, reference: float, window: float) -> dict:
    out = {}
    for name, rows in (("dual_H", log.rows), ("dual_H_ergodic", log.ergodic)):
        try:
            out[name] = fit_rate(rows, "dual_H", reference, window=window, mode="below")
        except ValueError as err:
            out[name] = {"error": str(err)}
    return out


# ---------------------------------------------------------------------------
# rate fitting


def read_log(path) -> list:
    """Rows of a run CSV as dicts of floats (empty cells become None)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [{k: (float(v) if v != "" else None) for k, v in r.items()} for r in reader]


def fit_rate(log, field: str, reference: Optional[float] = None, window=0.5, mode: str = "below") -> float:
    """Least-squares slope of ``log(gap)`` against ``log(n)``.

    Parameters
    ----------
    log : RunLog, sequence of row dicts, or path to a CSV
    field : column name
    reference : float, optional
        ``gap = reference - value`` (``mode="below"``), ``value - reference``
        (``"above"``) or ``|value - reference|`` (``"abs"``). Without a
        reference the column itself is the gap.
    window : float or (start, stop)
        Fraction of trailing rows (default: last half) or an explicit
        row-index range.
    """
    if isinstance(log, RunLog):
        rows = log.rows
    elif isinstance(log, (str, Path)):
        rows = read_log(log)
    else:
        rows = list(log)
    if isinstance(window, (int, float)) and not isinstance(window, bool):
        if not 0 < window <= 1:
            raise ValueError("window fraction must lie in (0, 1]")
        start = int(math.floor(len(rows) * (1.0 - window)))
        sel = rows[start:]
    else:
        a, b = window
        sel = rows[a:b]
    if len(sel) < 2:
        raise ValueError(f"slope window holds {len(sel)} rows; need at least 2")
    n = np.array([float(r["n"]) for r in sel])
    vals = []
    for r in sel:
        v = r[field]
        if v is None:
            raise ValueError(f"row n={int(r['n'])} has no value for {field!r}")
        vals.append(float(v))
    vals = np.array(vals)
    if reference is None:
        gap = vals
    elif mode == "below":
        gap = reference - vals
    elif mode == "above":
        gap = vals - reference
    elif mode == "abs":
        gap = np.abs(vals - reference)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    bad = np.flatnonzero(~(gap > 0))
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"nonpositive gap {gap[i]:.3g} at row n={int(n[i])}; cannot fit a log-log slope")
    return float(np.polyfit(np.log(n), np.log(gap), 1)[0])


def reference_value(doc: dict, config: RunConfig, budget_factor: int = 10) -> dict:
    """Reference optimum for slope fits.

    Binary submodular grid MRFs use the exact minimum cut energy (the chain
    relaxation is tight). Otherwise an accelerated run with the theory
    schedule and ``budget_factor`` times the configured iterations is used;
    its final dual value (and ergodic primal value for equality-constrained
    problems) is reported.
    """
    prob = problem_from_document(doc)
    if doc.get("type") == "grid_mrf":
        g = mrf.GridMrf.from_dict(doc)
        if g.labels == 2 and g.pairwise.kind == "potts":
            lab, energy, _ = mrf.graph_cut_map(g)
            return {"method": "min_cut", "dual": energy, "primal": energy}
    gamma = config.gamma if config.gamma is not None else 1.0
    es = EpsSchedule("theory", delta=0.1)
    ts = TSchedule("aggressive")
    state = appa_init(prob, gamma, es)
    for _ in range(budget_factor * config.max_outer_iters):
        appa_iterate(state, prob, ts, es)
    out = {"method": "reference_run", "dual": eval_dual(prob, ergodic_dual(state))[0], "iterations": state.n}
    out["primal"] = float(_primal(prob, ergodic_primal(state)))
    return out
