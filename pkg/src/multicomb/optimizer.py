"""Box-constrained optimization of covariance-derived noise objectives.

Parameters are searched in log10 space. Each start runs a Nelder-Mead simplex
on an objective that reflects points back into the box, so every evaluated
point is feasible. Failed evaluations (no stationary state, unstable
linearization, dark target modes) return a finite penalty instead of raising.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.stats import qmc

from .fluct import linearize, output_amplitudes, output_covariance, stability
from .meanfield import IntegrationError, steady_state
from .metrics import twin_beam_map
from .model import CombSystemSpec, build_cavity, build_mode_table

__all__ = [
    "PENALTY_DB",
    "Parameter",
    "default_parameters",
    "OptimizationProblem",
    "Evaluation",
    "TraceEntry",
    "OptResult",
    "apply_parameters",
    "evaluate",
    "objective_pair_noise",
    "objective_comb_comb",
    "minimize_box",
    "optimize",
    "quadratic_self_test",
]

log = logging.getLogger(__name__)

PENALTY_DB = 1e3
# per-evaluation integration cap; Newton finishes the stationary point
EVAL_MAX_STEPS = 30_000
Q_MODES = ("mode", "comb")


@dataclass(frozen=True)
class Parameter:
    """One search axis. ``name`` is one of ``Q_first``, ``Q_last``, ``seed_power``."""

    name: str
    lower: float
    upper: float
    log: bool = True

    def __post_init__(self):
        if not (np.isfinite(self.lower) and np.isfinite(self.upper) and self.lower < self.upper):
            raise ValueError(f"parameter {self.name}: need finite bounds with lower < upper")
        if self.log and self.lower <= 0:
            raise ValueError(f"parameter {self.name}: log-scaled bounds must be positive")

    def to_search(self, value):
        return np.log10(value) if self.log else value

    def from_search(self, x):
        return 10.0 ** x if self.log else x

    @property
    def search_bounds(self) -> tuple[float, float]:
        return float(self.to_search(self.lower)), float(self.to_search(self.upper))


def default_parameters() -> tuple[Parameter, ...]:
    return (
        Parameter("Q_first", 1e2, 1e8),
        Parameter("Q_last", 1e2, 1e8),
        Parameter("seed_power", 1e-3, 1e4),
    )


@dataclass(frozen=True)
class OptimizationProblem:
    """Objective over a cavity spec.

    ``objective`` is ``"pair"`` (``targets`` = two mode indices) or
    ``"comb_comb"`` (``targets`` = two comb selectors, an integer subcomb
    index or ``"T"``). ``q_mode="mode"`` varies the Q of the single highest-
    and lowest-frequency subcomb lines; ``"comb"`` varies the whole boundary
    subcombs.
    """

    spec: CombSystemSpec
    objective: str = "pair"
    targets: tuple = (0, 3)
    parameters: tuple[Parameter, ...] = field(default_factory=default_parameters)
    budget: int = 500
    n_starts: int = 8
    seed: int = 0
    q_mode: str = "mode"
    omega: float = 0.0
    initial: tuple | None = None

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("evaluation budget must be >= 1")
        if self.n_starts < 1:
            raise ValueError("n_starts must be >= 1")
        if self.objective not in ("pair", "comb_comb"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.q_mode not in Q_MODES:
            raise ValueError(f"q_mode must be one of {Q_MODES}")
        if len(self.targets) != 2:
            raise ValueError("targets must name two modes or two combs")
        names = [p.name for p in self.parameters]
        if len(set(names)) != len(names) or not set(names) <= {"Q_first", "Q_last", "seed_power"}:
            raise ValueError(f"parameters must be distinct names from Q_first, Q_last, seed_power; got {names}")
        if self.objective == "pair":
            n = self.spec.n_modes
            a, b = (int(t) for t in self.targets)
            if a == b or not (0 <= a < n and 0 <= b < n):
                raise ValueError(f"pair targets must be two distinct modes in [0, {n})")
        else:
            table = build_mode_table(self.spec)
            a, b = (table.comb_modes(t) for t in self.targets)
            if self.targets[0] == self.targets[1] and len(a) < 2:
                raise ValueError("comb_comb objective on a single-mode comb with itself is degenerate")
        if self.initial is not None:
            if len(self.initial) != len(self.parameters):
                raise ValueError("initial point must give one value per parameter")
            for p, v in zip(self.parameters, self.initial):
                if not p.lower <= v <= p.upper:
                    raise ValueError(f"initial {p.name}={v} outside [{p.lower}, {p.upper}]")

    def initial_values(self) -> tuple[float, ...]:
        """Explicit initial point, else the values already present in ``spec``."""
        if self.initial is not None:
            return tuple(float(v) for v in self.initial)
        cur = current_parameters(self.spec, self.q_mode)
        return tuple(float(np.clip(cur[p.name], p.lower, p.upper)) for p in self.parameters)


def _boundary_cells(spec: CombSystemSpec, q_mode: str):
    """(row, column) index sets of Q_out for the first and last boundary."""
    last_row = spec.n_sub - 1
    if q_mode == "comb":
        return (0, slice(None)), (last_row, slice(None))
    # rows ordered i_lo..i_hi; column 0 is j=-h (highest frequency in a comb)
    return (0, 0), (last_row, spec.J - 1)


def current_parameters(spec: CombSystemSpec, q_mode: str = "mode") -> dict[str, float]:
    first, last = _boundary_cells(spec, q_mode)
    seed_row = spec.pump_power[1 - spec.i_lo]
    return {
        "Q_first": float(np.max(spec.Q_out[first])),
        "Q_last": float(np.max(spec.Q_out[last])),
        "seed_power": float(np.max(seed_row)),
    }


def apply_parameters(spec: CombSystemSpec, params: dict[str, float], q_mode: str = "mode") -> CombSystemSpec:
    """New spec with boundary Q factors and the uniform seed-comb power replaced."""
    q = np.array(spec.Q_out, dtype=float)
    power = np.array(spec.pump_power, dtype=float)
    first, last = _boundary_cells(spec, q_mode)
    if "Q_first" in params:
        q[first] = params["Q_first"]
    if "Q_last" in params:
        q[last] = params["Q_last"]
    if "seed_power" in params:
        power[1 - spec.i_lo] = params["seed_power"]
    return replace(spec, Q_out=q, pump_power=power)


@dataclass(frozen=True)
class Evaluation:
    value: float
    tag: str  # "ok" | "unconverged" | "unstable" | "diverged" | "dark"
    twin_beam_db: np.ndarray | None = None


def evaluate(spec: CombSystemSpec, objective: str, targets, omega: float = 0.0) -> Evaluation:
    """Full pipeline for one spec; failures map to ``PENALTY_DB``."""
    model = build_cavity(spec)
    try:
        ss = steady_state(model, max_steps=EVAL_MAX_STEPS, diagnose=False)
    except IntegrationError:
        return Evaluation(PENALTY_DB, "diverged")
    if not ss.converged:
        return Evaluation(PENALTY_DB, "unconverged")
    drift = linearize(model, ss)
    if stability(drift) >= 0:
        return Evaluation(PENALTY_DB, "unstable")
    tb = twin_beam_map(output_covariance(drift, omega), output_amplitudes(model, ss))
    db = tb.db
    if objective == "pair":
        a, b = (int(t) for t in targets)
        if db.mask[a, b]:
            return Evaluation(PENALTY_DB, "dark", db.filled(np.nan))
        return Evaluation(float(db[a, b]), "ok", db.filled(np.nan))
    table = model.table
    ma, mb = (table.comb_modes(t) for t in targets)
    vals = [db[m, n] for m in ma for n in mb if m != n and not db.mask[m, n]]
    if not vals:
        return Evaluation(PENALTY_DB, "dark", db.filled(np.nan))
    return Evaluation(float(max(vals)), "ok", db.filled(np.nan))


def objective_pair_noise(spec: CombSystemSpec, params: dict[str, float], mode_a: int, mode_b: int,
                         q_mode: str = "mode", omega: float = 0.0) -> float:
    """Twin-beam ratio of one mode pair in dB (minimize)."""
    return evaluate(apply_parameters(spec, params, q_mode), "pair", (mode_a, mode_b), omega).value


def objective_comb_comb(spec: CombSystemSpec, params: dict[str, float], comb_a, comb_b,
                        q_mode: str = "mode", omega: float = 0.0) -> float:
    """Worst pairwise twin-beam ratio in dB between every line of two combs (minimize)."""
    n_a = len(build_mode_table(spec).comb_modes(comb_a))
    if comb_a == comb_b and n_a < 2:
        raise ValueError("comb_comb objective on a single-mode comb with itself is degenerate")
    return evaluate(apply_parameters(spec, params, q_mode), "comb_comb", (comb_a, comb_b), omega).value


# --- generic multi-start search -------------------------------------------------------


def _reflect(x, lo, hi):
    w = hi - lo
    y = np.mod(x - lo, 2.0 * w)
    return lo + np.where(y > w, 2.0 * w - y, y)


@dataclass(frozen=True)
class TraceEntry:
    index: int
    start: int
    x: tuple  # search coordinates
    value: float
    tag: str
    best_so_far: float


@dataclass
class _SearchResult:
    x_best: np.ndarray
    f_best: float
    trace: list
    exhausted: bool


class _BudgetExhausted(Exception):
    pass


def minimize_box(fun: Callable[[np.ndarray], tuple[float, str]], lower, upper, x0, budget: int,
                 n_starts: int = 8, seed: int = 0, xatol: float = 1e-5, fatol: float = 1e-7) -> _SearchResult:
    """Multi-start Nelder-Mead in the box ``[lower, upper]``.

    ``fun`` returns ``(value, tag)``. Start 0 is ``x0``; the others come from a
    scrambled Sobol sequence. Each start gets an equal share of the budget and
    unused evaluations roll over to later starts.
    """
    lo = np.asarray(lower, dtype=float)
    hi = np.asarray(upper, dtype=float)
    d = len(lo)
    starts = [np.asarray(x0, dtype=float)]
    if n_starts > 1:
        sob = qmc.Sobol(d, scramble=True, seed=seed).random(max(2, 1 << (n_starts - 1).bit_length()))
        starts += [lo + u * (hi - lo) for u in sob[: n_starts - 1]]
    trace: list[TraceEntry] = []
    cache: dict[bytes, tuple[float, str]] = {}
    best = [np.inf, starts[0].copy()]
    exhausted = False

    def wrapped(x, k):
        xr = _reflect(np.asarray(x, dtype=float), lo, hi)
        key = xr.tobytes()
        if key in cache:
            return cache[key][0]
        if len(trace) >= budget:
            raise _BudgetExhausted
        val, tag = fun(xr)
        val = float(val) if np.isfinite(val) else PENALTY_DB
        cache[key] = (val, tag)
        if val < best[0]:
            best[0], best[1] = val, xr.copy()
        trace.append(TraceEntry(len(trace), k, tuple(float(v) for v in xr), val, tag, float(best[0])))
        return val

    for k, xs in enumerate(starts):
        remaining = budget - len(trace)
        if remaining <= 0:
            exhausted = True
            break
        share = remaining // (len(starts) - k)
        cap = len(trace) + max(share, d + 2)
        step = 0.1 * (hi - lo)
        simplex = [xs] + [xs + np.where(np.arange(d) == m, np.where(xs + step <= hi, step, -step), 0.0)
                          for m in range(d)]

        def f(x, k=k, cap=cap):
            if len(trace) >= cap:
                raise _BudgetExhausted
            return wrapped(x, k)

        try:
            minimize(f, xs, method="Nelder-Mead",
                     options=dict(initial_simplex=np.array(simplex), xatol=xatol, fatol=fatol,
                                  maxfev=10 * budget, adaptive=False))
        except _BudgetExhausted:
            if len(trace) >= budget:
                exhausted = True
                break
    return _SearchResult(np.asarray(best[1]), float(best[0]), trace, exhausted)


@dataclass(frozen=True)
class OptResult:
    best_params: dict
    best_value: float
    initial_params: dict
    initial_value: float
    trace: tuple
    budget_exhausted: bool
    elapsed: float

    @property
    def improvement_db(self) -> float:
        """Initial minus best objective; positive means more squeezing."""
        return self.initial_value - self.best_value

    @property
    def n_evaluations(self) -> int:
        return len(self.trace)


def optimize(problem: OptimizationProblem) -> OptResult:
    """Deterministic multi-start search for ``problem``; start 0 is the initial point."""
    t0 = time.perf_counter()
    pars = problem.parameters
    names = [p.name for p in pars]
    bounds = np.array([p.search_bounds for p in pars])

    def to_params(x):
        return {p.name: float(p.from_search(v)) for p, v in zip(pars, x)}

    def fun(x):
        ev = evaluate(apply_parameters(problem.spec, to_params(x), problem.q_mode),
                      problem.objective, problem.targets, problem.omega)
        return ev.value, ev.tag

    x0 = np.array([p.to_search(v) for p, v in zip(pars, problem.initial_values())])
    res = minimize_box(fun, bounds[:, 0], bounds[:, 1], x0, problem.budget, problem.n_starts, problem.seed)
    trace = tuple(
        TraceEntry(e.index, e.start, tuple(to_params(e.x)[n] for n in names), e.value, e.tag, e.best_so_far)
        for e in res.trace
    )
    init = trace[0]
    log.info("optimize: %d evaluations, best %.3f dB (initial %.3f dB)", len(trace), res.f_best, init.value)
    return OptResult(
        best_params=to_params(res.x_best),
        best_value=res.f_best,
        initial_params=dict(zip(names, init.x)),
        initial_value=init.value,
        trace=trace,
        budget_exhausted=res.exhausted,
        elapsed=time.perf_counter() - t0,
    )


def quadratic_self_test(budget: int = 400, n_starts: int = 4, seed: int = 0) -> tuple[np.ndarray, np.ndarray, _SearchResult]:
    """Solver sanity check on a convex quadratic in the default log box.

    Returns (analytic minimizer, found minimizer, search result) in log10 space.
    """
    bounds = np.array([p.search_bounds for p in default_parameters()])
    target = np.array([4.3, 6.1, 0.7])
    H = np.array([[2.0, 0.3, 0.0], [0.3, 1.0, 0.2], [0.0, 0.2, 0.5]])

    def fun(x):
        dx = x - target
        return float(dx @ H @ dx), "ok"

    x0 = bounds.mean(axis=1)
    res = minimize_box(fun, bounds[:, 0], bounds[:, 1], x0, budget, n_starts, seed, xatol=1e-7, fatol=1e-14)
    return target, res.x_best, res
