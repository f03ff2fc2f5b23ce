import numpy as np
import pytest
from hypothesis import given, strategies as st

import multicomb.optimizer as opt
from multicomb.model import drive_table, fig2_spec
from multicomb.optimizer import (
    PENALTY_DB, OptimizationProblem, Parameter, apply_parameters, evaluate, minimize_box,
    objective_comb_comb, objective_pair_noise, optimize, quadratic_self_test,
)


def test_quadratic_self_test_hits_analytic_minimum():
    target, found, res = quadratic_self_test()
    assert np.max(np.abs(found - target)) < 1e-4
    assert len(res.trace) <= 400


@given(st.floats(-1e3, 1e3), st.floats(-5, 5), st.floats(0.1, 10))
def test_reflection_stays_in_box(x, lo, w):
    y = opt._reflect(np.array([x]), lo, lo + w)[0]
    assert lo - 1e-9 <= y <= lo + w + 1e-9
    if lo <= x <= lo + w:
        assert y == pytest.approx(x)


def _quad(x):
    return float(np.sum((x - 0.3) ** 2)), "ok"


def test_trace_bookkeeping():
    res = minimize_box(_quad, [-1, -1], [1, 1], [0.9, -0.9], budget=37, n_starts=3, seed=4)
    vals = [e.value for e in res.trace]
    assert len(res.trace) <= 37
    assert res.f_best == min(vals)
    best = [e.best_so_far for e in res.trace]
    assert all(b2 <= b1 for b1, b2 in zip(best, best[1:]))
    assert best == list(np.minimum.accumulate(vals))
    assert all(-1 <= v <= 1 for e in res.trace for v in e.x)


def test_budget_exhaustion_flagged():
    res = minimize_box(_quad, [-1, -1], [1, 1], [0.9, -0.9], budget=5, n_starts=2)
    assert res.exhausted and len(res.trace) == 5


def test_search_is_deterministic():
    a = minimize_box(_quad, [-1, -1], [1, 1], [0.5, 0.5], budget=60, n_starts=4, seed=9)
    b = minimize_box(_quad, [-1, -1], [1, 1], [0.5, 0.5], budget=60, n_starts=4, seed=9)
    assert a.trace == b.trace


def test_problem_validation():
    spec = fig2_spec()
    with pytest.raises(ValueError):
        OptimizationProblem(spec, budget=0)
    with pytest.raises(ValueError):
        OptimizationProblem(spec, targets=(3, 3))
    with pytest.raises(ValueError):
        OptimizationProblem(spec, q_mode="ramp")
    with pytest.raises(ValueError):
        Parameter("Q_first", 10.0, 1.0)
    with pytest.raises(ValueError):
        OptimizationProblem(spec, initial=(1.0, 1e3, 1.0))
    single = fig2_spec(J=1, pump_power=drive_table(-2, 2, 1, 1e4, 1e-3))
    with pytest.raises(ValueError):
        OptimizationProblem(single, objective="comb_comb", targets=("T", "T"))
    with pytest.raises(ValueError):
        objective_comb_comb(single, {}, "T", "T")


def test_apply_parameters_touches_only_boundaries():
    spec = fig2_spec()
    new = apply_parameters(spec, dict(Q_first=1e3, Q_last=2e3, seed_power=5.0))
    q = np.array(spec.Q_out)
    q[0, 0], q[-1, -1] = 1e3, 2e3
    np.testing.assert_array_equal(new.Q_out, q)
    assert np.all(new.pump_power[3] == 5.0)
    np.testing.assert_array_equal(np.delete(new.pump_power, 3, 0), np.delete(spec.pump_power, 3, 0))
    comb = apply_parameters(spec, dict(Q_first=1e3), q_mode="comb")
    assert np.all(comb.Q_out[0] == 1e3) and np.all(comb.Q_out[1:] == 5e6)
    # the highest-frequency subcomb line and the lowest-frequency one
    assert spec.omega(-2, -1) == max(spec.omega(i, j) for i in spec.subcombs for j in (-1, 0, 1))
    assert spec.omega(2, 1) == min(spec.omega(i, j) for i in spec.subcombs for j in (-1, 0, 1))


def test_linear_system_objectives_zero_db():
    spec = fig2_spec(beta0=0.0, pump_power=drive_table(-2, 2, 3, 1e4, 1.0))
    assert objective_pair_noise(spec, {}, 9, 12) == pytest.approx(0.0, abs=1e-9)
    assert objective_comb_comb(spec, {}, 0, 1) == pytest.approx(0.0, abs=1e-9)


def test_dark_pair_penalized():
    # without coupling the idler comb stays dark
    spec = fig2_spec(beta0=0.0)
    ev = evaluate(spec, "pair", (0, 3))
    assert ev.value == PENALTY_DB and ev.tag == "dark"


def test_unstable_point_penalized(monkeypatch):
    monkeypatch.setattr(opt, "stability", lambda drift: 1.0)
    ev = evaluate(fig2_spec(), "pair", (0, 3))
    assert ev.value == PENALTY_DB and ev.tag == "unstable"


def test_comb_comb_is_worst_pair(fig2):
    ev = evaluate(fig2["spec"], "comb_comb", ("T", -2))
    db = ev.twin_beam_db
    assert ev.value == pytest.approx(np.nanmax(db[np.ix_([0, 1, 2], [3, 4, 5])]))


def test_small_optimization_deterministic_and_not_worse():
    prob = OptimizationProblem(fig2_spec(), "pair", (0, 3), budget=12, n_starts=2, seed=3)
    a, b = optimize(prob), optimize(prob)
    assert a.trace == b.trace and a.best_params == b.best_params
    assert a.best_value <= a.initial_value
    assert a.n_evaluations <= 12
    assert a.initial_params == pytest.approx(dict(Q_first=5e6, Q_last=5e6, seed_power=1e-3))
    for e in a.trace:
        for p, v in zip(prob.parameters, e.x):
            assert p.lower * (1 - 1e-12) <= v <= p.upper * (1 + 1e-12)
