from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from scipy.special import expit

from censorsim.dgp import Individual, builtin_dgp, true_probability
from censorsim.learner import LinearModel, decide
from censorsim.recourse import (ActionSet, FeatureAction, GuaranteeLedger, RecourseAction, RecourseError,
                                compute_recourse, default_action_set, enact_action, ledger_discharge,
                                ledger_promise, solve_recourse, validate_action)
from oracles import grid_oracle, recourse_instance


_instance = recourse_instance


@pytest.mark.parametrize("uniform", [True, False])
def test_matches_exhaustive_grid(uniform):
    rng = np.random.default_rng(5 if uniform else 6)
    feasible = 0
    for _ in range(250):
        w, b, rho, x, act, lo, hi, cost, dirs, step = _instance(rng, uniform)
        steps = solve_recourse(w, b, rho, x, act, lo, hi, cost, dirs, step)
        ref = grid_oracle(w, b, rho, x, act, lo, hi, cost, dirs, step)
        if steps is None:
            assert ref == math.inf
            continue
        feasible += 1
        new = np.clip(x + steps * step, lo, hi)
        assert expit(float(new @ w + b)) > rho
        got = float(np.sum(cost * np.abs(steps)) * step)
        assert got == pytest.approx(ref, abs=1e-9)
        assert np.all(steps[~act] == 0)
        assert np.all(steps[dirs == 1] >= 0) and np.all(steps[dirs == -1] <= 0)
    assert feasible > 100


def test_infeasibility_matches_corner_enumeration():
    rng = np.random.default_rng(9)
    for _ in range(300):
        w, b, rho, x, act, lo, hi, cost, dirs, step = _instance(rng, True)
        lo_e = np.where(act & (dirs != 1), lo, x)
        hi_e = np.where(act & (dirs != -1), hi, x)
        # best corner over the attainable box, snapped down to the lattice
        k_hi = np.floor((hi_e - x) / step + 1e-9)
        k_lo = np.ceil((lo_e - x) / step - 1e-9)
        best = max(float(np.clip(x + np.array(c) * step, lo, hi) @ w + b)
                   for c in itertools.product(*zip(k_lo, k_hi)))
        steps = solve_recourse(w, b, rho, x, act, lo, hi, cost, dirs, step)
        assert (steps is None) == (not expit(best) > rho)


def test_worked_example_two_features():
    m = LinearModel({"x1": 1.0, "x2": 1.0}, -1.0, 0.5)
    aset = ActionSet({"x1": FeatureAction(True, "both", -2, 1.5), "x2": FeatureAction(True, "both", -2, 1.5)})
    act = compute_recourse(m, {"x1": 0.0, "x2": 0.0}, aset)
    assert act.deltas == {"x1": pytest.approx(1.01)}
    assert act.cost == pytest.approx(1.01)


def test_boundary_is_one_step_on_cheapest_feature():
    m = LinearModel({"x1": 1.0, "x2": 3.0}, 0.0, 0.5)
    aset = ActionSet({"x1": FeatureAction(True), "x2": FeatureAction(True, cost_weight=1.0)})
    act = compute_recourse(m, {"x1": 0.0, "x2": 0.0}, aset)
    assert act.deltas == {"x2": pytest.approx(0.01)}


def test_already_approved_rejected():
    m = LinearModel({"x1": 1.0}, 1.0, 0.5)
    with pytest.raises(RecourseError):
        compute_recourse(m, {"x1": 0.0}, ActionSet({"x1": FeatureAction(True)}))


def test_infeasible_recourse_variant():
    spec = builtin_dgp("causal").with_truncation("x1", -2, 1, "causal_infeasible")
    aset = default_action_set(spec)
    # a censoring model: z=1 needs more than x1 <= 1 and x2 <= 1.5 can offer
    m = LinearModel({"x1": 1.0, "x2": 1.0, "z": -4.0}, 0.0, 0.5)
    act = compute_recourse(m, {"x1": 0.0, "x2": 0.0, "z": 1}, aset)
    assert act.status == "infeasible" and not act.feasible
    feas = compute_recourse(m, {"x1": 0.0, "x2": 0.0, "z": 1}, default_action_set(builtin_dgp("causal")))
    assert feas.status == "infeasible"  # 1.5 + 1.5 - 4 < 0 as well
    m2 = LinearModel({"x1": 1.0, "x2": 1.0, "z": -2.6}, 0.0, 0.5)
    assert compute_recourse(m2, {"x1": 0.0, "x2": 0.0, "z": 1}, aset).status == "infeasible"
    assert compute_recourse(m2, {"x1": 0.0, "x2": 0.0, "z": 1},
                            default_action_set(builtin_dgp("causal"))).feasible


def test_z_and_immutables_never_move():
    spec = builtin_dgp("german")
    aset = default_action_set(spec)
    assert not aset.get("g").actionable and not aset.get("a").actionable
    m = LinearModel({k: 0.5 for k in spec.model_features}, -20.0, 0.5)
    x = {k: 0.0 for k in spec.model_features}
    act = compute_recourse(m, x, aset)
    assert "g" not in act.deltas and "a" not in act.deltas and act.feasible


def test_action_set_checks():
    spec = builtin_dgp("causal")
    with pytest.raises(RecourseError):
        ActionSet({"z": FeatureAction(True)}).check_against(spec)
    with pytest.raises(RecourseError):
        ActionSet({"x1": FeatureAction(True, "both", -5, 1)}).check_against(spec)
    with pytest.raises(RecourseError):
        FeatureAction(True, "sideways")
    with pytest.raises(RecourseError):
        ActionSet({}, step=0)


def test_enact_causal_improves_gaming_does_not():
    rng = np.random.default_rng(0)
    spec = builtin_dgp("causal")
    ind = Individual(1, {"x1": 0.0, "x2": 0.0, "z": 1}, 1, true_probability(spec, {"x1": 0, "x2": 0, "z": 1}))
    out = enact_action(ind, RecourseAction({"x1": 1.0}, 1.0), spec, rng)
    assert out.true_prob > ind.true_prob
    g = builtin_dgp("gaming")
    feats = {"x1": 0.0, "x2": 0.0, "x1p": 0.0, "x2p": 0.0, "z": 1}
    ind = Individual(2, feats, 1, true_probability(g, feats), outcome=0, label=-1)
    out = enact_action(ind, RecourseAction({"x1p": 1.0}, 1.0), g, rng)
    assert out.true_prob == ind.true_prob and out.features["x1p"] == 1.0
    same = enact_action(ind, RecourseAction({}, 0.0), g, rng)
    assert same.features == ind.features and same.true_prob == ind.true_prob
    with pytest.raises(RecourseError):
        enact_action(ind, RecourseAction({}, math.inf, status="infeasible"), g, rng)
    with pytest.raises(RecourseError):
        enact_action(ind, RecourseAction({"x1p": 5.0}, 5.0), g, rng)


def test_validate_action_under_model_shift():
    m = LinearModel({"x": 1.0}, 0.0, 0.5)
    x = {"x": math.log(0.51 / 0.49)}
    assert validate_action(m, x) == "valid"
    assert validate_action(m.with_intercept(-0.1), x) == "invalid"


def test_guarantee_ledger():
    led = GuaranteeLedger()
    ledger_promise(led, 7, 3)
    assert led.due(4) == [7] and led.due(3) == []
    with pytest.raises(RecourseError):
        led.promise(7, 3)
    with pytest.raises(RecourseError):
        led.discharge(7, 5)
    _, ok = ledger_discharge(led, 7, 4)
    assert ok and led.outstanding == 0
    assert led.issued == led.discharged + led.outstanding
    with pytest.raises(RecourseError):
        led.discharge(7, 4)
    assert GuaranteeLedger().due(1) == []


def test_non_uniform_cost_prefers_cheap_feature():
    m = LinearModel({"a": 2.0, "b": 1.0}, -1.0, 0.5)
    aset = ActionSet({"a": FeatureAction(True, cost_weight=5.0), "b": FeatureAction(True, cost_weight=1.0)})
    act = compute_recourse(m, {"a": 0.0, "b": 0.0}, aset)
    assert set(act.deltas) == {"b"} and act.cost == pytest.approx(1.01)
    assert decide(m, {"a": 0.0, "b": 1.01}) == 1
