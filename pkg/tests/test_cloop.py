import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpcdistill import cloop
from mpcdistill.cloop import (
    ConstantPolicy,
    EvalScenario,
    ForestPolicy,
    IdealReplayPolicy,
    OpenLoopPolicy,
    Policy,
    candidacy_holds,
    draw_eval_scenarios,
    evaluate,
    measurement_window,
    recovered_advantage,
    run_closed_loop,
    train_nominal_policy,
)
from mpcdistill.datagen import ScenarioSpec
from mpcdistill.dynamics import W_NOMINAL, ModelConfig, simulate
from mpcdistill.learner import ForestConfig, ForestModel, Tree
from mpcdistill.ocp import OcpProblem, OcpSolution, SolverOptions, cost, solve_ocp

CFG = ModelConfig()
FAST = SolverOptions(multistart=("min", "max"))
X0 = np.array([0.3, 0.08, 0.15])
W = np.array([1.3e4, 350.0, 0.5])


class Recorder(Policy):
    def __init__(self):
        self.windows = []

    def control(self, window, k):
        self.windows.append(window.copy())
        return 0.2


def stump_forest():
    """One tree: label 3 when the newest measurement is <= 0.1, else label 1."""
    t = Tree(np.array([0, -1, -1]), np.array([0.1, 0.0, 0.0]), np.array([1, -1, -1]), np.array([2, -1, -1]),
             np.array([[0, 0, 0], [0, 0, 1], [1, 0, 0]]))
    return ForestModel([t], ForestConfig(n_trees=1), 6)


# ---------------------------------------------------------------- windows / simulation


def test_warm_up_repeats_initial_measurement():
    y = [0.1, 0.2, 0.3]
    np.testing.assert_array_equal(measurement_window(y, 0, 3), [0.1] * 4)
    np.testing.assert_array_equal(measurement_window(y, 2, 3), [0.3, 0.2, 0.1, 0.1])


def test_policy_sees_only_past_measurements():
    rec = Recorder()
    res = run_closed_loop(X0, W, rec, 8, 3, CFG)
    for k, win in enumerate(rec.windows):
        np.testing.assert_array_equal(win, measurement_window(list(res.measurements), k, 3))
    np.testing.assert_array_equal(res.measurements, res.states[:, 1])


def test_open_loop_replay_reproduces_optimal_cost():
    sol = solve_ocp(OcpProblem(X0, W, 60, CFG), FAST)
    res = run_closed_loop(X0, W, OpenLoopPolicy(sol.u_star), 60, 10, CFG)
    assert abs(res.cost - sol.j_star) <= 1e-9
    np.testing.assert_array_equal(res.states, simulate(X0, sol.u_star, W, CFG))


def test_constant_policy_matches_open_loop_cost():
    res = run_closed_loop(X0, W, ConstantPolicy(CFG.u_min), 40, 5, CFG)
    assert res.cost == pytest.approx(cost(np.full(40, CFG.u_min), X0, W, CFG), abs=1e-12)


def test_forest_policy_cost_not_below_ideal():
    sol = solve_ocp(OcpProblem(X0, W, 60, CFG))
    res = run_closed_loop(X0, W, ForestPolicy(stump_forest()), 60, 5, CFG)
    assert set(np.round(res.controls, 3)) <= {0.049, 0.449}
    assert res.cost >= sol.j_star - 1e-6


def test_closed_loop_is_deterministic():
    a = run_closed_loop(X0, W, ForestPolicy(stump_forest()), 30, 5, CFG)
    b = run_closed_loop(X0, W, ForestPolicy(stump_forest()), 30, 5, CFG)
    assert a.states.tobytes() == b.states.tobytes()


def test_out_of_box_policy_output_rejected():
    with pytest.raises(ValueError, match="step 0"):
        run_closed_loop(X0, W, ConstantPolicy(0.6), 5, 2, CFG)


# ---------------------------------------------------------------- recovered advantage


def test_recovered_advantage_reference_values():
    assert recovered_advantage(-10.0, -8.0, -10.0) == 1.0
    assert recovered_advantage(-8.0, -8.0, -10.0) == 0.0
    assert recovered_advantage(-9.0, -8.0, -10.0) == 0.5
    assert recovered_advantage(-1.245, -1.0, -1.312) == pytest.approx(0.245 / 0.312)


@pytest.mark.parametrize("nom,ideal", [(-10.0, -10.0), (-9.0, -8.0)])
def test_recovered_advantage_undefined(nom, ideal):
    with pytest.raises(ValueError, match="undefined"):
        recovered_advantage(-9.5, nom, ideal)


@given(st.floats(-5, 5), st.floats(0.1, 10), st.floats(-2, 2), st.floats(-3, 0), st.floats(0.1, 3))
@settings(max_examples=100)
def test_recovered_advantage_affine_invariant(shift, scale, learned, ideal, gap):
    nom = ideal + gap
    base = recovered_advantage(learned, nom, ideal)
    moved = recovered_advantage(scale * learned + shift, scale * nom + shift, scale * ideal + shift)
    assert moved == pytest.approx(base, rel=1e-9, abs=1e-9)


# ---------------------------------------------------------------- evaluate


def test_evaluate_single_scenario():
    sc = EvalScenario(X0, W, 0)
    pols = {"high": ConstantPolicy(CFG.u_max), "nominal": ConstantPolicy(CFG.u_min),
            "replay": IdealReplayPolicy()}
    rep = evaluate(pols, [sc], 40, 5, CFG, FAST)
    row = rep.rows[0]
    assert row["ok"]
    assert row["J_replay"] == pytest.approx(row["J_ideal"], abs=1e-9)
    assert row["J_nominal"] == pytest.approx(cost(np.full(40, CFG.u_min), X0, W, CFG), abs=1e-12)
    agg = rep.aggregates
    assert agg["completed"] == 1 and agg["mean_J_ideal"] == row["J_ideal"]
    assert agg["recovered_advantage"]["replay"] == pytest.approx(1.0, abs=1e-6)
    assert candidacy_holds(rep)


def test_evaluate_aggregates_are_means():
    scs = draw_eval_scenarios(3, ScenarioSpec(seed=2), CFG)
    rep = evaluate({"nominal": ConstantPolicy(0.2)}, scs, 30, 5, CFG, FAST)
    assert rep.aggregates["mean_J_nominal"] == pytest.approx(np.mean([r["J_nominal"] for r in rep.rows]))
    assert rep.aggregates["completed"] == 3
    assert rep.policy_names == ["nominal"]


def test_undercut_ideal_is_confirmed_and_refined(monkeypatch):
    real = cloop.solve_ocp
    calls = {"n": 0}

    def poor_first(problem, opts=None):
        calls["n"] += 1
        if calls["n"] == 1:
            u = np.full(problem.N, CFG.u_min)
            return OcpSolution(u, cost(u, problem.x0, problem.w, CFG), simulate(problem.x0, u, problem.w, CFG),
                               True, 0, 0.0)
        return real(problem, opts)

    monkeypatch.setattr(cloop, "solve_ocp", poor_first)
    rep = evaluate({"nominal": ConstantPolicy(0.3)}, [EvalScenario(X0, W, 0)], 40, 5, CFG, FAST)
    kinds = [d["kind"] for d in rep.diagnostics]
    assert kinds == ["ideal_suboptimal", "ideal_refined"]
    assert rep.rows[0]["J_ideal"] <= rep.rows[0]["J_nominal"]
    assert candidacy_holds(rep)


def test_evaluate_requires_nominal_policy():
    with pytest.raises(ValueError, match="nominal"):
        evaluate({"a": ConstantPolicy(0.2)}, [EvalScenario(X0, W, 0)], 5, 2, CFG, FAST)


def test_eval_scenarios_differ_from_training_stream():
    spec = ScenarioSpec(seed=0)
    ev = draw_eval_scenarios(5, spec, CFG)
    from mpcdistill.datagen import draw_scenario

    train = [draw_scenario(spec, i, W_NOMINAL) for i in range(5)]
    assert all(not np.array_equal(e.x0, t[0]) for e, t in zip(ev, train))


def test_nominal_policy_trains_on_nominal_parameters_only():
    x0s = [s.x0 for s in draw_eval_scenarios(2, ScenarioSpec(), CFG)]
    policy, data = train_nominal_policy(x0s, 20, 3, 4, ForestConfig(n_trees=3), CFG, FAST)
    assert all(rec["w"] == list(W_NOMINAL) for rec in data.scenarios)
    assert len(data) == 8
    assert policy.control(np.full(4, 0.05), 0) in (0.049, 0.11, 0.449)
