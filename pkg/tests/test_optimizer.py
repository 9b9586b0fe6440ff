import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from igenet import harness
from igenet.estimator import condition_number, structural_rank
from igenet.optimizer import (Infeasible, ScheduleProblem, TooLarge, brute_force_oracle, check_schedule,
                              ensure_identifiable, evaluate_schedule, joint_schedule, sinr_hat, solve_p2_sca, solve_p3,
                              surrogate)


def problem(links, nodes, nb, required, gamma, g_comm, g_ub, noise=1.0, p_min=0.0, p_max=1200.0):
    return ScheduleProblem(links=tuple(links), num_nodes=nodes, n_blocks=nb, required=required, gamma=gamma,
                           g_comm=g_comm, g_ub=g_ub, noise=noise, p_min=p_min, p_max=p_max)


def dense_instance(seed, nodes=6):
    cfg = harness.scenario_for(harness.load_config(), "convergence")
    inst = harness.build_instance(cfg, seed, num_nodes=nodes)
    prior = harness.bootstrap_prior(cfg, inst)
    return cfg, inst, harness.make_problem(cfg, inst, prior)


@pytest.fixture(scope="module")
def dense():
    cfg, inst, prob = dense_instance(3)
    return prob, joint_schedule(prob, alpha=0.2, seed=3)


# ---------------------------------------------------------------- SINR and surrogate


def test_sinr_hat_arithmetic():
    assert sinr_hat(np.array([[2.0]]), None, [3.0], 0, 1.0) == pytest.approx(6.0)
    g = np.array([[2.0, 0.5], [0.25, 4.0]])
    # delta = 0: plain SINR with the estimated gains; g is [source, receiver]
    assert sinr_hat(g, np.zeros((2, 2)), [3.0, 2.0], 1, 1.0) == pytest.approx(4.0 * 2.0 / (1.0 + 0.5 * 3.0))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), L=st.integers(2, 6))
def test_sinr_hat_conservative(seed, L):
    rng = np.random.default_rng(seed)
    g = rng.uniform(1e-9, 1e-6, (L, L))
    d = rng.uniform(0, 1e-7, (L, L))
    p = rng.uniform(800, 1200, L)
    for k in range(L):
        assert sinr_hat(g, d, p, k, 1e-9) <= sinr_hat(g, None, p, k, 1e-9)


def test_surrogate_inequality_on_random_triples():
    rng = np.random.default_rng(0)
    d, a, phi = (10 ** rng.uniform(-4, 4, 100_000) for _ in range(3))
    assert np.all(d * a <= surrogate(d, a, phi) * (1 + 1e-12))
    assert np.allclose(surrogate(d, a, a / d), d * a, rtol=1e-12)


@settings(max_examples=200)
@given(d=st.floats(1e-6, 1e6), a=st.floats(1e-6, 1e6), phi=st.floats(1e-6, 1e6))
def test_surrogate_property(d, a, phi):
    assert d * a <= surrogate(d, a, phi) * (1 + 1e-12)


# ---------------------------------------------------------------- checker


def test_checker_flags_each_constraint():
    p = problem([(0, 1), (1, 0)], 2, 2, [1, 1], [1.0, 1.0], [1.0, 1.0], np.zeros((2, 2)), p_min=10.0, p_max=100.0)
    good = check_schedule(p, [[1, 0], [0, 1]], [[50.0, 0], [0, 50.0]])
    assert good["ok"]
    assert check_schedule(p, [[1, 0], [0, 0]], [[50.0, 0], [0, 0]])["C4"] == 1.0
    assert check_schedule(p, [[1, 0], [0, 1]], [[5.0, 0], [0, 50.0]])["C6"] == pytest.approx(0.05)
    assert check_schedule(p, [[1, 0], [0, 1]], [[150.0, 0], [0, 50.0]])["C7"] == pytest.approx(0.5)
    assert check_schedule(p, [[1, 0], [0, 1]], [[50.0, 3.0], [0, 50.0]])["C7"] == pytest.approx(0.03)
    q = problem([(0, 1), (0, 2), (2, 1)], 3, 1, [1, 1, 1], [1.0] * 3, [1.0] * 3, np.zeros((3, 3)))
    r = check_schedule(q, [[1, 1, 1]], [[1.0, 1.0, 1.0]])
    assert r["C1"] == 1.0 and r["C2"] == 1.0 and not r["ok"]
    s = problem([(0, 1), (2, 3)], 4, 1, [1, 1], [2.0, 2.0], [1.0, 1.0], np.array([[0, 1.0], [1.0, 0]]))
    assert check_schedule(s, [[1, 1]], [[1.0, 1.0]])["C5"] == pytest.approx(1 - 0.5 / 2.0)


# ---------------------------------------------------------------- stage one


def test_two_independent_links_closed_form():
    g = np.array([2e-6, 5e-7])
    gamma = np.array([10.0, 30.0])
    W = 1e-9
    p = problem([(0, 1), (2, 3)], 4, 2, [1, 1], gamma, g, np.zeros((2, 2)), noise=W)
    s = solve_p2_sca(p, seed=1)
    assert np.array_equal(s.delta.sum(axis=0), [1, 1])
    active = s.powers[s.delta > 0].reshape(-1)
    want = (gamma * W / g)[np.nonzero(s.delta)[1]]
    assert np.allclose(active, want, rtol=1e-5)
    assert s.report["ok"]


def test_demand_beyond_period_is_infeasible():
    p = problem([(0, 1)], 2, 2, [3], [1.0], [1.0], np.zeros((1, 1)))
    with pytest.raises(Infeasible):
        solve_p2_sca(p)


def test_unreachable_threshold_is_infeasible():
    p = problem([(0, 1)], 2, 2, [1], [1e6], [1e-12], np.zeros((1, 1)), noise=1.0)
    with pytest.raises(Infeasible):
        solve_p2_sca(p)


def test_problem_validation():
    with pytest.raises(ValueError):
        problem([(0, 1)], 2, 1, [1], [0.0], [1.0], np.zeros((1, 1)))
    with pytest.raises(ValueError):
        problem([(0, 1)], 2, 1, [1], [1.0], [1.0], -np.ones((1, 1)))
    with pytest.raises(ValueError):
        problem([(0, 1)], 2, 1, [1], [1.0], [1.0], np.zeros((1, 1)), p_min=2.0, p_max=1.0)


# ---------------------------------------------------------------- oracle


def test_oracle_single_link():
    p = problem([(0, 1)], 2, 1, [1], [4.0], [2e-6], np.zeros((1, 1)), noise=1e-9)
    delta, powers, obj = brute_force_oracle(p)
    assert delta.tolist() == [[1]]
    assert obj == pytest.approx(4.0 * 1e-9 / 2e-6)


def test_oracle_independent_pair():
    g, gamma, W = np.array([1e-6, 4e-6]), np.array([5.0, 20.0]), 2e-9
    p = problem([(0, 1), (2, 3)], 4, 3, [2, 1], gamma, g, np.zeros((2, 2)), noise=W)
    _, _, obj = brute_force_oracle(p)
    assert obj == pytest.approx(2 * 5.0 * W / 1e-6 + 20.0 * W / 4e-6)


def test_oracle_size_limit():
    p = problem([(e, e + 1) for e in range(5)], 6, 5, [1] * 5, [1.0] * 5, [1.0] * 5, np.zeros((5, 5)))
    with pytest.raises(TooLarge):
        brute_force_oracle(p)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_sca_within_five_percent_of_oracle(seed):
    cfg = harness.scenario_for(harness.load_config(), "optimality-gap")
    inst = harness.build_instance(cfg, seed, num_nodes=3)
    prob = harness.make_problem(cfg, inst, harness.bootstrap_prior(cfg, inst))
    s = solve_p2_sca(prob, seed=seed)
    d_or, p_or, oracle = brute_force_oracle(prob)
    assert check_schedule(prob, d_or, p_or)["ok"]
    assert s.report["ok"]
    assert oracle * (1 - 1e-6) <= s.energy <= 1.05 * oracle


# ---------------------------------------------------------------- stage two


def test_checker_passes_on_solver_outputs(dense):
    prob, jr = dense
    assert check_schedule(prob, jr.schedule.delta, jr.schedule.powers)["ok"]
    assert check_schedule(prob, jr.delta, jr.p3.P, tol=1e-5)["ok"]
    assert np.all(jr.delta >= jr.schedule.delta) or jr.added


def test_p3_invariants(dense):
    prob, jr = dense
    r = jr.p3
    e = np.array(r.e_history)
    assert np.all(e >= -1e-12)
    assert np.all(np.diff(e) <= 1e-12 * max(e[0], 1.0))
    assert r.converged and e[-1] < r.tol_e
    assert r.kappa ** 2 <= r.gamma * (1 + 1e-6)
    assert np.linalg.matrix_rank(r.P) == prob.num_links
    assert r.kappa == pytest.approx(condition_number(r.P))
    on = jr.delta > 0
    assert np.all(r.P[~on] == 0)
    assert np.all(r.P[on] >= prob.p_min * (1 - 1e-6)) and np.all(r.P[on] <= prob.p_max * (1 + 1e-6))


def test_joint_is_deterministic(dense):
    prob, jr = dense
    again = joint_schedule(prob, alpha=0.2, seed=3)
    assert np.array_equal(again.delta, jr.delta)
    assert np.allclose(again.p3.P, jr.p3.P, rtol=0, atol=0)
    doc = jr.gap_json(oracle=None)
    assert '"f2"' in doc and '"power_overhead"' in doc


def test_identifiability_repair_reaches_full_rank(dense):
    prob, jr = dense
    assert structural_rank(jr.delta) == prob.num_links
    assert check_schedule(prob, jr.delta, jr.p3.P, tol=1e-5)["C1"] == 0.0
    # a TDMA schedule is already identifiable: nothing to do
    tdma = np.eye(prob.num_links, dtype=int)
    tdma = np.vstack([tdma, np.zeros((prob.n_blocks - prob.num_links, prob.num_links), dtype=int)])
    out, log = ensure_identifiable(prob, tdma)
    assert np.array_equal(out, tdma) and log == []


def _random_feasible_kappa(prob, delta, rng, tries=500):
    for _ in range(tries):
        P = delta * rng.uniform(prob.p_min, prob.p_max, delta.shape)
        if check_schedule(prob, delta, P)["ok"]:
            try:
                return condition_number(P)
            except np.linalg.LinAlgError:
                continue
    return None


def test_p3_kappa_beats_random_feasible():
    ours, rand = [], []
    rng = np.random.default_rng(0)
    for seed in range(5):
        _, _, prob = dense_instance(seed, nodes=5)
        jr = joint_schedule(prob, alpha=0.2, seed=seed)
        k = _random_feasible_kappa(prob, jr.delta, rng)
        if k is not None:
            ours.append(jr.p3.kappa)
            rand.append(k)
    assert len(ours) >= 3
    assert np.median(ours) <= np.median(rand)


def test_power_weight_lowers_overhead():
    _, _, prob = dense_instance(3)
    s = solve_p2_sca(prob, seed=3)
    delta, _ = ensure_identifiable(prob, s.delta)
    f2 = float(np.sum(s.powers))
    from igenet.optimizer import _polish

    base = _polish(prob, delta)
    over = {a: (np.sum(solve_p3(delta, prob, alpha=a, p_star=f2, base_powers=base, seed=3).P) - f2) / f2
            for a in (0.0, 0.5)}
    assert over[0.0] <= over[0.5] + 1e-6


def test_zero_interference_p3_stays_in_bounds():
    L = 3
    p = problem([(0, 1), (2, 3), (4, 5)], 6, 4, [2, 2, 2], [10.0] * L, [1e-6] * L, np.zeros((L, L)), noise=1e-9,
                p_min=800.0)
    jr = joint_schedule(p, alpha=0.2, seed=0)
    on = jr.delta > 0
    assert np.all(jr.p3.P[on] >= 800 * (1 - 1e-6)) and np.all(jr.p3.P[on] <= 1200 * (1 + 1e-6))
    assert np.linalg.matrix_rank(jr.p3.P) == L
    assert check_schedule(p, jr.delta, jr.p3.P, tol=1e-5)["ok"]


# ---------------------------------------------------------------- metrics


def test_evaluate_schedule_trivial():
    g = np.array([[1e-6, 1e-9], [2e-9, 1e-6]])
    P = np.array([[1000.0, 900.0], [0.0, 1100.0]])
    m = evaluate_schedule(P, g, 1e-9, np.array([10.0, 10.0]), powers_without_ige=P)
    assert m["power_overhead"] == 0.0
    assert m["unsatisfied_ratio"] == 0.0
    m2 = evaluate_schedule(P, g, 1e-9, np.array([1e4, 10.0]), powers_without_ige=P / 2)
    assert m2["power_overhead"] == pytest.approx(1.0)
    assert m2["unsatisfied_ratio"] == pytest.approx(0.5)


def test_schedule_from_estimate_is_satisfied_with_exact_gains(dense):
    prob, jr = dense
    true = prob.g_ub.copy()
    np.fill_diagonal(true, prob.g_comm)
    m = evaluate_schedule(jr.schedule.powers, true, prob.noise, prob.gamma)
    assert m["unsatisfied_ratio"] == 0.0
