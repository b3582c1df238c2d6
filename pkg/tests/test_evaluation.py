import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentac import EvalReport, evaluate, run_trials, wilson_interval
from latentac.envs import chain_fixture, greedy_policy, value_iteration
from latentac.evaluation import tabular_table_policy


class TestWilsonInterval:
    def test_published_interval_large_n(self):
        lo, hi = wilson_interval(1396, 2000)   # 69.8%
        assert lo == pytest.approx(0.678, abs=1e-3)
        assert hi == pytest.approx(0.718, abs=1e-3)

    def test_published_interval_small_n(self):
        lo, hi = wilson_interval(214, 400)     # 53.5%
        assert lo == pytest.approx(0.486, abs=1e-3)
        assert hi == pytest.approx(0.583, abs=1e-3)

    def test_zero_successes_lower_bound_zero(self):
        lo, hi = wilson_interval(0, 50)
        assert lo == 0.0
        assert hi > 0.0

    def test_all_successes_upper_bound_one(self):
        lo, hi = wilson_interval(50, 50)
        assert hi == 1.0
        assert lo < 1.0

    @given(st.integers(1, 500), st.data())
    @settings(max_examples=80, deadline=None)
    def test_contains_point_estimate_and_stays_in_unit_interval(self, n, data):
        k = data.draw(st.integers(0, n))
        lo, hi = wilson_interval(k, n)
        assert 0.0 <= lo <= k / n <= hi <= 1.0

    def test_argument_validation(self):
        with pytest.raises(ValueError):
            wilson_interval(5, 0)
        with pytest.raises(ValueError):
            wilson_interval(7, 5)

    def test_alpha_parameter_widens_interval(self):
        narrow = wilson_interval(60, 100, alpha_w=0.32)
        wide = wilson_interval(60, 100, alpha_w=0.01)
        assert wide[0] < narrow[0] and wide[1] > narrow[1]


class TestEvaluate:
    def test_zero_success_policy(self):
        fx = chain_fixture()
        never_right = np.zeros((fx.mdp.n_states, 2))
        never_right[:, 0] = 1.0
        report = evaluate(tabular_table_policy(never_right), fx.mdp, 40, seed=0)
        assert report.rate == 0.0
        assert report.lower == 0.0
        assert report.n_trials == 40

    def test_optimal_policy_always_succeeds(self):
        fx = chain_fixture()
        optimal = greedy_policy(value_iteration(fx.mdp))
        report = evaluate(tabular_table_policy(optimal), fx.mdp, 40, seed=0)
        assert report.rate == 1.0
        assert report.upper == 1.0
        assert report.mean_return == pytest.approx(1.0)

    def test_deterministic_given_seed(self):
        fx = chain_fixture()
        policy = tabular_table_policy(fx.behavior)
        a = evaluate(policy, fx.mdp, 100, seed=5)
        b = evaluate(policy, fx.mdp, 100, seed=5)
        assert a == b
        c = evaluate(policy, fx.mdp, 100, seed=6)
        assert a.successes != c.successes or a.mean_return != c.mean_return

    def test_normalized_return(self):
        fx = chain_fixture()
        optimal = greedy_policy(value_iteration(fx.mdp))
        report = evaluate(tabular_table_policy(optimal), fx.mdp, 10, seed=1,
                          expert_return=2.0)
        assert report.normalized_return == pytest.approx(0.5)

    def test_report_serializes(self):
        report = EvalReport(task_id="t", n_trials=10, successes=5, rate=0.5,
                            lower=0.2, upper=0.8, mean_return=0.5)
        d = report.to_dict()
        assert d["task_id"] == "t" and d["successes"] == 5

    def test_trial_count_validated(self):
        fx = chain_fixture()
        with pytest.raises(ValueError):
            evaluate(tabular_table_policy(fx.behavior), fx.mdp, 0, seed=0)


class TestRunTrials:
    def test_episodes_returned_match_outcomes(self):
        fx = chain_fixture()
        successes, returns, episodes = run_trials(
            tabular_table_policy(fx.behavior), fx.mdp, 30, seed=2)
        assert len(episodes) == 30
        for ok, ret, ep in zip(successes, returns, episodes):
            assert ep.success == ok
            assert ep.rewards.sum() == pytest.approx(ret, abs=1e-6)

    def test_greedy_mode_deterministic_in_deterministic_mdp(self):
        fx = chain_fixture()
        policy = tabular_table_policy(fx.behavior)  # argmax ties to action 0
        successes, returns, episodes = run_trials(policy, fx.mdp, 5, seed=3,
                                                  greedy=True)
        for ep in episodes[1:]:
            np.testing.assert_array_equal(ep.actions, episodes[0].actions)
