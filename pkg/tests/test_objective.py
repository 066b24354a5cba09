import numpy as np
import pytest

from engine.errors import ConfigError, InvalidPolicyError
from engine.meanfield import NOParams
from engine.objective import (
    INFEASIBLE_PENALTY,
    Policy,
    SwitchingProblem,
    evaluate,
    legacy_reevaluate,
    running_cost,
    terminal_penalty
)
from engine.stepper import CoarseStepper, LegacyStepper

from .conftest import CO_STATES, NO_STATES


class ExplodingStepper(CoarseStepper):
    def step(self, x, p, T, seed):
        raise AssertionError('stepper must not run for an infeasible policy')


def test_running_cost_hand_value():
    policy = Policy(T=1.0, values=[[6.5]], p_ss=[4.5])
    assert running_cost(policy) == pytest.approx(2.8)


def test_running_cost_vanishes_at_nominal():
    assert running_cost(Policy.constant(0.25, 20, [4.5])) == 0.0


def test_running_cost_discounts_early_deviation():
    T, N = 0.25, 20
    early = np.full((N, 1), 4.5)
    late = early.copy()
    early[0, 0] += 1.0
    late[-1, 0] += 1.0
    cost_early = running_cost(Policy(T=T, values=early, p_ss=[4.5]))
    cost_late = running_cost(Policy(T=T, values=late, p_ss=[4.5]))
    assert cost_early == pytest.approx(T * 0.7)
    assert cost_late == pytest.approx(T * (1 - 0.3 * np.exp(-(N - 1) * T)))
    assert cost_early < cost_late


def test_running_cost_sums_over_parameters():
    policy = Policy(T=0.5, values=[[1.0, 2.0]], p_ss=[0.0, 0.0])
    assert running_cost(policy, decay_amplitude=0.0) == pytest.approx(0.5 * 5.0)


def test_terminal_penalty_from_the_lower_state(no_problem):
    value = terminal_penalty(no_problem.x_start, no_problem)
    assert value == pytest.approx(50 * (1 - np.exp(-0.6095)), abs=5e-3)
    assert value == pytest.approx(22.82, abs=1e-2)


def test_terminal_penalty_zero_inside_the_ball(no_problem):
    assert terminal_penalty(no_problem.x_target, no_problem) == 0.0
    assert terminal_penalty(no_problem.x_target - 0.04, no_problem) == 0.0


def test_terminal_penalty_grows_with_distance_and_stays_bounded(co_problem):
    target = co_problem.x_target
    values = [
        terminal_penalty(target + np.array([-shift, 0.0]), co_problem)
        for shift in (0.1, 0.3, 0.6, 0.9)
    ]
    assert all(a < b for a, b in zip(values, values[1:]))
    assert max(values) < co_problem.w_scale


def test_constant_policy_pays_only_the_terminal_term(no_problem, no_legacy):
    report = evaluate(Policy.constant(0.25, 20, no_problem.p_ss), no_problem, no_legacy)
    assert report.feasible
    assert report.q_part == 0.0
    assert report.total == pytest.approx(22.82, abs=1e-2)
    assert report.total == report.w_part
    assert len(report.rollout.steps) == 20


def test_constant_co_policy_has_no_running_cost(co_problem, co_legacy):
    report = evaluate(Policy.constant(0.5, 10, co_problem.p_ss), co_problem, co_legacy)
    assert report.q_part == 0.0
    assert report.w_part > 0.0
    np.testing.assert_allclose(report.final_state, co_problem.x_start, atol=1e-4)


def test_infeasible_policy_is_penalized_without_simulation(no_params, no_problem):
    values = np.full((4, 1), 4.5)
    values[2, 0] = 23.0
    report = evaluate(Policy(T=0.25, values=values, p_ss=no_problem.p_ss), no_problem, ExplodingStepper(no_params, ['k']))
    assert not report.feasible
    assert report.total == pytest.approx(INFEASIBLE_PENALTY * 4.0)
    assert report.final_state is None
    assert report.to_record()['final_state'] == []


def test_legacy_evaluation_is_deterministic(no_problem):
    values = np.linspace(4.5, 9.0, 20)[:, None]
    policy = Policy(T=0.25, values=values, p_ss=no_problem.p_ss)
    first = legacy_reevaluate(policy, no_problem)
    second = legacy_reevaluate(policy, no_problem)
    assert first.total == second.total
    assert first.q_part > 0


def test_evaluate_rejects_mismatched_policy(no_problem, no_legacy, co_legacy):
    with pytest.raises(InvalidPolicyError):
        evaluate(Policy.constant(0.25, 4, [3.0]), no_problem, no_legacy)
    with pytest.raises(InvalidPolicyError):
        evaluate(Policy.constant(0.25, 4, no_problem.p_ss), no_problem, co_legacy)


@pytest.mark.parametrize('kwargs', [
    {'T': 0.0, 'values': [[1.0]], 'p_ss': [1.0]},
    {'T': 0.1, 'values': np.empty((0, 1)), 'p_ss': [1.0]},
    {'T': 0.1, 'values': [[1.0, 2.0]], 'p_ss': [1.0]},
    {'T': 0.1, 'values': [[np.nan]], 'p_ss': [1.0]},
])
def test_policy_validation(kwargs):
    with pytest.raises(InvalidPolicyError):
        Policy(**kwargs)


def test_policy_value_at_uses_half_open_intervals():
    policy = Policy(T=0.5, values=[[1.0], [2.0], [3.0]], p_ss=[0.0])
    assert policy.t_f == 1.5
    assert policy.value_at(0.0)[0] == 0.0
    assert policy.value_at(0.5)[0] == 1.0
    assert policy.value_at(0.51)[0] == 2.0
    assert policy.value_at(10.0)[0] == 3.0
    np.testing.assert_allclose(policy.midpoints(), [0.25, 0.75, 1.25])


def test_policy_decision_vector_round_trip():
    policy = Policy(T=0.5, values=[[1.0, 2.0], [3.0, 4.0]], p_ss=[0.0, 0.0])
    np.testing.assert_array_equal(policy.decision_vector(), [1.0, 2.0, 3.0, 4.0])
    moved = policy.with_decisions([5.0, 6.0, 7.0, 8.0])
    np.testing.assert_array_equal(moved.values, [[5.0, 6.0], [7.0, 8.0]])
    with pytest.raises(InvalidPolicyError):
        policy.with_decisions([1.0])


def test_problem_defaults_to_the_outer_stable_states(no_problem, co_problem):
    assert no_problem.x_start[0] == pytest.approx(NO_STATES[0], abs=1e-3)
    assert no_problem.x_target[0] == pytest.approx(NO_STATES[2], abs=1e-3)
    np.testing.assert_allclose(co_problem.x_start, CO_STATES[0], atol=1e-4)
    np.testing.assert_allclose(co_problem.x_target, CO_STATES[2], atol=1e-4)
    np.testing.assert_array_equal(no_problem.p_ss, [4.5])
    np.testing.assert_array_equal(no_problem.param_box, [[0.0, 20.0]])


def test_problem_snaps_tabulated_states(co_params):
    problem = SwitchingProblem.from_params(co_params, ['beta'], x_start=CO_STATES[0], x_target=CO_STATES[2])
    assert np.max(np.abs(problem.x_start - np.array(CO_STATES[0]))) < 1e-3
    with pytest.raises(ConfigError):
        SwitchingProblem.from_params(co_params, ['beta'], x_start=[0.3, 0.3])


def test_problem_rejects_bad_settings(no_params, co_params):
    with pytest.raises(ConfigError):
        SwitchingProblem.from_params(no_params, ['beta'])
    with pytest.raises(ConfigError):
        SwitchingProblem.from_params(no_params, ['k'], epsilon=0.0)
    with pytest.raises(ConfigError):
        SwitchingProblem.from_params(no_params, ['k'], param_box=[[5.0, 1.0]])
    with pytest.raises(ConfigError):
        SwitchingProblem(params=co_params, manipulated=['beta'], x_start=[0.3, 0.3], x_target=CO_STATES[2])


def test_monostable_problem_needs_explicit_states():
    with pytest.raises(ConfigError):
        SwitchingProblem.from_params(NOParams(alpha=1.0, gamma=0.01, k=0.0), ['k'])


def test_manipulating_two_parameters(co_params):
    problem = SwitchingProblem.from_params(co_params, ['alpha', 'beta'])
    np.testing.assert_array_equal(problem.p_ss, [1.6, 3.5])
    report = evaluate(Policy.constant(0.5, 4, problem.p_ss), problem, LegacyStepper(co_params, ['alpha', 'beta']))
    assert report.q_part == 0.0
