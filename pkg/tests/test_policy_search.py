import logging

import numpy as np
import pytest

from engine.errors import IncompatibleHorizonError, InvalidPolicyError
from engine.meanfield import COParams, NOParams, trace_separatrix
from engine.objective import Policy, SwitchingProblem, evaluate, legacy_reevaluate
from engine.optimizers import SearchSpec, hooke_jeeves, implicit_filtering, nelder_mead
from engine.policy_search import (
    SearchStage,
    SearchTemplate,
    check_scale_noise,
    multigrid_search,
    optimize_policy,
    refine_timestep,
    restart_until_stable,
    staged_search,
    switching_warm_start
)
from engine.seeding import derive_seed
from engine.stepper import EnsembleConfig, KMCStepper, LegacyStepper

from .conftest import CO_STATES, NO_STATES

LADDER = (1.0, 0.5, 0.25, 0.125)


def bowl(x):
    return float(np.sum(np.asarray(x) ** 2))


def test_restart_stops_after_two_passes_on_deterministic_bowl():
    trace = restart_until_stable(hooke_jeeves, SearchSpec(x0=[1.0, 1.0], objective=bowl, scales=LADDER))
    assert trace.passes == 2
    assert not trace.cap_hit
    assert trace.best_f == 0.0
    assert [r.iteration for r in trace.iterations] == list(range(len(trace.iterations)))


def test_restart_shares_the_budget():
    calls = []

    def f(x):
        calls.append(1)
        return bowl(x - 3.3)

    trace = restart_until_stable(hooke_jeeves, SearchSpec(x0=[0.0], objective=f, scales=LADDER, max_evals=12))
    assert trace.eval_count == len(calls) <= 12
    assert trace.budget_exhausted


def test_restart_terminates_under_additive_noise():
    sigma = 0.01
    terminated = 0
    for draw in range(100):
        rng = np.random.default_rng(draw)

        def noisy(x):
            return bowl(x) + sigma * rng.standard_normal()

        spec = SearchSpec(x0=[1.0, -1.0], objective=noisy, scales=LADDER)
        trace = restart_until_stable(hooke_jeeves, spec, agreement_tol=3 * sigma)
        terminated += not trace.cap_hit
    assert terminated >= 95


def test_restart_rejects_bad_tolerance():
    with pytest.raises(ValueError):
        restart_until_stable(hooke_jeeves, SearchSpec(x0=[1.0], objective=bowl), agreement_tol=0.0)


def test_refine_constant_policy_stays_constant():
    refined = refine_timestep(Policy.constant(0.5, 10, [3.5]), 0.1)
    assert refined.N == 50
    assert refined.t_f == pytest.approx(5.0)
    np.testing.assert_allclose(refined.values, 3.5, rtol=0, atol=1e-12)


def test_refine_two_equal_values():
    refined = refine_timestep(Policy(T=0.5, values=[[2.0], [2.0]], p_ss=[1.0]), 0.1)
    assert refined.N == 10
    np.testing.assert_allclose(refined.values, 2.0, atol=1e-12)


def test_refine_single_interval_is_tiled():
    refined = refine_timestep(Policy(T=1.0, values=[[4.0, 5.0]], p_ss=[1.0, 1.0]), 0.25)
    np.testing.assert_array_equal(refined.values, np.tile([4.0, 5.0], (4, 1)))


def test_refine_reproduces_a_linear_profile():
    policy = Policy.constant(0.5, 10, [0.0])
    policy = policy.with_decisions(2.0 * policy.midpoints() + 1.0)
    refined = refine_timestep(policy, 0.1)
    np.testing.assert_allclose(refined.values[:, 0], 2.0 * refined.midpoints() + 1.0, atol=1e-9)


def test_refine_rejects_bad_interval_lengths():
    policy = Policy.constant(0.5, 10, [1.0])
    with pytest.raises(IncompatibleHorizonError):
        refine_timestep(policy, 0.3)
    with pytest.raises(InvalidPolicyError):
        refine_timestep(policy, 0.5)
    with pytest.raises(InvalidPolicyError):
        refine_timestep(policy, 1.0)


def test_refine_clips_to_the_box():
    policy = Policy(T=0.5, values=[[0.0], [20.0], [0.0], [20.0]], p_ss=[1.0])
    unclipped = refine_timestep(policy, 0.1)
    assert unclipped.values.max() > 20.0 or unclipped.values.min() < 0.0
    clipped = refine_timestep(policy, 0.1, param_box=[[0.0, 20.0]])
    assert clipped.values.max() <= 20.0
    assert clipped.values.min() >= 0.0


def test_single_entry_multigrid_is_plain_optimization(co_problem, co_legacy):
    template = SearchTemplate(max_evals=40)
    result = multigrid_search(co_problem, co_legacy, [0.5], template, horizon=5.0, seed=7)
    assert [stage.label for stage in result.stages] == ['stage-0']
    plain = optimize_policy(
        co_problem, co_legacy, Policy.constant(0.5, 10, co_problem.p_ss), template, result.final.seed
    )
    np.testing.assert_array_equal(result.final.policy.values, plain.policy.values)
    assert result.final.trace.best_f == plain.trace.best_f


def test_multigrid_stage_structure(co_problem, co_legacy):
    template = SearchTemplate(max_evals=25)
    result = multigrid_search(co_problem, co_legacy, [0.5, 0.25], template, horizon=5.0, seed=1)
    assert [stage.label for stage in result.stages] == ['stage-0', 'stage-1', 'second-pass']
    assert [stage.T for stage in result.stages] == [0.5, 0.25, 0.25]
    assert [stage.policy.N for stage in result.stages] == [10, 20, 20]
    assert len({stage.seed for stage in result.stages}) == 3
    for stage in result.stages:
        assert stage.trace.eval_count <= 25


def test_multigrid_rejects_bad_schedules(co_problem, co_legacy):
    with pytest.raises(ValueError):
        multigrid_search(co_problem, co_legacy, [0.25, 0.5], SearchTemplate(), horizon=5.0)
    with pytest.raises(IncompatibleHorizonError):
        multigrid_search(co_problem, co_legacy, [0.5, 0.3], SearchTemplate(), horizon=5.0)
    with pytest.raises(ValueError):
        multigrid_search(co_problem, co_legacy, [0.5], SearchTemplate())


def test_noise_check_passes_for_resolved_scales():
    def objective(x, seed):
        return bowl(x) + 1e-6 * np.random.default_rng(seed).standard_normal()

    report = check_scale_noise(objective, [1.0], [1.0, 0.5])
    assert report.resolved
    assert report.smallest_scale == 0.5
    assert report.scale_change == pytest.approx(1.0, abs=1e-5)


def test_noise_check_warns_below_the_noise_floor(caplog):
    def objective(x, seed):
        return bowl(x) + np.random.default_rng(seed).standard_normal()

    with caplog.at_level(logging.WARNING, logger='engine.policy_search'):
        report = check_scale_noise(objective, [0.0], [0.01])
    assert not report.resolved
    assert report.sigma > 0
    assert 'noise sigma' in caplog.text


def test_staged_search_never_gets_worse(no_problem, no_params):
    stepper = LegacyStepper(no_params, ['k'])
    stages = [SearchStage(stepper, (1.0, 0.5), 30), SearchStage(stepper, (0.5, 0.25), 30)]
    start = Policy.constant(0.5, 10, no_problem.p_ss)
    results = staged_search(no_problem, stages, start, SearchTemplate(), seed=2)
    assert [r.label for r in results] == ['stage-0', 'stage-1']
    assert results[1].trace.best_f <= results[0].trace.best_f
    assert results[0].trace.best_f <= legacy_reevaluate(start, no_problem).total


def test_switching_warm_start_crosses_into_the_target_basin(co_problem):
    start = switching_warm_start(co_problem, 0.5, 10)
    report = legacy_reevaluate(start, co_problem)
    constant = legacy_reevaluate(Policy.constant(0.5, 10, co_problem.p_ss), co_problem)
    assert report.w_part == 0.0
    assert report.total < constant.total
    # beta held at the lower box edge for a prefix, nominal after
    held = np.flatnonzero(start.values[:, 0] == 0.0)
    assert held.size > 0
    np.testing.assert_array_equal(held, np.arange(held.size))
    np.testing.assert_array_equal(start.values[held.size:, 0], co_problem.p_ss[0])


def test_switching_warm_start_picks_the_cheapest_prefix(co_problem):
    start = switching_warm_start(co_problem, 0.5, 10)
    n = int(np.sum(start.values[:, 0] == 0.0))
    best = legacy_reevaluate(start, co_problem).total
    for k in range(11):
        values = np.full((10, 1), co_problem.p_ss[0])
        values[:k] = 0.0
        assert legacy_reevaluate(Policy(T=0.5, values=values, p_ss=co_problem.p_ss), co_problem).total >= best
    assert 0 < n < 10


def test_switching_warm_start_honours_an_explicit_value(co_problem):
    start = switching_warm_start(co_problem, 0.5, 10, value=[1.0])
    assert set(np.unique(start.values)) <= {1.0, co_problem.p_ss[0]}


def _problem(params, name):
    return SwitchingProblem.from_params(params, [name]), LegacyStepper(params, [name])


@pytest.fixture(scope='module')
def no_legacy_search():
    problem, stepper = _problem(NOParams(alpha=1.0, gamma=0.01, k=4.5), 'k')
    template = SearchTemplate(max_evals=20_000, restarts=5)
    start = Policy.constant(0.25, 20, problem.p_ss)
    result = optimize_policy(problem, stepper, start, template, seed=20230417)
    return problem, result


@pytest.fixture(scope='module')
def co_multigrid_run():
    problem, stepper = _problem(COParams(alpha=1.6, beta=3.5, gamma=0.04, k_r=1.0), 'beta')
    template = SearchTemplate(max_evals=6_000, restarts=3)
    start = switching_warm_start(problem, 0.5, 10)
    result = multigrid_search(problem, stepper, [0.5, 0.25, 0.1], template, initial_policy=start, seed=20230417)
    return problem, start, result


@pytest.mark.slow
def test_no_legacy_search_reaches_reference_cost(no_legacy_search):
    problem, result = no_legacy_search
    report = legacy_reevaluate(result.policy, problem)
    assert report.total <= 10.50
    # the minimiser stops just short of the epsilon ball: W > 0 but the total beats the W = 0 reference
    assert report.total < 10.3709
    assert report.final_state[0] > NO_STATES[1]
    # the switch goes through the unstable middle state
    assert report.rollout.coverages()[:, 0].max() > NO_STATES[1]


@pytest.mark.slow
def test_kmc_no_search_agrees_with_legacy_search(no_legacy_search):
    problem, legacy = no_legacy_search
    stepper = KMCStepper(problem.params, ['k'], EnsembleConfig(n_sites=10_000, m_replicas=200), threads=4)
    template = SearchTemplate(scales=(0.5, 0.25, 0.125), max_evals=600)
    result = optimize_policy(problem, stepper, legacy.policy, template, seed=11)
    kmc_total = legacy_reevaluate(result.policy, problem).total
    legacy_total = legacy_reevaluate(legacy.policy, problem).total
    assert abs(kmc_total - legacy_total) <= 0.03 * legacy_total


@pytest.mark.slow
def test_implicit_filtering_on_adaptive_kmc_no(no_legacy_search):
    problem, legacy = no_legacy_search
    ensemble = EnsembleConfig(n_sites=126 ** 2, m_replicas=252, m_min=126, m_max=1008, d_max=0.005)
    stepper = KMCStepper(problem.params, ['k'], ensemble, threads=4)
    template = SearchTemplate(optimizer=implicit_filtering, scales=(1.0, 0.5, 0.25, 0.125), max_evals=300)
    result = optimize_policy(problem, stepper, legacy.policy, template, seed=5)
    assert legacy_reevaluate(result.policy, problem).total <= 10.80


@pytest.mark.slow
def test_co_multigrid_reaches_reference_cost(co_multigrid_run):
    problem, start, result = co_multigrid_run
    assert [stage.label for stage in result.stages] == ['stage-0', 'stage-1', 'stage-2', 'second-pass']
    totals = [legacy_reevaluate(stage.policy, problem).total for stage in result.stages]
    assert totals[-1] <= 25.1
    assert totals[0] <= legacy_reevaluate(start, problem).total
    # spline resampling may cost a little at each refinement
    for before, after in zip(totals, totals[1:]):
        assert after <= 1.02 * before
    assert result.stages[-1].trace.best_f <= result.stages[-2].trace.best_f


@pytest.mark.slow
def test_co_multigrid_policy_crosses_the_separatrix(co_multigrid_run, co_params):
    problem, _, result = co_multigrid_run
    path = legacy_reevaluate(result.final.policy, problem).rollout.coverages()
    separatrix = trace_separatrix(co_params)
    assert separatrix.side(path[0]) != separatrix.side(path[-1])
    assert separatrix.basin_of(path[-1]).state == pytest.approx(CO_STATES[2], abs=1e-3)


@pytest.mark.slow
def test_co_optimum_spread_over_kmc_repeats(co_multigrid_run):
    problem, _, result = co_multigrid_run
    stepper = KMCStepper(problem.params, ['beta'], EnsembleConfig(n_sites=10_000, m_replicas=200), threads=4)
    totals = [evaluate(result.final.policy, problem, stepper, derive_seed(7, 'repeat', r)).total for r in range(10)]
    assert 0.005 < np.std(totals, ddof=1) < 0.1


@pytest.mark.slow
def test_nelder_mead_matches_hooke_jeeves_on_co_legacy(co_problem, co_legacy):
    start = switching_warm_start(co_problem, 0.5, 10)
    hj = optimize_policy(co_problem, co_legacy, start, SearchTemplate(max_evals=10_000, restarts=3), seed=1)
    nm = optimize_policy(
        co_problem, co_legacy, start,
        SearchTemplate(optimizer=nelder_mead, scales=(1.0, 0.01), max_evals=10_000, restarts=3),
        seed=1
    )
    assert nm.trace.best_f == pytest.approx(hj.trace.best_f, rel=0.01)
