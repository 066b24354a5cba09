import logging

import numpy as np
import pytest
from pydantic import ValidationError

from engine.kmc import lift, restrict
from engine.meanfield import NOParams, integrate
from engine.objective import Policy
from engine.stepper import (
    EnsembleConfig,
    KMCStepper,
    coarse_step,
    ensemble_statistics,
    legacy_step,
    rollout
)


def test_ensemble_config_bounds():
    with pytest.raises(ValidationError):
        EnsembleConfig(m_replicas=50, m_min=100, m_max=800)
    with pytest.raises(ValidationError):
        EnsembleConfig(d_max=0.0)
    with pytest.raises(ValidationError):
        EnsembleConfig(n_sites=0)


def test_ensemble_statistics_relative_error():
    samples = np.array([[0.1, 0.0], [0.3, 0.0], [0.2, 0.0]])
    mean, d = ensemble_statistics(samples)
    np.testing.assert_allclose(mean, [0.2, 0.0])
    assert d[0] == pytest.approx(0.1 / np.sqrt(3) / 0.2)
    assert d[1] == 0.0


def test_ensemble_statistics_near_zero_mean_uses_plain_error():
    samples = np.array([[1e-12], [-1e-12]])
    mean, d = ensemble_statistics(samples)
    assert d[0] == pytest.approx(np.std(samples, ddof=1) / np.sqrt(2))


def test_frozen_dynamics_reproduce_the_lift():
    cfg = EnsembleConfig(n_sites=10_000, m_replicas=20, m_min=10, m_max=40, d_max=0.01)
    x = np.array([0.3])
    result = coarse_step(x, NOParams(alpha=0.0, gamma=0.0, k=0.0), 1.0, cfg, seed=5)
    np.testing.assert_array_equal(result.mean, restrict(lift(x, 10_000)))
    np.testing.assert_array_equal(result.d, [0.0])
    assert result.m_used == 20


def test_vacuous_variance_bound_never_adapts(co_params):
    cfg = EnsembleConfig(n_sites=400, m_replicas=8, m_min=4, m_max=64, d_max=1e6)
    result = coarse_step([0.3, 0.3], co_params, 0.25, cfg, seed=1)
    assert result.m_used == 8


def test_adaptive_protocol_stops_at_m_max(no_params, caplog):
    cfg = EnsembleConfig(n_sites=100, m_replicas=4, m_min=2, m_max=16, d_max=1e-6)
    with caplog.at_level(logging.WARNING, logger='engine.stepper'):
        result = coarse_step([0.3301], no_params, 0.25, cfg, seed=9, keep_samples=True)
    assert result.m_used == 16
    assert result.samples.shape == (16, 1)
    assert 'still above d_max' in caplog.text


def test_adaptive_growth_reuses_replicas(no_params):
    small = EnsembleConfig(n_sites=100, m_replicas=4, m_min=4, m_max=4)
    grown = EnsembleConfig(n_sites=100, m_replicas=4, m_min=2, m_max=16, d_max=1e-6)
    first = coarse_step([0.3301], no_params, 0.25, small, seed=9, keep_samples=True)
    second = coarse_step([0.3301], no_params, 0.25, grown, seed=9, keep_samples=True)
    np.testing.assert_array_equal(second.samples[:4], first.samples)


def test_protocol_postcondition_holds_on_random_calls(no_params, co_params):
    rng = np.random.default_rng(17)
    for call in range(40):
        m_min = int(rng.integers(1, 5))
        m_replicas = m_min + int(rng.integers(0, 4))
        m_max = m_replicas + int(rng.integers(0, 12))
        cfg = EnsembleConfig(
            n_sites=int(rng.integers(20, 200)),
            m_replicas=m_replicas,
            m_min=m_min,
            m_max=m_max,
            d_max=float(10 ** rng.uniform(-3, -0.5))
        )
        if call % 2:
            params, x = co_params, rng.dirichlet([1.0, 1.0, 1.0])[:2]
        else:
            params, x = no_params, rng.uniform(0, 1, 1)
        result = coarse_step(x, params, float(rng.uniform(0.05, 0.5)), cfg, seed=call)
        assert result.d.max() <= cfg.d_max or result.m_used == cfg.m_max
        assert cfg.m_min <= result.m_used <= cfg.m_max


def test_thread_count_does_not_change_results(co_params):
    cfg = EnsembleConfig(n_sites=900, m_replicas=12, m_min=6, m_max=48, d_max=0.002)
    serial = coarse_step([0.2, 0.4], co_params, 0.3, cfg, seed=21, threads=1)
    threaded = coarse_step([0.2, 0.4], co_params, 0.3, cfg, seed=21, threads=4)
    np.testing.assert_array_equal(serial.mean, threaded.mean)
    np.testing.assert_array_equal(serial.d, threaded.d)
    assert serial.m_used == threaded.m_used


def test_variance_scales_with_inverse_root_of_replicas(no_params):
    few = EnsembleConfig(n_sites=100 ** 2, m_replicas=100, m_min=100, m_max=100)
    many = EnsembleConfig(n_sites=100 ** 2, m_replicas=400, m_min=400, m_max=400)
    d_few = coarse_step([0.3301], no_params, 0.25, few, seed=4).d[0]
    d_many = coarse_step([0.3301], no_params, 0.25, many, seed=4).d[0]
    assert d_many / d_few == pytest.approx(0.5, rel=0.25)


def test_variance_scales_with_inverse_root_of_lattice_size(no_params):
    small = EnsembleConfig(n_sites=50 ** 2, m_replicas=200)
    large = EnsembleConfig(n_sites=200 ** 2, m_replicas=200)
    d_small = coarse_step([0.3301], no_params, 0.25, small, seed=4).d[0]
    d_large = coarse_step([0.3301], no_params, 0.25, large, seed=4).d[0]
    # sqrt(2500 / 40000)
    assert d_large / d_small == pytest.approx(0.25, rel=0.25)


def test_legacy_step_is_stationary_on_the_upper_state(no_params, no_problem):
    result = legacy_step(no_problem.x_target, no_params, 0.25)
    assert result.mean[0] == pytest.approx(0.9896, abs=1e-3)
    assert result.mean[0] == pytest.approx(no_problem.x_target[0], abs=1e-6)
    assert result.m_used == 1
    np.testing.assert_array_equal(result.d, [0.0])


def test_legacy_step_tiny_interval(no_params):
    result = legacy_step([0.5], no_params, 1e-12)
    assert result.mean[0] == pytest.approx(0.5, abs=1e-10)


def test_legacy_step_is_the_integrator(co_params):
    result = legacy_step([0.5, 0.3], co_params, 0.5)
    np.testing.assert_array_equal(result.mean, integrate(co_params, [0.5, 0.3], 0.5).final)


def test_stepper_applies_the_decision(co_params, co_legacy):
    assert co_legacy.parameters_at([7.0]) == co_params.model_copy(update={'beta': 7.0})
    with pytest.raises(ValueError):
        KMCStepper(co_params, ['k'], EnsembleConfig())


def test_constant_rollout_stays_at_start(no_problem, no_legacy):
    policy = Policy.constant(0.25, 20, no_problem.p_ss)
    path = rollout(no_problem.x_start, policy, no_legacy, seed=0)
    assert len(path.steps) == 20
    assert path.final[0] == pytest.approx(no_problem.x_start[0], abs=1e-4)


def test_single_interval_rollout_is_one_step(co_problem, co_legacy):
    policy = Policy(T=0.5, values=[[5.0]], p_ss=co_problem.p_ss)
    path = rollout(co_problem.x_start, policy, co_legacy, seed=0)
    step = co_legacy.step(co_problem.x_start, [5.0], 0.5, seed=0)
    np.testing.assert_array_equal(path.final, step.mean)


def test_rollout_frame_layout(co_problem, co_legacy):
    policy = Policy.constant(0.5, 3, co_problem.p_ss)
    frame = rollout(co_problem.x_start, policy, co_legacy, seed=0).to_frame(co_problem.mechanism, ['beta'])
    assert list(frame.columns) == ['t', 'beta', 'theta_a', 'theta_b', 'd_theta_a', 'd_theta_b', 'm_used']
    np.testing.assert_allclose(frame['t'], [0.0, 0.5, 1.0, 1.5])
    assert len(frame) == 4


def test_kmc_rollout_is_reproducible(co_problem, co_params):
    stepper = KMCStepper(co_params, ['beta'], EnsembleConfig(n_sites=400, m_replicas=6, m_min=6, m_max=6))
    policy = Policy(T=0.25, values=[[2.0], [6.0]], p_ss=co_problem.p_ss)
    first = rollout(co_problem.x_start, policy, stepper, seed=3)
    second = rollout(co_problem.x_start, policy, stepper, seed=3)
    np.testing.assert_array_equal(first.coverages(), second.coverages())
