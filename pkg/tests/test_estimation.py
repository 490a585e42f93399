import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from remsched import ConvergenceError, ProcessModel, ValidationError, aoi_error_trace, reward
from remsched.channel import generate_random_system
from remsched.estimation import AoIClampWarning, kalman_cycle, steady_state_covariance

from conftest import scalar_process


def scalar_riccati(a, w, v):
    # prior X solves X^2 + (v - a^2 v - w) X - w v = 0; posterior = X v / (X + v)
    b = v - a * a * v - w
    X = (-b + math.sqrt(b * b + 4 * w * v)) / 2
    return X * v / (X + v)


def test_scalar_fixed_point_matches_closed_form():
    p = scalar_process(1.3, 1.0, 1.0)
    assert p.Pbar[0, 0] == pytest.approx(scalar_riccati(1.3, 1.0, 1.0), abs=1e-10)
    assert p.Pbar[0, 0] == pytest.approx(0.6829631808981179, abs=1e-10)


def test_mse_table_scalar_values():
    p = scalar_process(1.3, tau_max=3)
    P = scalar_riccati(1.3, 1.0, 1.0)
    f1 = 1.69 * P + 1
    np.testing.assert_allclose(p.mse_table.values, [f1, 1.69 * f1 + 1, 1.69 * (1.69 * f1 + 1) + 1],
                               rtol=1e-9)
    assert aoi_error_trace(p, 2) == pytest.approx(4.640611140963115, rel=1e-10)


def test_clamp_warning_past_table_end():
    p = scalar_process(tau_max=3)
    with pytest.warns(AoIClampWarning):
        assert aoi_error_trace(p, 7) == p.mse_table.values[-1]


def test_rewards_for_each_kind():
    procs = [scalar_process(1.3, tau_max=4), scalar_process(1.1, tau_max=4)]
    m1 = procs[0].mse_table.values[1]
    m2 = procs[1].mse_table.values[0]
    assert reward(procs, [2, 1], "sum_mse") == pytest.approx(-(m1 + m2))
    assert reward(procs, [2, 1], "sum_aoi") == -3.0
    assert reward(procs, [2, 1], "product_mse") == pytest.approx(-m1 * m2)


@pytest.mark.parametrize("bad", [[0, 1], [5, 1], [1]])
def test_reward_rejects_out_of_range_aoi(bad):
    procs = [scalar_process(tau_max=4), scalar_process(tau_max=4)]
    with pytest.raises(ValidationError):
        reward(procs, bad)


def test_reward_rejects_unknown_kind():
    with pytest.raises(ValidationError):
        reward([scalar_process()], [1], "max_mse")


def test_stable_process_rejected():
    with pytest.raises(ValidationError, match="unstable"):
        ProcessModel.from_matrices([[0.9]], [[1.0]], [[1.0]], [[1.0]])


def test_non_spd_noise_rejected():
    with pytest.raises(ValidationError):
        steady_state_covariance([[1.2]], [[1.0]], [[-1.0]], [[1.0]])
    with pytest.raises(ValidationError):
        steady_state_covariance(np.eye(2) * 1.2, [[1.0, 0.0]], [[1.0, 2.0], [0.0, 1.0]], [[1.0]])


def test_convergence_error_when_iterations_exhausted():
    with pytest.raises(ConvergenceError) as info:
        steady_state_covariance([[1.3]], [[1.0]], [[1.0]], [[1.0]], max_iter=2)
    assert info.value.iterations == 2 and info.value.residual > 0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_generated_processes_have_tight_fixed_points(seed):
    procs, _ = generate_random_system(3, 1, seed=seed)
    for p in procs:
        assert p.fixed_point_residual() < 1e-10
        assert np.all(np.diff(p.mse_table.values) > 0)
        np.testing.assert_allclose(p.Pbar, p.Pbar.T)
        assert np.all(np.linalg.eigvalsh(p.Pbar) > 0)


def test_kalman_cycle_is_symmetric():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(3, 3))
    C = rng.normal(size=(2, 3))
    P = kalman_cycle(np.eye(3), A, C, np.eye(3), np.eye(2))
    np.testing.assert_array_equal(P, P.T)
