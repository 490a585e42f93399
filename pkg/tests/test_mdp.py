import itertools

import numpy as np
import pytest

from remsched import (CapacityError, ConvergenceError, SchedulingEnv, SysState, ValidationError,
                      enumerate_actions, env_step, evaluate_policy, solve, value_iteration)
from remsched.channel import ChannelModel, generate_random_system, is_valid_action
from remsched.mdp import (ActionIndex, StateSpace, TruncatedMdp, greedy_policy, q_from_value,
                          transition_distribution)


def naive_bellman(V, procs, channel, tau_max, gamma, kind="sum_mse"):
    """Bellman operator by brute-force enumeration of every (tau', H') successor."""
    N, M, L = channel.dist.shape
    states = [(tau, H) for tau in itertools.product(range(1, tau_max + 1), repeat=N)
              for H in itertools.product(range(1, L + 1), repeat=N * M)]
    index = {s: k for k, s in enumerate(states)}
    out = np.empty(len(states))
    for k, (tau, Hf) in enumerate(states):
        H = np.array(Hf).reshape(N, M)
        mse = [procs[n].mse_table.values[tau[n] - 1] for n in range(N)]
        r = {"sum_mse": -sum(mse), "product_mse": -np.prod(mse), "sum_aoi": -sum(tau)}[kind]
        best = -np.inf
        for sensors in itertools.permutations(range(N), M):
            total = 0.0
            for ok in itertools.product((0, 1), repeat=M):
                pr = 1.0
                nxt = [min(t + 1, tau_max) for t in tau]
                for m, (n, s) in enumerate(zip(sensors, ok)):
                    p = 1.0 - channel.drop_prob[H[n, m] - 1]
                    pr *= p if s else 1.0 - p
                    if s:
                        nxt[n] = 1
                for H2 in itertools.product(range(1, L + 1), repeat=N * M):
                    ph = np.prod([channel.dist[i // M, i % M, h - 1] for i, h in enumerate(H2)])
                    total += pr * ph * V[index[(tuple(nxt), H2)]]
            best = max(best, r + gamma * total)
        out[k] = best
    return out


def test_factorized_bellman_matches_enumeration(tiny_system):
    procs, channel = tiny_system
    space = StateSpace(2, 1, 2, 4)
    mdp = TruncatedMdp(space, channel, procs, "sum_mse", 0.9)
    V = np.random.default_rng(0).normal(size=space.size) * 10
    np.testing.assert_allclose(mdp.bellman(V), naive_bellman(V, procs, channel, 4, 0.9),
                               rtol=0, atol=1e-12)


def test_factorized_bellman_two_channels():
    procs, channel = generate_random_system(3, 2, seed=3)
    channel = ChannelModel(channel.dist[:, :, :2] / channel.dist[:, :, :2].sum(-1, keepdims=True),
                           np.array([0.3, 0.05]))
    space = StateSpace(3, 2, 2, 2)
    mdp = TruncatedMdp(space, channel, procs, "product_mse", 0.8)
    V = np.random.default_rng(1).normal(size=space.size)
    np.testing.assert_allclose(mdp.bellman(V), naive_bellman(V, procs, channel, 2, 0.8, "product_mse"),
                               rtol=1e-13, atol=1e-9)


def test_monte_carlo_transitions_within_three_sigma(tiny_system):
    procs, channel = tiny_system
    state = SysState([2, 3], [[2], [1]])
    action = np.array([0, 1])
    law = dict(transition_distribution(state, action, channel, tau_max=4).aoi)
    rng = np.random.default_rng(7)
    n = 100_000
    counts, hcounts = {}, np.zeros((2, 2))
    for _ in range(n):
        nxt, _, _ = env_step(state, action, channel, procs, "sum_mse", rng, tau_max=4)
        key = tuple(nxt.tau.tolist())
        counts[key] = counts.get(key, 0) + 1
        hcounts[0, nxt.H[0, 0] - 1] += 1
        hcounts[1, nxt.H[1, 0] - 1] += 1
    assert set(counts) <= set(law)
    for key, p in law.items():
        sigma = np.sqrt(n * p * (1 - p))
        assert abs(counts.get(key, 0) - n * p) <= 3 * sigma, key
    expect = channel.dist[:, 0, :] * n
    sigma = np.sqrt(expect * (1 - channel.dist[:, 0, :]))
    assert np.all(np.abs(hcounts - expect) <= 3 * sigma)


def test_transition_distribution_sums_to_one(tiny_system):
    _, channel = tiny_system
    law = transition_distribution(SysState([4, 1], [[1], [2]]), [1, 0], channel, tau_max=4)
    assert sum(p for _, p in law.aoi) == pytest.approx(1.0)
    assert dict(law.aoi) == pytest.approx({(1, 2): 0.6, (4, 2): 0.4})


def test_enumerate_actions_order_and_count():
    np.testing.assert_array_equal(enumerate_actions(2, 1), [[1, 0], [0, 1]])
    acts = enumerate_actions(4, 2)
    assert len(acts) == 12
    assert all(is_valid_action(a, 4, 2) for a in acts)
    assert len({tuple(a) for a in acts}) == 12
    with pytest.raises(CapacityError):
        enumerate_actions(12, 6, cap=1000)
    with pytest.raises(ValidationError):
        enumerate_actions(2, 3)


def test_action_index_roundtrip():
    idx = ActionIndex(3, 2)
    for k, a in enumerate(idx.actions):
        assert idx.index(a) == k
    with pytest.raises(ValidationError):
        idx.index([1, 1, 0])


@pytest.mark.parametrize("bad", [[1, 1], [0, 0], [2, 0], [1], [1.5, 0]])
def test_env_rejects_invalid_actions(bad, tiny_system):
    procs, channel = tiny_system
    env = SchedulingEnv(procs, channel, seed=0)
    env.reset()
    with pytest.raises(ValidationError):
        env.step(bad)


def test_state_space_encode_decode():
    space = StateSpace(2, 2, 3, 5)
    for k in (0, 17, space.size - 1):
        assert space.encode(space.decode(k)) == k
    with pytest.raises(ValidationError):
        space.encode(SysState([6, 1], [[1, 1], [1, 1]]))


def test_env_is_deterministic_under_seed(tiny_system):
    procs, channel = tiny_system

    def trace(seed):
        env = SchedulingEnv(procs, channel, seed=seed)
        s = env.reset()
        out = []
        for t in range(50):
            s, r, _ = env.step([1, 0] if t % 2 else [0, 1])
            out.append((s.key(), r))
        return out
    assert trace(3) == trace(3)
    assert trace(3) != trace(4)


def test_value_iteration_converges_and_is_a_fixed_point(tiny_system):
    procs, channel = tiny_system
    mdp = TruncatedMdp(StateSpace(2, 1, 2, 4), channel, procs)
    value = value_iteration(mdp, tol=1e-10)
    assert np.max(np.abs(mdp.bellman(value.v) - value.v)) <= 1e-10 * mdp.reward_scale
    with pytest.raises(ConvergenceError):
        value_iteration(mdp, tol=1e-10, max_iter=3)


def test_greedy_policy_ties_and_lowest_index():
    from remsched.mdp import QTable
    q = QTable(np.array([[1.0, 1.0 - 1e-12], [0.0, 2.0]]))
    pol = greedy_policy(q, enumerate_actions(2, 1), slack=1e-9)
    np.testing.assert_array_equal(pol.actions, [0, 1])
    np.testing.assert_array_equal(pol.tied, [True, False])


def test_vi_beats_fixed_policies(tiny_system):
    procs, channel = tiny_system
    space = StateSpace(2, 1, 2, 4)
    mdp = TruncatedMdp(space, channel, procs)
    value, qtable, policy = solve(mdp)
    # the optimal value dominates the value of any fixed action
    for k in range(mdp.n_actions):
        assert np.all(value.v >= qtable.q[:, k] - value.slack)
    env = SchedulingEnv(procs, channel, tau_max=4)
    vi = evaluate_policy(env, policy.as_function(space), steps=5000, seed=0)
    always0 = evaluate_policy(env, lambda s: np.array([1, 0]), steps=5000, seed=0)
    assert vi.avg_mse < always0.avg_mse


def test_evaluate_policy_flags_divergence():
    procs, channel = generate_random_system(2, 1, seed=0)
    env = SchedulingEnv(procs, channel)
    res = evaluate_policy(env, lambda s: np.array([1, 0]), steps=3000, seed=0, divergence_mse=1e4)
    assert res.diverged and res.avg_mse > 1e4
    res = evaluate_policy(env, lambda s: np.array([1, 0]), steps=100, seed=0, divergence_tau=50)
    assert res.diverged and res.steps < 100 and res.aoi_trace.max() <= 50 * 2
