"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Training-based criteria (5, 6, 9) share cached runs and take a few hours on
one CPU core; run ``pytest -m "not slow"`` to skip them.
"""
import numpy as np
import pytest

from remsched import SchedulingEnv, SysState, env_step, evaluate_policy, solve
from remsched.agents import (Featurizer, SeDdpgConfig, SeDqnConfig, train_ddpg, train_dqn,
                             train_se_ddpg, train_se_dqn, write_metrics_csv)
from remsched.bench.experiment import eval_seed
from remsched.channel import SystemSpec, generate_random_system
from remsched.mdp import StateSpace, TruncatedMdp, action_count, transition_distribution
from remsched.nn import Mlp
from remsched.structure import (check_aoi_threshold, check_channel_threshold, check_monotonicity,
                                check_prob_supermodularity, check_proposition1)

from test_mdp import naive_bellman
from test_nn import numeric_grads, rel_err

STRUCTURE_SEEDS = range(20)
PROP1_SEEDS = range(5)
RL_SEEDS = range(5)
HIDDEN = (64, 64)          # acceptance-scale networks (single-core runtime budget)
EVAL_STEPS = 10_000
PROP1_SPEC = SystemSpec(drop_prob=(0.2, 0.01))


def solve_2x1(seed, reward_kind):
    procs, channel = generate_random_system(2, 1, seed=seed)
    space = StateSpace(2, 1, 5, 16)
    value, _, policy = solve(TruncatedMdp(space, channel, procs, reward_kind, 0.95))
    return procs, channel, space, value, policy


@pytest.fixture(scope="module")
def sum_mse_solutions():
    return {seed: solve_2x1(seed, "sum_mse") for seed in STRUCTURE_SEEDS}


def test_criterion1_structural_properties(sum_mse_solutions, acceptance):
    totals = dict.fromkeys(("channel_threshold", "aoi_threshold", "monotonicity",
                            "prob_supermodularity"), 0)
    for procs, channel, space, value, policy in sum_mse_solutions.values():
        reports = [check_channel_threshold(policy, space),
                   check_aoi_threshold(policy, space, channel),
                   check_monotonicity(value, space, value.slack),
                   check_prob_supermodularity(value, space, channel, value.slack)]
        for rep in reports:
            assert rep.checked_pairs > 0
            totals[rep.kind] += rep.n_violations
    ok = sum(totals.values()) == 0
    acceptance(1, ok, f"{len(sum_mse_solutions)} systems, violations {totals}")
    assert ok


def test_criterion2_product_mse_counterexample(sum_mse_solutions, acceptance):
    hits = []
    for seed in sum_mse_solutions:
        _, channel, space, _, policy = solve_2x1(seed, "product_mse")
        n = check_aoi_threshold(policy, space, channel).n_violations
        if n:
            hits.append((seed, n))
    ok = len(hits) >= 1
    acceptance(2, ok, f"{len(hits)} of {len(sum_mse_solutions)} product-MSE systems violate "
                      f"the AoI threshold (seed, count): {hits}")
    assert ok


def test_criterion3_proposition1(acceptance):
    counts = []
    for seed in PROP1_SEEDS:
        procs, channel = generate_random_system(3, 2, PROP1_SPEC, seed=seed)
        space = StateSpace(3, 2, 2, 6)
        _, _, policy = solve(TruncatedMdp(space, channel, procs, "sum_mse", 0.95))
        rep = check_proposition1(policy, space)
        assert rep.checked_pairs > 0
        counts.append(rep.n_violations)
    ok = sum(counts) == 0
    acceptance(3, ok, f"{len(counts)} systems (3 sensors, 2 channels), violations {counts}")
    assert ok


def test_criterion4_oracle_equivalence(tiny_system, acceptance):
    procs, channel = tiny_system
    space = StateSpace(2, 1, 2, 4)
    mdp = TruncatedMdp(space, channel, procs, "sum_mse", 0.95)
    V = np.random.default_rng(0).normal(size=space.size) * 10
    gap = float(np.max(np.abs(mdp.bellman(V) - naive_bellman(V, procs, channel, 4, 0.95))))

    state, action = SysState([2, 3], [[2], [1]]), np.array([0, 1])
    law = dict(transition_distribution(state, action, channel, tau_max=4).aoi)
    rng = np.random.default_rng(11)
    n = 100_000
    counts = {}
    for _ in range(n):
        nxt, _, _ = env_step(state, action, channel, procs, "sum_mse", rng, tau_max=4)
        key = tuple(nxt.tau.tolist())
        counts[key] = counts.get(key, 0) + 1
    z = max(abs(counts.get(k, 0) - n * p) / np.sqrt(n * p * (1 - p)) for k, p in law.items())
    ok = gap <= 1e-12 and set(counts) <= set(law) and z <= 3.0
    acceptance(4, ok, f"max |factorized - enumerated| = {gap:.2e}, "
                      f"max Monte-Carlo z-score = {z:.2f} over {n} samples")
    assert ok


# ---------------------------------------------------------------- training runs

def vi_benchmark(seed):
    procs, channel, space, _, policy = solve_2x1(seed, "sum_mse")
    table = policy.as_function(space)
    res = evaluate_policy(SchedulingEnv(procs, channel), lambda s: table(space.clamp(s)),
                          steps=EVAL_STEPS, seed=eval_seed(seed))
    return procs, channel, res.avg_mse


@pytest.fixture(scope="module")
def full_runs():
    """Full-schedule SE-DQN and SE-DDPG runs on 2x1 systems, with their VI benchmarks."""
    out = {}
    for seed in RL_SEEDS:
        procs, channel, vi_mse = vi_benchmark(seed)
        for name, trainer, cfg in (("se_dqn", train_se_dqn, SeDqnConfig(hidden=HIDDEN)),
                                   ("se_ddpg", train_se_ddpg, SeDdpgConfig(hidden=HIDDEN))):
            res = trainer(SchedulingEnv(procs, channel), cfg, seed=seed)
            ev = evaluate_policy(SchedulingEnv(procs, channel), res.extra["model"].policy(),
                                 steps=EVAL_STEPS, seed=eval_seed(seed))
            out[name, seed] = dict(result=res, rl=ev.avg_mse, vi=vi_mse, diverged=ev.diverged)
    return out


@pytest.mark.slow
@pytest.mark.parametrize("agent,bound", [("se_dqn", 1.05), ("se_ddpg", 1.07)])
def test_criterion5_near_optimal(full_runs, agent, bound, acceptance):
    ratios = [full_runs[agent, s]["rl"] / full_runs[agent, s]["vi"]
              if not full_runs[agent, s]["diverged"] else np.inf for s in RL_SEEDS]
    good = sum(r <= bound for r in ratios)
    ok = good >= 4
    acceptance(5, ok, f"{agent}: RL/VI average sum MSE {np.round(ratios, 4).tolist()}, "
                      f"{good} of {len(ratios)} seeds within {bound}")
    assert ok


@pytest.mark.slow
def test_criterion9_constraint_safety(full_runs, acceptance):
    checked = failures = 0
    for agent in ("se_dqn", "se_ddpg"):
        res = full_runs[agent, RL_SEEDS[0]]["result"]
        assert res.actions_checked == res.config.episodes * res.config.horizon
        checked += res.actions_checked
        failures += res.constraint_failures
    ok = checked > 0 and failures == 0
    acceptance(9, ok, f"{checked} executed actions checked, {failures} constraint failures")
    assert ok


LARGE_STAGES = (25, 50, 75)


@pytest.fixture(scope="module")
def large_runs():
    """Final-10-episode average sum MSE of each agent on matched 6x3 systems."""
    out = {}
    for seed in RL_SEEDS:
        procs, channel = generate_random_system(6, 3, seed=seed)
        for name, trainer, cls in (("se_dqn", train_se_dqn, SeDqnConfig),
                                   ("dqn", train_dqn, SeDqnConfig),
                                   ("se_ddpg", train_se_ddpg, SeDdpgConfig),
                                   ("ddpg", train_ddpg, SeDdpgConfig)):
            res = trainer(SchedulingEnv(procs, channel),
                          cls(stages=LARGE_STAGES, hidden=HIDDEN), seed=seed)
            out[name, seed] = float(np.mean(res.series("avg_sum_mse")[-10:]))
    return out


@pytest.mark.slow
@pytest.mark.parametrize("se,vanilla", [("se_dqn", "dqn"), ("se_ddpg", "ddpg")])
def test_criterion6_structure_helps(large_runs, se, vanilla, acceptance):
    pairs = [(large_runs[se, s], large_runs[vanilla, s]) for s in RL_SEEDS]
    wins = sum(a <= b for a, b in pairs)
    ok = wins >= 4
    shown = [f"{a:.4g} vs {b:.4g}" for a, b in pairs]
    acceptance(6, ok, f"{se} vs {vanilla} (6 sensors, 3 channels): {shown}, "
                      f"{wins} of {len(pairs)} seeds no worse")
    assert ok


@pytest.mark.parametrize("se,vanilla,cls", [(train_se_dqn, train_dqn, SeDqnConfig),
                                            (train_se_ddpg, train_ddpg, SeDdpgConfig)])
def test_criterion7_degenerate_schedule_is_vanilla(se, vanilla, cls, tmp_path, acceptance):
    procs, channel = generate_random_system(3, 2, seed=2)
    cfg = cls(stages=(0, 0, 4), horizon=100, batch=32, hidden=(16, 16))
    a = se(SchedulingEnv(procs, channel), cfg, seed=9)
    b = vanilla(SchedulingEnv(procs, channel), cfg, seed=9)
    write_metrics_csv(tmp_path / "se.csv", a.metrics)
    write_metrics_csv(tmp_path / "vanilla.csv", b.metrics)
    same_csv = (tmp_path / "se.csv").read_bytes() == (tmp_path / "vanilla.csv").read_bytes()
    same_weights = a.nets.keys() == b.nets.keys() and all(
        pa.tobytes() == pb.tobytes()
        for k in a.nets for pa, pb in zip(a.nets[k].params, b.nets[k].params))
    ok = same_csv and same_weights
    acceptance(7, ok, f"{vanilla.__name__}: stages (0, 0, 4) metrics CSV identical: {same_csv}, "
                      f"weights identical: {same_weights}")
    assert ok


def test_criterion8_numerics(acceptance):
    worst = 0.0
    rng = np.random.default_rng(0)
    for N, M, L in ((2, 1, 5), (6, 3, 5)):
        width, n_act = Featurizer(N, M, L).width, action_count(N, M)
        for sizes, act in (([width, 16, 16, n_act], "identity"),   # Q-net
                           ([width, 16, 16, N], "tanh"),           # actor
                           ([width + N, 16, 16, 1], "identity")):  # critic
            net = Mlp(sizes, act, rng=rng)
            x = rng.normal(size=(4, sizes[0]))
            w = rng.normal(size=(4, sizes[-1]))
            loss = lambda: float((w * net.forward(x)).sum())  # noqa: E731
            out, cache = net.forward_train(x)
            grads, gx = net.backward(cache, w)
            for a, n in zip(grads, numeric_grads(loss, net.params)):
                worst = max(worst, rel_err(a, n))
            worst = max(worst, rel_err(gx, numeric_grads(loss, [x])[0]))

    processes = [p for s in STRUCTURE_SEEDS for p in generate_random_system(2, 1, seed=s)[0]]
    processes += [p for s in PROP1_SEEDS
                  for p in generate_random_system(3, 2, PROP1_SPEC, seed=s)[0]]
    processes += [p for s in RL_SEEDS for p in generate_random_system(6, 3, seed=s)[0]]
    residual = max(p.fixed_point_residual() for p in processes)
    increasing = all(np.all(np.diff(p.mse_table.values) > 0) for p in processes)
    ok = worst < 1e-4 and residual < 1e-10 and increasing
    acceptance(8, ok, f"max gradient rel-err {worst:.2e}, max Riccati residual {residual:.2e} "
                      f"over {len(processes)} processes, tables strictly increasing: {increasing}")
    assert ok
