"""Truncated scheduling MDP: enumeration, value iteration, Q-values, policy evaluation.

The AoI of each sensor is truncated at ``tau_max`` with an absorbing cap (a
failed or absent update at ``tau_max`` stays at ``tau_max``).  Because the
next channel matrix is independent of the state and action, the Bellman
expectation factorizes: the channel average ``E_H[V(tau, H)]`` is computed
once per sweep and each (state, action) pair only sums over the ``2^M``
success/failure patterns of the scheduled sensors.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .channel import ChannelModel, SchedulingEnv, SysState, validate_action
from .errors import CapacityError, ConvergenceError, ValidationError
from .estimation import REWARD_KINDS, ProcessModel, mse_matrix, reward_from_table

MAX_ACTIONS = 1_000_000
MAX_STATES = 20_000_000


def action_count(N: int, M: int) -> int:
    return math.perm(N, M)


def enumerate_actions(N: int, M: int, cap: int = MAX_ACTIONS) -> np.ndarray:
    """All assignments of ``M`` channels to distinct sensors, shape ``(N!/(N-M)!, N)``.

    Ordered lexicographically by the tuple (sensor on channel 1, sensor on
    channel 2, ...), so ``N=2, M=1`` gives ``[(1, 0), (0, 1)]``.
    """
    if not 1 <= M <= N:
        raise ValidationError(f"need 1 <= M <= N, got N={N}, M={M}")
    count = action_count(N, M)
    if count > cap:
        raise CapacityError(f"{count} actions for N={N}, M={M} exceeds the cap of {cap}")
    out = np.zeros((count, N), dtype=np.int64)
    for k, sensors in enumerate(itertools.permutations(range(N), M)):
        out[k, list(sensors)] = np.arange(1, M + 1)
    return out


class ActionIndex:
    """Bidirectional map between action vectors and their enumeration index."""

    def __init__(self, N: int, M: int, cap: int = MAX_ACTIONS):
        self.N, self.M = N, M
        self.actions = enumerate_actions(N, M, cap)
        self._index = {tuple(a): k for k, a in enumerate(self.actions.tolist())}

    def __len__(self):
        return len(self.actions)

    def index(self, action) -> int:
        key = tuple(int(x) for x in action)
        try:
            return self._index[key]
        except KeyError:
            raise ValidationError(f"action {list(key)} is not a valid assignment") from None


class StateSpace:
    """Dense row-major enumeration of truncated states ``(tau, H)``.

    ``index = tau_index * n_H + H_index`` where ``tau_index`` is the mixed-radix
    number of ``tau - 1`` in base ``tau_max`` and ``H_index`` that of ``H - 1``
    (flattened row-major) in base ``levels``.
    """

    def __init__(self, N: int, M: int, levels: int, tau_max: int):
        if tau_max < 2:
            raise ValidationError("tau_max must be >= 2")
        if not 1 <= M <= N or levels < 1:
            raise ValidationError(f"invalid dimensions N={N}, M={M}, levels={levels}")
        self.N, self.M, self.levels, self.tau_max = N, M, levels, tau_max
        self.n_tau = tau_max ** N
        self.n_H = levels ** (N * M)
        if self.n_tau * self.n_H > MAX_STATES:
            raise CapacityError(f"{self.n_tau * self.n_H} states exceeds the cap of {MAX_STATES}")
        self.size = self.n_tau * self.n_H
        self.tau_grid = np.array(list(itertools.product(range(1, tau_max + 1), repeat=N)),
                                 dtype=np.int64).reshape(self.n_tau, N)
        self.H_grid = np.array(list(itertools.product(range(1, levels + 1), repeat=N * M)),
                               dtype=np.int64).reshape(self.n_H, N, M)
        self._tau_w = tau_max ** np.arange(N - 1, -1, -1, dtype=np.int64)
        self._h_w = levels ** np.arange(N * M - 1, -1, -1, dtype=np.int64)

    def tau_index(self, tau) -> np.ndarray:
        return (np.asarray(tau) - 1) @ self._tau_w

    def H_index(self, H) -> np.ndarray:
        H = np.asarray(H)
        return (H.reshape(H.shape[:-2] + (-1,)) - 1) @ self._h_w

    def encode(self, state: SysState) -> int:
        tau, H = state.tau, state.H
        if tau.shape != (self.N,) or H.shape != (self.N, self.M):
            raise ValidationError("state dimensions do not match the state space")
        if np.any(tau < 1) or np.any(tau > self.tau_max) or np.any(H < 1) or np.any(H > self.levels):
            raise ValidationError(f"state {state.key()} outside the truncated space")
        return int(self.tau_index(tau) * self.n_H + self.H_index(H))

    def decode(self, index: int) -> SysState:
        if not 0 <= index < self.size:
            raise ValidationError(f"state index {index} out of range")
        ti, hi = divmod(int(index), self.n_H)
        return SysState(self.tau_grid[ti], self.H_grid[hi])

    def clamp(self, state: SysState) -> SysState:
        return SysState(np.minimum(state.tau, self.tau_max), state.H)


@dataclass(frozen=True)
class AoITransition:
    """Next-state law: explicit AoI factor times the state-independent channel law."""

    aoi: list
    channel: ChannelModel

    def channel_probability(self, H) -> float:
        H = np.asarray(H)
        N, M, _ = self.channel.dist.shape
        nn, mm = np.meshgrid(np.arange(N), np.arange(M), indexing="ij")
        return float(np.prod(self.channel.dist[nn, mm, H - 1]))


def transition_distribution(state: SysState, action, model: ChannelModel,
                            tau_max: int) -> AoITransition:
    """Enumerate ``Pr(tau+ | tau, H, a)`` over the success patterns of scheduled sensors."""
    N, M = model.n_sensors, model.n_channels
    a = validate_action(action, N, M)
    sched = [int(n) for n in np.nonzero(a)[0]]
    probs = [success_probability_level(model, state.H[n, a[n] - 1]) for n in sched]
    base = np.minimum(state.tau + 1, tau_max)
    out: dict[tuple, float] = {}
    for pattern in itertools.product((True, False), repeat=len(sched)):
        nxt = base.copy()
        pr = 1.0
        for n, p, ok in zip(sched, probs, pattern):
            if ok:
                nxt[n] = 1
                pr *= p
            else:
                pr *= 1.0 - p
        key = tuple(int(x) for x in nxt)
        out[key] = out.get(key, 0.0) + pr
    return AoITransition([(k, v) for k, v in out.items()], model)


def success_probability_level(model: ChannelModel, level) -> float:
    return float(model.success[int(level) - 1])


class TruncatedMdp:
    """The finite scheduling MDP on a :class:`StateSpace`."""

    def __init__(self, space: StateSpace, model: ChannelModel,
                 processes: Sequence[ProcessModel], reward_kind: str = "sum_mse",
                 gamma: float = 0.95):
        if reward_kind not in REWARD_KINDS:
            raise ValidationError(f"unknown reward kind {reward_kind!r}")
        if not 0.0 <= gamma < 1.0:
            raise ValidationError("gamma must lie in [0, 1)")
        if (model.n_sensors, model.n_channels, model.levels) != (space.N, space.M, space.levels):
            raise ValidationError("channel model does not match the state space")
        if len(processes) != space.N:
            raise ValidationError("one process per sensor required")
        self.space, self.model, self.gamma = space, model, gamma
        self.processes = [p if p.tau_max >= space.tau_max else p.with_tau_max(space.tau_max)
                          for p in processes]
        self.reward_kind = reward_kind
        self.action_index = ActionIndex(space.N, space.M)
        self.actions = self.action_index.actions
        table = mse_matrix(self.processes, space.tau_max)
        self.reward_tau = reward_from_table(table, space.tau_grid, reward_kind)
        self.reward_scale = max(1.0, float(np.max(np.abs(self.reward_tau))))

        nn, mm = np.meshgrid(np.arange(space.N), np.arange(space.M), indexing="ij")
        self.channel_prob = np.prod(model.dist[nn, mm, space.H_grid - 1], axis=(1, 2))
        self._branches = [self._action_branches(a) for a in self.actions]

    def _action_branches(self, a: np.ndarray):
        sp = self.space
        sched = np.nonzero(a)[0]
        p = self.model.success[sp.H_grid[:, sched, a[sched] - 1] - 1]  # (n_H, M)
        base = np.minimum(sp.tau_grid + 1, sp.tau_max)
        branches = []
        for pattern in itertools.product((True, False), repeat=len(sched)):
            tau_next = base.copy()
            prob = np.ones(sp.n_H)
            for k, (n, ok) in enumerate(zip(sched, pattern)):
                if ok:
                    tau_next[:, n] = 1
                    prob = prob * p[:, k]
                else:
                    prob = prob * (1.0 - p[:, k])
            branches.append((sp.tau_index(tau_next), prob))
        return branches

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    def channel_average(self, V: np.ndarray) -> np.ndarray:
        """``E_{H+}[V(tau, H+)]`` for every AoI vector."""
        return V.reshape(self.space.n_tau, self.space.n_H) @ self.channel_prob

    def q_values(self, V: np.ndarray) -> np.ndarray:
        """Q-table of shape ``(n_states, n_actions)`` for value function ``V``."""
        ev = self.channel_average(V)
        sp = self.space
        Q = np.empty((sp.n_tau, sp.n_H, self.n_actions))
        for k, branches in enumerate(self._branches):
            acc = np.zeros((sp.n_tau, sp.n_H))
            for nxt, prob in branches:
                acc += ev[nxt][:, None] * prob[None, :]
            Q[:, :, k] = self.reward_tau[:, None] + self.gamma * acc
        return Q.reshape(sp.size, self.n_actions)

    def bellman(self, V: np.ndarray) -> np.ndarray:
        return self.q_values(V).max(axis=1)

    def reward_vector(self) -> np.ndarray:
        return np.repeat(self.reward_tau, self.space.n_H)


@dataclass(frozen=True)
class ValueTable:
    v: np.ndarray
    gamma: float
    residual: float
    iterations: int
    tol: float
    scale: float

    @property
    def slack(self) -> float:
        """Numeric slack for value comparisons: ten times the stopping tolerance."""
        return 10.0 * self.tol * self.scale


def value_iteration(mdp: TruncatedMdp, tol: float = 1e-8, max_iter: int = 100_000,
                    v0: np.ndarray | None = None) -> ValueTable:
    """Iterate the Bellman operator until the sup-norm change is at most ``tol``.

    The tolerance is relative to the reward scale ``max(1, max |r|)``, so
    that reward kinds with very different magnitudes converge to the same
    number of significant digits.

    Raises
    ------
    ConvergenceError
        When ``max_iter`` sweeps do not reach the tolerance.
    """
    V = np.zeros(mdp.space.size) if v0 is None else np.asarray(v0, dtype=float).copy()
    thresh = tol * mdp.reward_scale
    residual = np.inf
    for it in range(1, max_iter + 1):
        V_next = mdp.bellman(V)
        residual = float(np.max(np.abs(V_next - V)))
        V = V_next
        if residual <= thresh:
            V.setflags(write=False)
            return ValueTable(V, mdp.gamma, residual, it, tol, mdp.reward_scale)
    raise ConvergenceError("value iteration did not converge", residual, max_iter)


@dataclass(frozen=True)
class QTable:
    q: np.ndarray


@dataclass(frozen=True)
class Policy:
    """Chosen action index per state, plus the set of (near-)optimal actions.

    ``optimal[s, k]`` is True when action ``k`` is within the slack of the
    best Q-value at state ``s``; states with more than one such action are
    ties, and structure checks accept any of them.
    """

    actions: np.ndarray
    optimal: np.ndarray
    action_list: np.ndarray

    @classmethod
    def from_indices(cls, indices, action_list: np.ndarray) -> "Policy":
        idx = np.asarray(indices, dtype=np.int64)
        opt = np.zeros((len(idx), len(action_list)), dtype=bool)
        opt[np.arange(len(idx)), idx] = True
        return cls(idx, opt, np.asarray(action_list))

    @property
    def vectors(self) -> np.ndarray:
        return self.action_list[self.actions]

    @property
    def tied(self) -> np.ndarray:
        return self.optimal.sum(axis=1) > 1

    def action_for(self, space: StateSpace, state: SysState) -> np.ndarray:
        return self.action_list[self.actions[space.encode(space.clamp(state))]]

    def as_function(self, space: StateSpace) -> Callable[[SysState], np.ndarray]:
        return lambda s: self.action_for(space, s)


def q_from_value(mdp: TruncatedMdp, value: ValueTable) -> QTable:
    return QTable(mdp.q_values(value.v))


def greedy_policy(qtable: QTable, action_list: np.ndarray, slack: float = 0.0) -> Policy:
    """Argmax policy with lowest-index tie-break; ``slack`` sets the tie band."""
    q = qtable.q
    idx = np.argmax(q, axis=1)
    best = q[np.arange(len(q)), idx]
    opt = q >= (best - slack)[:, None]
    return Policy(idx, opt, np.asarray(action_list))


def solve(mdp: TruncatedMdp, tol: float = 1e-8, max_iter: int = 100_000):
    """Value iteration followed by Q extraction and the greedy policy."""
    value = value_iteration(mdp, tol, max_iter)
    qtable = q_from_value(mdp, value)
    return value, qtable, greedy_policy(qtable, mdp.actions, value.slack)


@dataclass
class EvalResult:
    avg_mse: float
    avg_aoi: float
    mse_trace: np.ndarray
    aoi_trace: np.ndarray
    diverged: bool
    steps: int


def evaluate_policy(env: SchedulingEnv, policy_fn: Callable[[SysState], np.ndarray],
                    steps: int = 10_000, seed=None, init=None,
                    divergence_mse: float = 1e6, divergence_tau: int = 10_000) -> EvalResult:
    """Simulate ``steps`` slots and average the sum MSE and sum AoI of visited states.

    A run is flagged as diverged (and cut short) once any AoI exceeds
    ``divergence_tau``; it is also flagged when the average MSE exceeds
    ``divergence_mse``.
    """
    if seed is not None:
        env.rng = np.random.default_rng(seed)
    state = env.reset(init)
    N, M = env.n_sensors, env.n_channels
    mse = np.empty(steps)
    aoi = np.empty(steps)
    diverged = False
    done = 0
    for t in range(steps):
        if np.any(state.tau > divergence_tau):
            diverged = True
            break
        mse[t] = env.sum_mse(state.tau)
        aoi[t] = state.tau.sum()
        a = validate_action(policy_fn(state), N, M)
        state, _, _ = env.step(a)
        done = t + 1
    mse, aoi = mse[:done], aoi[:done]
    avg_mse = float(mse.mean()) if done == steps else float("inf")
    avg_aoi = float(aoi.mean()) if done == steps else float("inf")
    if not np.isfinite(avg_mse) or avg_mse > divergence_mse:
        diverged = True
    return EvalResult(avg_mse, avg_aoi, mse, aoi, diverged, done)


def write_solution_csv(path, mdp: TruncatedMdp, value: ValueTable, policy: Policy) -> None:
    """One row per state: AoI components, channel levels, value, argmax action."""
    sp = mdp.space
    header = ([f"tau_{n + 1}" for n in range(sp.N)]
              + [f"h_{n + 1}_{m + 1}" for n in range(sp.N) for m in range(sp.M)]
              + ["V"] + [f"a_{n + 1}" for n in range(sp.N)] + ["tied"])
    vecs = policy.vectors
    tied = policy.tied
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for s in range(sp.size):
            ti, hi = divmod(s, sp.n_H)
            w.writerow(list(sp.tau_grid[ti]) + list(sp.H_grid[hi].ravel())
                       + [f"{value.v[s]:.6g}"] + list(vecs[s]) + [int(tied[s])])
