"""Structure-enhanced action selection shared by the DQN and DDPG agents.

Both selectors only need a *greedy model*: an object exposing ``N``, ``M``
and two methods,

* ``greedy_actions(taus, Hs) -> (B, N)`` greedy schedules for a batch of
  states (``taus`` is ``(B, N)``, ``Hs`` is ``(B, N, M)``), and
* ``random_action(state, rng) -> (N,)`` an exploratory schedule.

The loose selector infers each sensor's channel from the greedy action at
the state with that sensor's AoI one smaller (an AoI-threshold policy keeps
a scheduled sensor scheduled, on the same or a better channel, as its AoI
grows).  The tight selector additionally asks whether the inferred channel
is still chosen when its state is one level worse (a channel-state threshold
policy never revokes an assignment when the channel improves).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..channel import SysState, is_valid_action


@dataclass
class SelectionOutcome:
    action: np.ndarray
    se_action: np.ndarray | None
    greedy: np.ndarray
    explored: bool
    se_constraint_met: bool
    stage: int

    @property
    def se_executed(self) -> bool:
        return self.se_action is not None and np.array_equal(self.se_action, self.action)


def relaxed_constraint_ok(action: np.ndarray, M: int) -> bool:
    """Every channel carries at most one sensor (sensors hold one channel by encoding)."""
    used = action[action > 0]
    return len(np.unique(used)) == len(used) and np.all(used <= M)


def fill_free_channels(action: np.ndarray, M: int, rng: np.random.Generator) -> np.ndarray:
    """Give each unused channel to a distinct, uniformly chosen unscheduled sensor."""
    a = action.copy()
    free = np.setdiff1d(np.arange(1, M + 1), a[a > 0])
    if len(free):
        idle = np.nonzero(a == 0)[0]
        a[rng.choice(idle, size=len(free), replace=False)] = free
    return a


def _probe_batch(state: SysState, tight: bool):
    """Stack the current state, its AoI-decremented neighbours and (if tight)
    its channel-decremented neighbours into one batch."""
    tau, H = state.tau, state.H
    N, M = H.shape
    rows = 1 + N + (N * M if tight else 0)
    taus = np.repeat(tau[None, :], rows, axis=0)
    Hs = np.repeat(H[None, :, :], rows, axis=0)
    for n in range(N):
        if tau[n] > 1:
            taus[1 + n, n] -= 1
    if tight:
        for n in range(N):
            for m in range(M):
                if H[n, m] > 1:
                    Hs[1 + N + n * M + m, n, m] -= 1
    return taus, Hs


def _se_action(model, state: SysState, xi: float, rng: np.random.Generator,
               tight: bool, use_channel_threshold: bool):
    tau, H = state.tau, state.H
    N, M = H.shape
    tight = tight and use_channel_threshold
    acts = model.greedy_actions(*_probe_batch(state, tight))
    greedy = acts[0]
    se = greedy.copy()
    for n in range(N):
        if tau[n] == 1:
            continue  # no smaller AoI to infer from; keep the greedy component
        m = int(acts[1 + n, n])
        if m == 0:
            continue
        better = np.nonzero(H[n] > H[n, m - 1])[0] + 1
        if len(better) and rng.random() < xi:
            m = int(better[rng.integers(len(better))])
        se[n] = m
    if tight:
        for n in range(N):
            m = int(se[n])
            if m == 0 or H[n, m - 1] == 1:
                continue  # nothing to check at the lowest channel level
            if acts[1 + N + n * M + (m - 1), n] != m:
                se[n] = greedy[n]
    return se, greedy


def _select(model, state, eps, xi, rng, stage, use_channel_threshold=True) -> SelectionOutcome:
    N, M = model.N, model.M
    if rng.random() < eps:
        greedy = model.greedy_actions(state.tau[None, :], state.H[None, :, :])[0]
        a = np.asarray(model.random_action(state, rng), dtype=np.int64)
        return SelectionOutcome(a, None, greedy, True, False, stage)
    se, greedy = _se_action(model, state, xi, rng, stage == 1, use_channel_threshold)
    if not relaxed_constraint_ok(se, M):
        return SelectionOutcome(greedy.copy(), None, greedy, False, False, stage)
    se = fill_free_channels(se, M, rng)
    if not is_valid_action(se, N, M):
        return SelectionOutcome(greedy.copy(), None, greedy, False, False, stage)
    return SelectionOutcome(se.copy(), se, greedy, False, True, stage)


def loose_se_action(model, state: SysState, eps: float, xi: float,
                    rng: np.random.Generator) -> SelectionOutcome:
    """Explore with probability ``eps``; otherwise infer each sensor's channel from
    the greedy action at the state with its AoI decremented.

    A sensor inferred to use channel ``m`` moves, with probability ``xi``, to a
    uniformly chosen strictly better channel (if any).  Sensors inferred
    idle, or with AoI 1, keep their greedy component.  If no channel is
    claimed twice, free channels are filled with random idle sensors and the
    result is executed; otherwise the greedy action is executed.
    """
    return _select(model, state, eps, xi, rng, stage=0)


def tight_se_action(model, state: SysState, eps: float, xi: float,
                    rng: np.random.Generator, use_channel_threshold: bool = True) -> SelectionOutcome:
    """Loose inference followed by a channel-state check.

    For every sensor given channel ``m``, the greedy action at the state with
    that channel one level worse must still give the sensor channel ``m``;
    otherwise the sensor reverts to its greedy component.  The check is
    skipped at level 1.  ``use_channel_threshold=False`` disables the check
    (ablation).
    """
    return _select(model, state, eps, xi, rng, stage=1, use_channel_threshold=use_channel_threshold)


def epsilon_greedy_action(model, state: SysState, eps: float,
                          rng: np.random.Generator) -> SelectionOutcome:
    """Conventional exploration: random schedule with probability ``eps``, else greedy."""
    explore = rng.random() < eps
    greedy = model.greedy_actions(state.tau[None, :], state.H[None, :, :])[0]
    a = np.asarray(model.random_action(state, rng), dtype=np.int64) if explore else greedy.copy()
    return SelectionOutcome(a, None, greedy, bool(explore), False, 2)
