"""Fading channels, the scheduling environment, and random system generation.

Conventions: sensors are indexed ``0..N-1``; channel *numbers* follow the
action encoding, ``1..M`` with ``0`` meaning "not scheduled"; channel-state
levels are ``1..hbar`` (higher is better), matching ``drop_prob[level - 1]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .estimation import REWARD_KINDS, ProcessModel, mse_matrix, reward_from_table

PAPER_DROP_PROB = (0.2, 0.15, 0.1, 0.05, 0.01)


@dataclass(frozen=True)
class ChannelModel:
    """Per (sensor, channel) i.i.d. block-fading level distributions.

    ``dist[n, m-1, i-1]`` is the probability that sensor ``n`` sees level ``i``
    on channel ``m``; ``drop_prob[i-1]`` is the packet drop probability at
    level ``i``.
    """

    dist: np.ndarray
    drop_prob: np.ndarray

    def __post_init__(self):
        dist = np.asarray(self.dist, dtype=float)
        drop = np.asarray(self.drop_prob, dtype=float)
        if dist.ndim != 3:
            raise ValidationError(f"dist must have shape (N, M, hbar), got {dist.shape}")
        N, M, h = dist.shape
        if not 1 <= M <= N:
            raise ValidationError(f"need 1 <= M <= N, got N={N}, M={M}")
        if drop.shape != (h,):
            raise ValidationError(f"drop_prob must have {h} entries, got {drop.shape}")
        if np.any(drop < 0) or np.any(drop > 1):
            raise ValidationError("drop probabilities must lie in [0, 1]")
        if np.any(np.diff(drop) > 0):
            raise ValidationError("drop probabilities must be non-increasing in the level")
        if np.any(dist < 0) or not np.allclose(dist.sum(axis=-1), 1.0, atol=1e-9, rtol=0):
            raise ValidationError("each channel-state distribution must be a probability vector")
        dist.setflags(write=False)
        drop.setflags(write=False)
        object.__setattr__(self, "dist", dist)
        object.__setattr__(self, "drop_prob", drop)
        cdf = np.cumsum(dist, axis=-1)
        cdf[..., -1] = 1.0
        object.__setattr__(self, "_cdf", cdf)

    @property
    def n_sensors(self) -> int:
        return self.dist.shape[0]

    @property
    def n_channels(self) -> int:
        return self.dist.shape[1]

    @property
    def levels(self) -> int:
        return self.dist.shape[2]

    @property
    def success(self) -> np.ndarray:
        """Packet success rate per level, ``1 - drop_prob``."""
        return 1.0 - self.drop_prob

    def to_dict(self) -> dict:
        return {"dist": self.dist.tolist(), "drop_prob": self.drop_prob.tolist()}


@dataclass(frozen=True)
class SysState:
    """AoI vector plus channel-state matrix."""

    tau: np.ndarray
    H: np.ndarray

    def __post_init__(self):
        tau = np.array(self.tau, dtype=np.int64)
        H = np.array(self.H, dtype=np.int64)
        tau.setflags(write=False)
        H.setflags(write=False)
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "H", H)

    def key(self) -> tuple:
        return tuple(self.tau.tolist()) + tuple(self.H.ravel().tolist())

    def __eq__(self, other):
        return isinstance(other, SysState) and self.key() == other.key()

    def __hash__(self):
        return hash(self.key())


def is_valid_action(action, N: int, M: int) -> bool:
    """Every channel carries exactly one sensor (a sensor holds at most one channel
    by construction of the encoding)."""
    a = np.asarray(action)
    if a.shape != (N,) or np.any(a < 0) or np.any(a > M):
        return False
    counts = np.bincount(a.astype(np.int64), minlength=M + 1)
    return bool(np.all(counts[1:] == 1))


def validate_action(action, N: int, M: int) -> np.ndarray:
    a = np.asarray(action)
    if not np.issubdtype(a.dtype, np.integer):
        if a.size and not np.all(np.equal(np.mod(a, 1), 0)):
            raise ValidationError(f"action entries must be integers, got {action!r}")
        a = a.astype(np.int64)
    if not is_valid_action(a, N, M):
        raise ValidationError(
            f"action {a.tolist()} violates the assignment constraint "
            f"(each of the {M} channels must carry exactly one of the {N} sensors)")
    return a


def sample_channel_matrix(model: ChannelModel, rng: np.random.Generator) -> np.ndarray:
    """Draw ``H`` with each entry independent from its level distribution."""
    u = rng.random((model.n_sensors, model.n_channels))
    return (u[..., None] >= model._cdf).sum(axis=-1) + 1


def success_probability(model: ChannelModel, n: int, m: int, H) -> float:
    """Success probability of sensor ``n`` transmitting on channel number ``m`` (1-based)."""
    H = np.asarray(H)
    if not 0 <= n < model.n_sensors:
        raise ValidationError(f"sensor index {n} out of range 0..{model.n_sensors - 1}")
    if not 1 <= m <= model.n_channels:
        raise ValidationError(f"channel number {m} out of range 1..{model.n_channels}")
    if H.shape != (model.n_sensors, model.n_channels):
        raise ValidationError(f"H must have shape {(model.n_sensors, model.n_channels)}")
    level = int(H[n, m - 1])
    if not 1 <= level <= model.levels:
        raise ValidationError(f"channel level {level} out of range 1..{model.levels}")
    return float(1.0 - model.drop_prob[level - 1])


def _advance(tau: np.ndarray, action: np.ndarray, H: np.ndarray, model: ChannelModel,
             u: np.ndarray, tau_max: int | None) -> tuple[np.ndarray, np.ndarray]:
    N = len(tau)
    recv = np.zeros(N, dtype=np.int64)
    sched = np.nonzero(action)[0]
    if len(sched):
        p = model.success[H[sched, action[sched] - 1] - 1]
        recv[sched] = (u[sched] < p).astype(np.int64)
    nxt = np.where(recv == 1, 1, tau + 1)
    if tau_max is not None:
        nxt = np.minimum(nxt, tau_max)
    return nxt, recv


def env_step(state: SysState, action, model: ChannelModel,
             processes: Sequence[ProcessModel], reward_kind: str,
             rng: np.random.Generator, tau_max: int | None = None):
    """Apply one scheduling decision.

    The reward is that of the *current* AoI.  Random draws are taken in a
    fixed order: ``N`` reception uniforms (always, scheduled or not), then
    the next channel matrix.  Returns ``(next_state, reward, receptions)``.
    """
    N, M = model.n_sensors, model.n_channels
    a = validate_action(action, N, M)
    table = mse_matrix(processes)
    tau = state.tau
    if np.any(tau > table.shape[1]):
        raise ValidationError(f"AoI {tau.tolist()} beyond the MSE table ({table.shape[1]})")
    r = float(reward_from_table(table, tau, reward_kind))
    u = rng.random(N)
    nxt, recv = _advance(tau, a, state.H, model, u, tau_max)
    H_next = sample_channel_matrix(model, rng)
    return SysState(nxt, H_next), r, recv


def env_reset(model: ChannelModel, processes: Sequence[ProcessModel],
              rng: np.random.Generator, init=None) -> SysState:
    """Initial state: all-ones AoI unless ``init`` is given, fresh channel draw."""
    N = model.n_sensors
    tau = np.ones(N, dtype=np.int64) if init is None else np.asarray(init, dtype=np.int64)
    if tau.shape != (N,) or np.any(tau < 1):
        raise ValidationError(f"initial AoI must be {N} integers >= 1, got {init!r}")
    return SysState(tau, sample_channel_matrix(model, rng))


class SchedulingEnv:
    """Stateful, seeded wrapper around :func:`env_step` / :func:`env_reset`.

    ``tau_max`` switches on AoI clamping (used when comparing against the
    truncated MDP).  Without it the AoI is unbounded and the MSE table is
    extended to ``table_max`` entries.
    """

    def __init__(self, processes: Sequence[ProcessModel], channel: ChannelModel,
                 reward_kind: str = "sum_mse", seed=None, tau_max: int | None = None,
                 table_max: int = 10_000):
        if reward_kind not in REWARD_KINDS:
            raise ValidationError(f"unknown reward kind {reward_kind!r}")
        if len(processes) != channel.n_sensors:
            raise ValidationError("number of processes must equal the number of sensors")
        self.channel = channel
        self.reward_kind = reward_kind
        self.tau_max = tau_max
        size = tau_max if tau_max is not None else table_max
        self.processes = [p if p.tau_max >= size else p.with_tau_max(size) for p in processes]
        self._table = mse_matrix(self.processes, size)
        self.rng = np.random.default_rng(seed)
        self.state: SysState | None = None

    @property
    def n_sensors(self) -> int:
        return self.channel.n_sensors

    @property
    def n_channels(self) -> int:
        return self.channel.n_channels

    @property
    def mse_table(self) -> np.ndarray:
        return self._table

    def sum_mse(self, tau) -> float:
        tau = np.asarray(tau)
        if np.any(tau > self._table.shape[1]):
            return float("inf")
        return float(self._table[np.arange(len(tau)), tau - 1].sum())

    def reset(self, init=None) -> SysState:
        self.state = env_reset(self.channel, self.processes, self.rng, init)
        return self.state

    def step(self, action):
        if self.state is None:
            raise ValidationError("call reset() before step()")
        N, M = self.n_sensors, self.n_channels
        a = validate_action(action, N, M)
        tau = self.state.tau
        if np.any(tau > self._table.shape[1]):
            raise ValidationError(f"AoI {tau.tolist()} beyond the MSE table")
        r = float(reward_from_table(self._table, tau, self.reward_kind))
        u = self.rng.random(N)
        nxt, recv = _advance(tau, a, self.state.H, self.channel, u, self.tau_max)
        self.state = SysState(nxt, sample_channel_matrix(self.channel, self.rng))
        return self.state, r, recv


@dataclass
class SystemSpec:
    """Generator settings for random systems; defaults follow the numerical setup."""

    state_dim: int = 2
    meas_dim: int = 1
    radius_range: tuple[float, float] = (1.0, 1.4)
    drop_prob: tuple[float, ...] = PAPER_DROP_PROB
    tau_max: int = 16
    extra: dict = field(default_factory=dict)


def random_system_matrix(l: int, rng: np.random.Generator,
                         radius_range=(1.0, 1.4)) -> np.ndarray:
    lo, hi = radius_range
    while True:
        A = rng.uniform(-1.0, 1.0, (l, l))
        rho = np.max(np.abs(np.linalg.eigvals(A)))
        target = rng.uniform(lo, hi)
        if rho > 1e-6 and lo < target < hi:
            return A * (target / rho)


def random_channel_model(N: int, M: int, rng: np.random.Generator,
                         drop_prob=PAPER_DROP_PROB) -> ChannelModel:
    u = rng.uniform(0.0, 1.0, (N, M, len(drop_prob)))
    return ChannelModel(u / u.sum(axis=-1, keepdims=True), np.asarray(drop_prob, dtype=float))


def generate_random_system(N: int, M: int, spec: SystemSpec | None = None, seed=None):
    """Random processes and channel statistics for an ``N``-sensor, ``M``-channel system.

    Returns ``(processes, channel_model)``.  System matrices have entries
    uniform in (-1, 1) rescaled to a spectral radius drawn from
    ``spec.radius_range``; measurement matrices are uniform in (0, 1);
    noise covariances are identities.
    """
    spec = spec or SystemSpec()
    if not (isinstance(N, (int, np.integer)) and isinstance(M, (int, np.integer))) or not 1 <= M <= N:
        raise ValidationError(f"need integers 1 <= M <= N, got N={N}, M={M}")
    rng = np.random.default_rng(seed)
    l, e = spec.state_dim, spec.meas_dim
    processes = []
    for _ in range(N):
        A = random_system_matrix(l, rng, spec.radius_range)
        C = rng.uniform(0.0, 1.0, (e, l))
        processes.append(ProcessModel.from_matrices(A, C, np.eye(l), np.eye(e), tau_max=spec.tau_max))
    return processes, random_channel_model(N, M, rng, spec.drop_prob)
