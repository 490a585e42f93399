"""Shared pieces of the learning agents: state features, configs, schedules, metrics."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ..channel import SchedulingEnv
from ..errors import ValidationError

METRIC_COLUMNS = ("episode", "stage", "avg_sum_mse", "avg_sum_aoi", "epsilon", "xi", "loss")
STAGE_NAMES = ("loose", "tight", "conventional")


class Featurizer:
    """Map ``(tau, H)`` to a flat network input of width ``N + N*M``.

    AoI is divided by ``tau_norm``; channel levels are mapped to ``[0, 1]``
    via ``(h - 1) / (hbar - 1)``.
    """

    def __init__(self, N: int, M: int, levels: int, tau_norm: float = 20.0):
        if tau_norm <= 0:
            raise ValidationError("tau_norm must be positive")
        self.N, self.M, self.levels, self.tau_norm = N, M, levels, float(tau_norm)
        self._h_scale = 1.0 / (levels - 1) if levels > 1 else 0.0

    @property
    def width(self) -> int:
        return self.N + self.N * self.M

    def __call__(self, tau, H) -> np.ndarray:
        """Batched featurization: ``tau`` is ``(..., N)``, ``H`` is ``(..., N, M)``."""
        tau = np.asarray(tau, dtype=float)
        H = np.asarray(H, dtype=float)
        lead = tau.shape[:-1]
        h = (H.reshape(lead + (self.N * self.M,)) - 1.0) * self._h_scale
        return np.concatenate([tau / self.tau_norm, h], axis=-1)


@dataclass
class _BaseConfig:
    eps0: float = 1.0
    xi0: float = 1.0
    decay: float = 0.999
    floor: float = 0.01
    batch: int = 128
    memory: int = 20_000
    gamma: float = 0.95
    lr_decay: float = 0.001
    alpha1: float = 0.5
    stages: tuple = (50, 100, 150)
    horizon: int = 500
    hidden: tuple = (256, 256)
    tau_norm: float = 20.0
    reward_scale: float | None = None
    reward_clip: float | None = 100.0
    use_channel_threshold: bool = True
    use_loose_stage: bool = True

    def __post_init__(self):
        self.stages = tuple(int(s) for s in self.stages)
        self.hidden = tuple(int(h) for h in self.hidden)
        if len(self.stages) != 3 or min(self.stages) < 0:
            raise ValidationError(f"stages must be three non-negative episode counts, got {self.stages}")
        for name in ("eps0", "xi0", "decay", "floor", "gamma", "alpha1", "tau_norm"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        for name in ("batch", "memory", "horizon"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be a positive integer")
        if self.lr_decay < 0:
            raise ValidationError("lr_decay must be non-negative")
        if not self.gamma < 1:
            raise ValidationError("gamma must be < 1")
        if not 0 < self.alpha1 <= 1 or self.decay > 1 or self.floor > 1:
            raise ValidationError("alpha1, decay and floor must lie in (0, 1]")
        if not self.hidden or min(self.hidden) < 1:
            raise ValidationError("hidden layer widths must be positive")
        if self.reward_scale is not None and not self.reward_scale > 0:
            raise ValidationError("reward_scale must be positive")
        if self.reward_clip is not None and not self.reward_clip > 0:
            raise ValidationError("reward_clip must be positive")
        if self.batch > self.memory:
            raise ValidationError("batch size cannot exceed the replay capacity")

    @property
    def episodes(self) -> int:
        return sum(self.stages)

    def stage_of(self, episode: int) -> int:
        """0 = loose SE, 1 = tight SE, 2 = conventional (episodes are 0-based)."""
        e1, e2, _ = self.stages
        if episode < e1:
            return 0 if self.use_loose_stage else 1
        if episode < e1 + e2:
            return 1
        return 2

    def to_dict(self) -> dict:
        out = asdict(self)
        out["stages"] = list(self.stages)
        out["hidden"] = list(self.hidden)
        return out

    @classmethod
    def from_dict(cls, data: dict):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class SeDqnConfig(_BaseConfig):
    lr: float = 1e-4
    target_period: int = 100

    def __post_init__(self):
        super().__post_init__()
        if not self.lr > 0 or int(self.target_period) < 1:
            raise ValidationError("lr and target_period must be positive")


@dataclass
class SeDdpgConfig(_BaseConfig):
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    delta: float = 0.005
    alpha2: float = 0.9
    noise_sigma: float = 0.3
    noise_decay: float = 0.999
    center_action_gradient: bool = True
    raw_actor_actions: bool = True

    def __post_init__(self):
        super().__post_init__()
        if not (self.actor_lr > 0 and self.critic_lr > 0 and self.noise_sigma >= 0):
            raise ValidationError("learning rates must be positive and noise_sigma non-negative")
        if not 0 < self.delta <= 1 or not 0 < self.alpha2 <= 1 or not 0 < self.noise_decay <= 1:
            raise ValidationError("delta, alpha2 and noise_decay must lie in (0, 1]")


class Decay:
    """Multiplicative per-step decay with a floor."""

    def __init__(self, start: float, rate: float, floor: float):
        self.value, self.rate, self.floor = float(start), float(rate), float(floor)

    def step(self) -> float:
        self.value = max(self.floor, self.value * self.rate)
        return self.value


def default_reward_scale(env: SchedulingEnv) -> float:
    """Total one-step MSE ``sum_n Tr(f(Pbar_n))`` (the fresh-information floor)."""
    return float(env.mse_table[:, 0].sum())


class RewardShaper:
    """Learning signal ``max(r / scale, -clip)``.

    Remote MSE grows geometrically with AoI, so a single starved sensor can
    produce rewards many orders of magnitude beyond the typical range and
    stall Adam through its second-moment estimate.  Clipping only affects
    states far worse than any reasonable policy visits.
    """

    def __init__(self, scale: float, clip: float | None):
        self.scale, self.clip = float(scale), clip

    def __call__(self, r: float) -> float:
        x = r / self.scale
        return x if self.clip is None else max(x, -self.clip)


@dataclass
class EpisodeLog:
    """Running per-episode statistics, flushed into one metrics row."""

    mse: float = 0.0
    aoi: float = 0.0
    steps: int = 0
    loss: float = 0.0
    updates: int = 0

    def record(self, env: SchedulingEnv, tau: np.ndarray) -> None:
        self.mse += env.sum_mse(tau)
        self.aoi += float(tau.sum())
        self.steps += 1

    def row(self, episode: int, stage: int, eps: float, xi: float) -> dict:
        return {"episode": episode, "stage": STAGE_NAMES[stage],
                "avg_sum_mse": self.mse / self.steps, "avg_sum_aoi": self.aoi / self.steps,
                "epsilon": eps, "xi": xi,
                "loss": self.loss / self.updates if self.updates else float("nan")}


@dataclass
class TrainResult:
    """Trained networks, per-episode metrics and constraint bookkeeping."""

    nets: dict
    metrics: list
    config: _BaseConfig
    actions_checked: int = 0
    constraint_failures: int = 0
    extra: dict = field(default_factory=dict)

    def series(self, column: str) -> np.ndarray:
        return np.array([row[column] for row in self.metrics], dtype=float)


def write_metrics_csv(path, metrics) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for row in metrics:
            w.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return f"{x:.6g}"
    return x
