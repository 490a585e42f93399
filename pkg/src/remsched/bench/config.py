"""Experiment configuration: a YAML file validated with line-numbered errors.

Schema (all blocks except ``system`` and ``agents`` are optional)::

    name: demo
    system:                 # random draw ...
      N: 2
      M: 1
      levels: 5
      drop_prob: [0.2, 0.15, 0.1, 0.05, 0.01]
      tau_max: 16
      seed: 0
    # ... or explicit matrices:
    #   processes: [{A: [[..]], C: [[..]], W: [[..]], V: [[..]]}, ...]
    #   channel_dist: N x M x levels nested list
    reward: sum_mse
    solver: {gamma: 0.95, tol: 1.0e-8}
    agents:
      - algorithm: vi
      - algorithm: se_dqn
        label: se_dqn_small      # optional, defaults to the algorithm name
        params: {stages: [50, 100, 150], hidden: [64, 64]}
    eval: {steps: 10000, seeds: [0, 1], divergence_mse: 1.0e6, divergence_tau: 10000}
    output: {dir: results, curve_window: 10}
    limits: {max_dqn_outputs: 10000}
    workers: 1
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from ..agents.common import SeDdpgConfig, SeDqnConfig
from ..channel import PAPER_DROP_PROB, ChannelModel, SystemSpec, generate_random_system
from ..errors import ValidationError
from ..estimation import REWARD_KINDS, ProcessModel
from ..mdp import action_count

ALGORITHMS = ("vi", "dqn", "se_dqn", "ddpg", "se_ddpg", "random", "greedy_aoi")
DQN_FAMILY = ("dqn", "se_dqn")
TOP_LEVEL = ("name", "system", "reward", "solver", "agents", "eval", "output", "limits", "workers")


class ConfigError(ValidationError):
    """Validation error carrying the offending field path and source line."""

    def __init__(self, message: str, path: str = "", line: int | None = None, source: str = ""):
        where = f"{source}:{line}: " if line is not None else (f"{source}: " if source else "")
        field_part = f"{path}: " if path else ""
        super().__init__(f"{where}{field_part}{message}")
        self.path, self.line = path, line


class _Locator:
    """Maps dotted field paths to line numbers of a composed YAML document."""

    def __init__(self, text: str, source: str):
        self.source = source
        try:
            self.root = yaml.compose(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            raise ConfigError(f"not valid YAML ({getattr(exc, 'problem', exc)})",
                              line=mark.line + 1 if mark else None, source=source) from None

    def line(self, path: list) -> int | None:
        node, line = self.root, None
        if node is not None:
            line = node.start_mark.line + 1
        for key in path:
            if isinstance(node, yaml.MappingNode):
                nxt = next((v for k, v in node.value if k.value == key), None)
                key_node = next((k for k, _ in node.value if k.value == key), None)
                if nxt is None:
                    return line
                line = key_node.start_mark.line + 1
                node = nxt
            elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
                node = node.value[key]
                line = node.start_mark.line + 1
            else:
                return line
        return line

    def error(self, path: list, message: str) -> ConfigError:
        dotted = "".join(f"[{p}]" if isinstance(p, int) else (f".{p}" if i else p)
                         for i, p in enumerate(path))
        return ConfigError(message, dotted, self.line(path), self.source)


@dataclass
class AgentSpec:
    algorithm: str
    label: str
    params: dict = field(default_factory=dict)

    def dqn_config(self) -> SeDqnConfig:
        return SeDqnConfig.from_dict(self.params)

    def ddpg_config(self) -> SeDdpgConfig:
        return SeDdpgConfig.from_dict(self.params)


@dataclass
class ExperimentConfig:
    name: str
    system: dict
    reward: str = "sum_mse"
    gamma: float = 0.95
    tol: float = 1e-8
    agents: list = field(default_factory=list)
    eval_steps: int = 10_000
    seeds: list = field(default_factory=lambda: [0])
    divergence_mse: float = 1e6
    divergence_tau: int = 10_000
    output_dir: str = "results"
    curve_window: int = 10
    max_dqn_outputs: int = 10_000
    workers: int = 1
    source: str = ""

    @property
    def N(self) -> int:
        return int(self.system["N"])

    @property
    def M(self) -> int:
        return int(self.system["M"])

    @property
    def tau_max(self) -> int:
        return int(self.system.get("tau_max", 16))

    def build_system(self):
        """``(processes, channel_model)`` for this configuration."""
        s = self.system
        tau_max = self.tau_max
        if "processes" in s:
            procs = [ProcessModel.from_matrices(p["A"], p["C"], p["W"], p["V"], tau_max=tau_max)
                     for p in s["processes"]]
            channel = ChannelModel(np.asarray(s["channel_dist"], dtype=float),
                                   np.asarray(s["drop_prob"], dtype=float))
            return procs, channel
        spec = SystemSpec(drop_prob=tuple(s["drop_prob"]), tau_max=tau_max,
                          radius_range=tuple(s.get("radius_range", (1.0, 1.4))))
        return generate_random_system(self.N, self.M, spec, seed=s.get("seed"))

    def protocol(self) -> dict:
        """The evaluation protocol; results are only comparable when these agree."""
        return {"eval_steps": self.eval_steps, "divergence_mse": self.divergence_mse,
                "divergence_tau": self.divergence_tau, "reward": self.reward}

    def to_dict(self) -> dict:
        return {"name": self.name, "system": self.system, "reward": self.reward,
                "solver": {"gamma": self.gamma, "tol": self.tol},
                "agents": [{"algorithm": a.algorithm, "label": a.label, "params": a.params}
                           for a in self.agents],
                "eval": {"steps": self.eval_steps, "seeds": self.seeds,
                         "divergence_mse": self.divergence_mse,
                         "divergence_tau": self.divergence_tau},
                "output": {"dir": self.output_dir, "curve_window": self.curve_window},
                "limits": {"max_dqn_outputs": self.max_dqn_outputs}, "workers": self.workers}


def _num(loc, path, value, kind=float, positive=False, minimum=None):
    if kind is float and isinstance(value, str):
        try:  # YAML 1.1 reads exponent forms such as 1e-8 as strings
            value = float(value)
        except ValueError:
            pass
    ok_types = (int,) if kind is int else (int, float)
    if isinstance(value, bool) or not isinstance(value, ok_types):
        raise loc.error(path, f"expected {'an integer' if kind is int else 'a number'}, got {value!r}")
    if positive and not value > 0:
        raise loc.error(path, f"must be positive, got {value!r}")
    if minimum is not None and value < minimum:
        raise loc.error(path, f"must be >= {minimum}, got {value!r}")
    return kind(value)


def _mapping(loc, path, value, allowed):
    if not isinstance(value, dict):
        raise loc.error(path, f"expected a mapping, got {type(value).__name__}")
    for key in value:
        if key not in allowed:
            raise loc.error(path + [key], f"unknown field (allowed: {', '.join(allowed)})")
    return value


def _system(loc, raw) -> dict:
    path = ["system"]
    if raw is None:
        raise loc.error(path, "missing required block")
    allowed = ("N", "M", "levels", "drop_prob", "tau_max", "seed", "radius_range",
               "processes", "channel_dist")
    s = dict(_mapping(loc, path, raw, allowed))
    for key in ("N", "M"):
        if key not in s:
            raise loc.error(path + [key], "missing required field")
        s[key] = _num(loc, path + [key], s[key], int, positive=True)
    if s["M"] > s["N"]:
        raise loc.error(path + ["M"], f"need M <= N, got M={s['M']} > N={s['N']}")
    s["tau_max"] = _num(loc, path + ["tau_max"], s.get("tau_max", 16), int, minimum=2)
    explicit = "processes" in s or "channel_dist" in s
    if explicit:
        for key in ("processes", "channel_dist", "drop_prob"):
            if key not in s:
                raise loc.error(path + [key], "required when explicit matrices are given")
        if not isinstance(s["processes"], list) or len(s["processes"]) != s["N"]:
            raise loc.error(path + ["processes"], f"expected a list of {s['N']} processes")
        for i, p in enumerate(s["processes"]):
            _mapping(loc, path + ["processes", i], p, ("A", "C", "W", "V"))
            for key in ("A", "C", "W", "V"):
                if key not in p:
                    raise loc.error(path + ["processes", i, key], "missing matrix")
        dist = np.asarray(s["channel_dist"], dtype=float)
        if dist.ndim != 3 or dist.shape[:2] != (s["N"], s["M"]):
            raise loc.error(path + ["channel_dist"], f"expected shape (N, M, levels), got {dist.shape}")
        s["levels"] = int(dist.shape[2])
    levels = _num(loc, path + ["levels"], s.get("levels", 5), int, minimum=1)
    s["levels"] = levels
    if "drop_prob" not in s:
        if levels != len(PAPER_DROP_PROB):
            raise loc.error(path + ["drop_prob"], f"required when levels != {len(PAPER_DROP_PROB)}")
        s["drop_prob"] = list(PAPER_DROP_PROB)
    drop = s["drop_prob"]
    if not isinstance(drop, list) or len(drop) != levels:
        raise loc.error(path + ["drop_prob"], f"expected a list of {levels} probabilities")
    for i, p in enumerate(drop):
        _num(loc, path + ["drop_prob", i], p)
        if not 0 <= p <= 1:
            raise loc.error(path + ["drop_prob", i], f"probability outside [0, 1]: {p}")
    if any(b > a for a, b in zip(drop, drop[1:])):
        raise loc.error(path + ["drop_prob"], "drop probabilities must be non-increasing in the level")
    if "seed" in s and s["seed"] is not None:
        s["seed"] = _num(loc, path + ["seed"], s["seed"], int, minimum=0)
    if "radius_range" in s:
        rr = s["radius_range"]
        if not (isinstance(rr, list) and len(rr) == 2 and 1.0 <= rr[0] < rr[1]):
            raise loc.error(path + ["radius_range"], "expected [lo, hi] with 1 <= lo < hi")
    return s


def _agents(loc, raw, N, M, cap) -> list:
    path = ["agents"]
    if not isinstance(raw, list) or not raw:
        raise loc.error(path, "expected a non-empty list of agents")
    out, labels = [], set()
    for i, entry in enumerate(raw):
        p = path + [i]
        if isinstance(entry, str):
            entry = {"algorithm": entry}
        _mapping(loc, p, entry, ("algorithm", "label", "params"))
        algo = entry.get("algorithm")
        if algo not in ALGORITHMS:
            raise loc.error(p + ["algorithm"], f"unknown agent {algo!r} (expected one of {', '.join(ALGORITHMS)})")
        label = str(entry.get("label", algo))
        if label in labels:
            raise loc.error(p + ["label"], f"duplicate agent label {label!r}")
        labels.add(label)
        params = entry.get("params") or {}
        _mapping(loc, p + ["params"], params, _param_names(algo))
        spec = AgentSpec(algo, label, dict(params))
        try:
            if algo in DQN_FAMILY:
                spec.dqn_config()
            elif algo in ("ddpg", "se_ddpg"):
                spec.ddpg_config()
        except (ValidationError, TypeError) as exc:
            raise loc.error(p + ["params"], str(exc)) from None
        if algo in DQN_FAMILY and action_count(N, M) > cap:
            raise loc.error(p + ["algorithm"],
                            f"{algo} needs {action_count(N, M)} Q-outputs for N={N}, M={M}, "
                            f"above limits.max_dqn_outputs={cap}")
        out.append(spec)
    return out


def _param_names(algo: str) -> tuple:
    from dataclasses import fields as dc_fields
    if algo in DQN_FAMILY:
        return tuple(f.name for f in dc_fields(SeDqnConfig))
    if algo in ("ddpg", "se_ddpg"):
        return tuple(f.name for f in dc_fields(SeDdpgConfig))
    return ()


def parse_config(text: str, source: str = "<config>", base_dir: Path | None = None) -> ExperimentConfig:
    loc = _Locator(text, source)
    data = yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", source=source, line=1)
    _mapping(loc, [], data, TOP_LEVEL)
    system = _system(loc, data.get("system"))
    reward = data.get("reward", "sum_mse")
    if reward not in REWARD_KINDS:
        raise loc.error(["reward"], f"unknown reward kind {reward!r} (expected one of {', '.join(REWARD_KINDS)})")
    solver = _mapping(loc, ["solver"], data.get("solver") or {}, ("gamma", "tol"))
    gamma = _num(loc, ["solver", "gamma"], solver.get("gamma", 0.95), positive=True)
    if gamma >= 1:
        raise loc.error(["solver", "gamma"], "must be < 1")
    tol = _num(loc, ["solver", "tol"], solver.get("tol", 1e-8), positive=True)
    limits = _mapping(loc, ["limits"], data.get("limits") or {}, ("max_dqn_outputs",))
    cap = _num(loc, ["limits", "max_dqn_outputs"], limits.get("max_dqn_outputs", 10_000), int, positive=True)
    agents = _agents(loc, data.get("agents"), system["N"], system["M"], cap)
    ev = _mapping(loc, ["eval"], data.get("eval") or {},
                  ("steps", "seeds", "divergence_mse", "divergence_tau"))
    steps = _num(loc, ["eval", "steps"], ev.get("steps", 10_000), int, positive=True)
    seeds = ev.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds:
        raise loc.error(["eval", "seeds"], "expected a non-empty list of integer seeds")
    seeds = [_num(loc, ["eval", "seeds", i], s, int, minimum=0) for i, s in enumerate(seeds)]
    if len(set(seeds)) != len(seeds):
        raise loc.error(["eval", "seeds"], "seeds must be distinct")
    div_mse = _num(loc, ["eval", "divergence_mse"], ev.get("divergence_mse", 1e6), positive=True)
    div_tau = _num(loc, ["eval", "divergence_tau"], ev.get("divergence_tau", 10_000), int, positive=True)
    out = _mapping(loc, ["output"], data.get("output") or {}, ("dir", "curve_window"))
    out_dir = str(out.get("dir", "results"))
    if base_dir is not None and not Path(out_dir).is_absolute():
        out_dir = str(base_dir / out_dir)
    window = _num(loc, ["output", "curve_window"], out.get("curve_window", 10), int, positive=True)
    workers = _num(loc, ["workers"], data.get("workers", 1), int, positive=True)
    name = str(data.get("name", Path(source).stem if source else "experiment"))
    return ExperimentConfig(name, system, reward, gamma, tol, agents, steps, seeds, div_mse,
                            div_tau, out_dir, window, cap, workers, source)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config ({exc.strerror})", source=str(path)) from None
    return parse_config(text, str(path))
