"""Seeded experiment orchestration, comparison tables and training-curve export."""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..agents import (SeDdpgConfig, SeDqnConfig, train_ddpg, train_dqn, train_se_ddpg,
                      train_se_dqn, write_metrics_csv)
from ..channel import ChannelModel, SchedulingEnv
from ..errors import ValidationError
from ..estimation import ProcessModel
from ..mdp import (StateSpace, TruncatedMdp, enumerate_actions, evaluate_policy, greedy_policy,
                   q_from_value, solve, write_solution_csv)
from ..structure import run_all_checks
from .config import AgentSpec, ExperimentConfig, load_config

DASH = "-"
FAILED = "fail"
_TRAINERS = {"dqn": (train_dqn, SeDqnConfig), "se_dqn": (train_se_dqn, SeDqnConfig),
             "ddpg": (train_ddpg, SeDdpgConfig), "se_ddpg": (train_se_ddpg, SeDdpgConfig)}


def fmt(x) -> str:
    """Six significant digits for every float written to CSV."""
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.6g}"
    return str(x)


@dataclass
class AgentRun:
    system: str
    label: str
    algorithm: str
    seed: int
    status: str           # ok | diverged | failed
    avg_mse: float
    avg_aoi: float
    eval_steps: int
    protocol: dict
    error: str = ""
    eval_log: str = ""
    metrics: str = ""


def eval_seed(seed: int) -> int:
    """Evaluation stream for a training seed (kept apart from the training stream)."""
    return 1_000_003 + int(seed)


class TablePolicy:
    """Picklable lookup policy over a solved MDP; AoI beyond the table is clamped."""

    def __init__(self, policy, space):
        self.policy, self.space = policy, space

    def __call__(self, state):
        return self.policy.action_for(self.space, state)


def greedy_aoi_policy(channel: ChannelModel):
    """Oldest sensors first; each takes its best free channel (lowest index on ties)."""
    N, M = channel.n_sensors, channel.n_channels

    def policy(state):
        order = np.lexsort((np.arange(N), -state.tau))
        a = np.zeros(N, dtype=np.int64)
        free = list(range(M))
        for n in order[:M]:
            m = max(free, key=lambda c: (state.H[n, c], -c))
            a[n] = m + 1
            free.remove(m)
        return a
    return policy


def random_policy(N: int, M: int, seed):
    actions = enumerate_actions(N, M)
    rng = np.random.default_rng(seed)
    return lambda state: actions[rng.integers(len(actions))]


def solve_system(processes, channel, tau_max: int, reward: str, gamma: float, tol: float):
    """Truncated MDP plus its value-iteration solution ``(mdp, value, qtable, policy)``."""
    space = StateSpace(channel.n_sensors, channel.n_channels, channel.levels, tau_max)
    mdp = TruncatedMdp(space, channel, processes, reward, gamma)
    value, qtable, policy = solve(mdp, tol)
    return mdp, value, qtable, policy


def _eval_env(processes, channel, reward):
    return SchedulingEnv(processes, channel, reward)


def _write_eval_log(path: Path, res) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "sum_mse", "sum_aoi"])
        for t, (m, a) in enumerate(zip(res.mse_trace, res.aoi_trace)):
            w.writerow([t, fmt(m), int(a)])


def run_agent(cfg: ExperimentConfig, spec: AgentSpec, seed: int, processes, channel,
              out_dir: Path, vi_policy=None) -> AgentRun:
    """Train (if needed) and evaluate one agent under one seed; never raises."""
    base = dict(system=cfg.name, label=spec.label, algorithm=spec.algorithm, seed=seed,
                protocol=cfg.protocol())
    tag = f"{spec.label}_seed{seed}"
    try:
        N, M = channel.n_sensors, channel.n_channels
        metrics_path = ""
        if spec.algorithm in _TRAINERS:
            trainer, cfg_cls = _TRAINERS[spec.algorithm]
            env = SchedulingEnv(processes, channel, cfg.reward)
            result = trainer(env, cfg_cls.from_dict(spec.params), seed=seed)
            metrics_path = out_dir / "metrics" / f"{tag}.csv"
            write_metrics_csv(metrics_path, result.metrics)
            write_curves_csv(out_dir / "curves" / f"{tag}.csv", result.metrics, cfg.curve_window)
            policy = result.extra["model"].policy()
        elif spec.algorithm == "vi":
            if vi_policy is None:
                raise ValidationError("value iteration did not produce a policy")
            policy = vi_policy
        elif spec.algorithm == "random":
            policy = random_policy(N, M, seed)
        elif spec.algorithm == "greedy_aoi":
            policy = greedy_aoi_policy(channel)
        else:
            raise ValidationError(f"unknown agent {spec.algorithm!r}")
        res = evaluate_policy(_eval_env(processes, channel, cfg.reward), policy,
                              steps=cfg.eval_steps, seed=eval_seed(seed),
                              divergence_mse=cfg.divergence_mse,
                              divergence_tau=cfg.divergence_tau)
        log_path = out_dir / "eval" / f"{tag}.csv"
        _write_eval_log(log_path, res)
        return AgentRun(**base, status="diverged" if res.diverged else "ok",
                        avg_mse=res.avg_mse, avg_aoi=res.avg_aoi, eval_steps=res.steps,
                        eval_log=str(log_path.relative_to(out_dir)),
                        metrics=str(Path(metrics_path).relative_to(out_dir)) if metrics_path else "")
    except Exception as exc:  # isolate per-agent failures
        return AgentRun(**base, status="failed", avg_mse=math.nan, avg_aoi=math.nan,
                        eval_steps=0, error=f"{type(exc).__name__}: {exc}")


def _job(args):
    return run_agent(*args)


def run_experiment(config, out_dir=None) -> Path:
    """Run every (agent, seed) pair of a config and write all result files.

    Layout of the results directory::

        system.json          processes and channel statistics used
        summary.json         config, protocol, per-run results, structure summary
        comparison.csv       rows (system, seed), one average-MSE column per agent
        metrics/<agent>_seed<k>.csv   per-episode training metrics
        curves/<agent>_seed<k>.csv    raw and moving-average training curves
        eval/<agent>_seed<k>.csv      per-step evaluation log
        vi/                  solved artifact and structure reports (if vi requested)
    """
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    out = Path(out_dir or cfg.output_dir)
    for sub in ("metrics", "curves", "eval"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    processes, channel = cfg.build_system()
    write_system_json(out / "system.json", cfg, processes, channel)

    vi_policy, structure, vi_error = None, None, ""
    if any(a.algorithm == "vi" for a in cfg.agents):
        try:
            mdp, value, _, policy = solve_system(processes, channel, cfg.tau_max, cfg.reward,
                                                 cfg.gamma, cfg.tol)
            structure = write_solved_artifact(out / "vi", cfg, processes, channel, mdp, value, policy)
            vi_policy = TablePolicy(policy, mdp.space)
        except Exception as exc:
            vi_error = f"{type(exc).__name__}: {exc}"

    jobs = [(cfg, spec, seed, processes, channel, out, vi_policy)
            for seed in cfg.seeds for spec in cfg.agents]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(min(cfg.workers, len(jobs))) as pool:
            runs = list(pool.map(_job, jobs))
    else:
        runs = [_job(job) for job in jobs]
    return _finish(cfg, out, runs, structure, vi_error)


def _finish(cfg, out: Path, runs, structure, vi_error) -> Path:
    for r in runs:
        if r.algorithm == "vi" and vi_error:
            r.error = vi_error
    header, rows = compare_table([asdict(r) for r in runs])
    write_table_csv(out / "comparison.csv", header, rows)
    summary = {"config": cfg.to_dict(), "protocol": cfg.protocol(),
               "divergence_rule": f"average sum MSE > {cfg.divergence_mse:g} or any AoI > "
                                  f"{cfg.divergence_tau} during evaluation",
               "runs": [asdict(r) for r in runs], "structure": structure}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=_json_default))
    return out


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialize {type(x).__name__}")


def compare_table(runs) -> tuple[list, list]:
    """Rows ``(system, seed)``, one column per agent label, cells = average sum MSE.

    Diverged runs render as ``-`` and failed runs as ``fail``.  All runs must
    share one evaluation protocol.
    """
    runs = list(runs)
    if not runs:
        raise ValidationError("no results to tabulate")
    protos = {json.dumps(r["protocol"], sort_keys=True) for r in runs}
    if len(protos) > 1:
        raise ValidationError(f"results use different evaluation protocols: {sorted(protos)}")
    labels = list(dict.fromkeys(r["label"] for r in runs))
    keys = list(dict.fromkeys((r["system"], r["seed"]) for r in runs))
    cells = {(r["system"], r["seed"], r["label"]): r for r in runs}
    rows = []
    for system, seed in keys:
        row = [system, seed]
        for label in labels:
            r = cells.get((system, seed, label))
            if r is None:
                row.append("")
            elif r["status"] == "ok":
                row.append(fmt(r["avg_mse"]))
            elif r["status"] == "diverged":
                row.append(DASH)
            else:
                row.append(FAILED)
        rows.append(row)
    return ["system", "seed"] + labels, rows


def write_table_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def load_runs(results_dir) -> list:
    path = Path(results_dir) / "summary.json"
    try:
        return json.loads(path.read_text())["runs"]
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{path}: not a results summary ({exc})") from None


def moving_average(x, window: int) -> np.ndarray:
    """Trailing mean over the last ``window`` points.

    The first ``window - 1`` positions average all points seen so far, so a
    window longer than the series yields the running mean.
    """
    if window < 1:
        raise ValidationError("window must be >= 1")
    x = np.asarray(x, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def export_curves(metrics, window: int = 10) -> list:
    """Per-episode raw and smoothed average sum MSE / AoI."""
    metrics = list(metrics)
    if not metrics:
        raise ValidationError("no metrics to export")
    mse = np.array([float(m["avg_sum_mse"]) for m in metrics])
    aoi = np.array([float(m["avg_sum_aoi"]) for m in metrics])
    mse_s, aoi_s = moving_average(mse, window), moving_average(aoi, window)
    return [{"episode": m["episode"], "stage": m.get("stage", ""), "avg_sum_mse": mse[i],
             "avg_sum_mse_smooth": mse_s[i], "avg_sum_aoi": aoi[i], "avg_sum_aoi_smooth": aoi_s[i]}
            for i, m in enumerate(metrics)]


CURVE_COLUMNS = ("episode", "stage", "avg_sum_mse", "avg_sum_mse_smooth", "avg_sum_aoi",
                 "avg_sum_aoi_smooth")


def write_curves_csv(path, metrics, window: int = 10) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for row in export_curves(metrics, window):
            w.writerow([fmt(row[c]) for c in CURVE_COLUMNS])


def read_metrics_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "avg_sum_mse" not in rows[0]:
        raise ValidationError(f"{path}: not a metrics CSV")
    return rows


# ---------------------------------------------------------------- artifacts

def system_dict(processes, channel, tau_max: int) -> dict:
    return {"processes": [p.to_dict() for p in processes],
            "channel_dist": channel.dist.tolist(), "drop_prob": channel.drop_prob.tolist(),
            "tau_max": tau_max}


def write_system_json(path, cfg: ExperimentConfig, processes, channel) -> None:
    data = {"name": cfg.name, "reward": cfg.reward, "gamma": cfg.gamma, "tol": cfg.tol,
            **system_dict(processes, channel, cfg.tau_max)}
    Path(path).write_text(json.dumps(data, indent=2))


def write_solved_artifact(out: Path, cfg: ExperimentConfig, processes, channel, mdp, value,
                          policy) -> dict:
    """Solved-MDP directory: ``system.json``, ``values.npy`` (full precision),
    ``solution.csv`` and one CSV per structure check.  Returns the check summary."""
    out.mkdir(parents=True, exist_ok=True)
    write_system_json(out / "system.json", cfg, processes, channel)
    np.save(out / "values.npy", np.asarray(value.v))
    write_solution_csv(out / "solution.csv", mdp, value, policy)
    return write_structure_reports(out, value, policy, mdp)


def write_structure_reports(out: Path, value, policy, mdp) -> dict:
    reports = run_all_checks(value, policy, mdp.space, mdp.model)
    summary = {}
    for rep in reports:
        rep.write_csv(out / f"structure_{rep.kind}.csv")
        summary[rep.kind] = {"holds": rep.holds, "violations": rep.n_violations,
                             "checked_pairs": rep.checked_pairs,
                             "tie_excluded": rep.tie_excluded, "skipped": rep.skipped,
                             "asymptotic": rep.asymptotic, "summary": rep.summary()}
    (out / "structure.json").write_text(json.dumps(summary, indent=2))
    return summary


def load_solved_artifact(path):
    """Rebuild ``(mdp, values, meta)`` from a solved-artifact directory."""
    path = Path(path)
    try:
        meta = json.loads((path / "system.json").read_text())
        v = np.load(path / "values.npy")
    except (OSError, ValueError) as exc:
        raise ValidationError(f"{path}: not a solved artifact ({exc})") from None
    try:
        tau_max = int(meta["tau_max"])
        procs = [ProcessModel.from_matrices(p["A"], p["C"], p["W"], p["V"], tau_max=tau_max)
                 for p in meta["processes"]]
        channel = ChannelModel(np.asarray(meta["channel_dist"]), np.asarray(meta["drop_prob"]))
        space = StateSpace(channel.n_sensors, channel.n_channels, channel.levels, tau_max)
        mdp = TruncatedMdp(space, channel, procs, meta["reward"], float(meta["gamma"]))
    except KeyError as exc:
        raise ValidationError(f"{path}/system.json: missing field {exc}") from None
    if v.shape != (space.size,):
        raise ValidationError(f"values.npy has shape {v.shape}, expected ({space.size},)")
    return mdp, v, meta


def check_artifact(path):
    """Re-verify a solved artifact: Bellman residual and all structure checks.

    Returns ``(residual, threshold, reports)``.
    """
    from ..mdp import ValueTable
    mdp, v, meta = load_solved_artifact(path)
    tol = float(meta["tol"])
    residual = float(np.max(np.abs(mdp.bellman(v) - v)))
    value = ValueTable(v, mdp.gamma, residual, 0, tol, mdp.reward_scale)
    policy = greedy_policy(q_from_value(mdp, value), mdp.actions, value.slack)
    reports = run_all_checks(value, policy, mdp.space, mdp.model)
    return residual, value.slack, reports
