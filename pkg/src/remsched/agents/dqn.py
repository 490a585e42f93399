"""Structure-enhanced DQN and the conventional DQN baseline."""
from __future__ import annotations

import numpy as np

from ..channel import SchedulingEnv, is_valid_action
from ..errors import ValidationError
from ..mdp import ActionIndex
from ..nn import Adam, Mlp, ReplayMemory, learning_rate, sync_target
from .common import (Decay, EpisodeLog, Featurizer, SeDqnConfig, TrainResult,
                     RewardShaper, default_reward_scale)
from .selection import epsilon_greedy_action, loose_se_action, tight_se_action


class QNetModel:
    """Greedy model backed by a Q-network with one output per enumerated action."""

    def __init__(self, net: Mlp, featurizer: Featurizer, actions: np.ndarray):
        if net.sizes[0] != featurizer.width or net.sizes[-1] != len(actions):
            raise ValidationError("Q-network shape does not match the features / action list")
        self.net, self.featurizer, self.actions = net, featurizer, actions
        self.N, self.M = featurizer.N, featurizer.M

    def q_values(self, taus, Hs) -> np.ndarray:
        return self.net.forward(self.featurizer(taus, Hs))

    def greedy_actions(self, taus, Hs) -> np.ndarray:
        return self.actions[np.argmax(self.q_values(taus, Hs), axis=1)]

    def random_action(self, state, rng: np.random.Generator) -> np.ndarray:
        return self.actions[rng.integers(len(self.actions))]

    def policy(self):
        """Deterministic greedy policy ``SysState -> action``."""
        return lambda state: self.greedy_actions(state.tau[None, :], state.H[None, :, :])[0]


def _td_target(batch, target_net: Mlp, gamma: float) -> np.ndarray:
    return batch["r"] + gamma * target_net.forward(batch["s_next"]).max(axis=1)


def se_dqn_loss(batch: dict, qnet: Mlp, target_net: Mlp, gamma: float, alpha1: float):
    """Structure-enhanced batch loss and its parameter gradients.

    ``batch`` holds ``s``, ``s_next`` (features), ``a``, ``a_hat``, ``a_tilde``
    (action indices; ``a_hat = -1`` when no SE action was executed) and
    ``r``.  Transitions whose executed action is the SE action are weighted
    ``alpha1 * TD^2 + (1 - alpha1) * AD^2`` with
    ``AD = Q(s, a_hat) - Q(s, a_tilde)``; the rest use ``TD^2``.  The target
    ``y`` is treated as a constant.

    Returns ``(loss, grads)``.
    """
    a, a_hat, a_tilde = batch["a"], batch["a_hat"], batch["a_tilde"]
    B = len(a)
    if not (a.shape == a_hat.shape == a_tilde.shape == batch["r"].shape == (B,)):
        raise ValidationError("batch fields disagree in length")
    y = _td_target(batch, target_net, gamma)
    q, cache = qnet.forward_train(batch["s"])
    rows = np.arange(B)
    td = y - q[rows, a]
    se = a_hat == a
    ad = np.zeros(B)
    se_rows = rows[se]
    if len(se_rows):
        ad[se] = q[se_rows, a_hat[se]] - q[se_rows, a_tilde[se]]
    per = np.where(se, alpha1 * td ** 2 + (1.0 - alpha1) * ad ** 2, td ** 2)
    loss = float(per.mean())

    g = np.zeros_like(q)
    g[rows, a] = -2.0 * np.where(se, alpha1 * td, td) / B
    if len(se_rows):
        gad = 2.0 * (1.0 - alpha1) * ad[se] / B
        np.add.at(g, (se_rows, a_hat[se]), gad)
        np.add.at(g, (se_rows, a_tilde[se]), -gad)
    grads, _ = qnet.backward(cache, g)
    return loss, grads


def dqn_loss(batch: dict, qnet: Mlp, target_net: Mlp, gamma: float):
    """Conventional squared TD loss ``mean((y - Q(s, a))^2)`` and its gradients."""
    a = batch["a"]
    B = len(a)
    y = _td_target(batch, target_net, gamma)
    q, cache = qnet.forward_train(batch["s"])
    rows = np.arange(B)
    td = y - q[rows, a]
    loss = float((td ** 2).mean())
    g = np.zeros_like(q)
    g[rows, a] = -2.0 * td / B
    grads, _ = qnet.backward(cache, g)
    return loss, grads


def _setup(env: SchedulingEnv, cfg: SeDqnConfig, rng: np.random.Generator):
    N, M, levels = env.n_sensors, env.n_channels, env.channel.levels
    feat = Featurizer(N, M, levels, cfg.tau_norm)
    index = ActionIndex(N, M)
    qnet = Mlp([feat.width, *cfg.hidden, len(index)], rng=rng)
    scale = cfg.reward_scale or default_reward_scale(env)
    return feat, index, qnet, qnet.copy(), scale


def train_se_dqn(env: SchedulingEnv, config: SeDqnConfig | None = None, seed=None) -> TrainResult:
    """Three-stage training: loose SE selection, tight SE selection, then
    conventional epsilon-greedy DQN, all with the SE loss.

    Every random draw (network initialization, replay sampling, exploration,
    environment) comes from one generator seeded with ``seed``.  Every
    executed action is checked against the assignment constraint.
    """
    cfg = config or SeDqnConfig()
    rng = np.random.default_rng(seed)
    env.rng = rng
    feat, index, qnet, target, scale = _setup(env, cfg, rng)
    model = QNetModel(qnet, feat, index.actions)
    opt = Adam(qnet.params, lr=cfg.lr)
    F = feat.width
    mem = ReplayMemory(cfg.memory, {"s": ((F,), float), "a": ((), np.int64),
                                    "a_hat": ((), np.int64), "a_tilde": ((), np.int64),
                                    "r": ((), float), "s_next": ((F,), float)})
    eps = Decay(cfg.eps0, cfg.decay, cfg.floor)
    xi = Decay(cfg.xi0, cfg.decay, cfg.floor)
    N, M = env.n_sensors, env.n_channels
    result = TrainResult({"qnet": qnet, "target": target}, [], cfg, extra={"reward_scale": scale})
    shape = RewardShaper(scale, cfg.reward_clip)
    step = 0
    for ep in range(cfg.episodes):
        stage = cfg.stage_of(ep)
        lr = learning_rate(cfg.lr, cfg.lr_decay, ep)
        state = env.reset()
        log = EpisodeLog()
        for _ in range(cfg.horizon):
            if stage == 0:
                out = loose_se_action(model, state, eps.value, xi.value, rng)
            elif stage == 1:
                out = tight_se_action(model, state, eps.value, xi.value, rng,
                                      use_channel_threshold=cfg.use_channel_threshold)
            else:
                out = epsilon_greedy_action(model, state, eps.value, rng)
            result.actions_checked += 1
            if not is_valid_action(out.action, N, M):
                result.constraint_failures += 1
                raise AssertionError(f"executed action {out.action.tolist()} violates the constraint")
            log.record(env, state.tau)
            nxt, r, _ = env.step(out.action)
            a_idx = index.index(out.action)
            mem.push(s=feat(state.tau, state.H), a=a_idx,
                     a_hat=a_idx if out.se_executed else -1,
                     a_tilde=index.index(out.greedy), r=shape(r),
                     s_next=feat(nxt.tau, nxt.H))
            state = nxt
            if len(mem) >= cfg.batch:
                loss, grads = se_dqn_loss(mem.sample(cfg.batch, rng), qnet, target,
                                          cfg.gamma, cfg.alpha1)
                opt.step(grads, lr)
                log.loss += loss
                log.updates += 1
            step += 1
            eps.step()
            xi.step()
            if step % cfg.target_period == 0:
                sync_target(target, qnet, "hard")
        result.metrics.append(log.row(ep, stage, eps.value, xi.value if stage < 2 else float("nan")))
    result.extra["model"] = model
    return result


def train_dqn(env: SchedulingEnv, config: SeDqnConfig | None = None, seed=None) -> TrainResult:
    """Conventional DQN: epsilon-greedy exploration, squared TD loss, hard target
    copies.  Runs ``sum(config.stages)`` episodes."""
    cfg = config or SeDqnConfig()
    rng = np.random.default_rng(seed)
    env.rng = rng
    feat, index, qnet, target, scale = _setup(env, cfg, rng)
    actions = index.actions
    opt = Adam(qnet.params, lr=cfg.lr)
    F = feat.width
    mem = ReplayMemory(cfg.memory, {"s": ((F,), float), "a": ((), np.int64),
                                    "r": ((), float), "s_next": ((F,), float)})
    eps = Decay(cfg.eps0, cfg.decay, cfg.floor)
    N, M = env.n_sensors, env.n_channels
    result = TrainResult({"qnet": qnet, "target": target}, [], cfg, extra={"reward_scale": scale})
    shape = RewardShaper(scale, cfg.reward_clip)
    step = 0
    for ep in range(cfg.episodes):
        lr = learning_rate(cfg.lr, cfg.lr_decay, ep)
        state = env.reset()
        log = EpisodeLog()
        for _ in range(cfg.horizon):
            explore = rng.random() < eps.value
            x = feat(state.tau, state.H)
            k = int(rng.integers(len(actions))) if explore else int(np.argmax(qnet.forward(x)[0]))
            a = actions[k]
            result.actions_checked += 1
            if not is_valid_action(a, N, M):
                result.constraint_failures += 1
                raise AssertionError(f"executed action {a.tolist()} violates the constraint")
            log.record(env, state.tau)
            nxt, r, _ = env.step(a)
            mem.push(s=x, a=k, r=shape(r), s_next=feat(nxt.tau, nxt.H))
            state = nxt
            if len(mem) >= cfg.batch:
                loss, grads = dqn_loss(mem.sample(cfg.batch, rng), qnet, target, cfg.gamma)
                opt.step(grads, lr)
                log.loss += loss
                log.updates += 1
            step += 1
            eps.step()
            if step % cfg.target_period == 0:
                sync_target(target, qnet, "hard")
        result.metrics.append(log.row(ep, 2, eps.value, float("nan")))
    result.extra["model"] = QNetModel(qnet, feat, actions)
    return result
