"""Structure-enhanced DDPG and the conventional DDPG baseline.

The actor emits one score per sensor.  Scores are ranked (descending, ties
broken by sensor index); the top ``M`` sensors take channels ``1..M`` in
rank order.  The *virtual action* re-expresses that ranking in ``[-1, 1]``:
the sensor on channel ``m`` gets ``(M - m + 1) / M`` and the ``k``-th idle
sensor (0-based, in rank order) gets ``-(k + 1) / (N - M)``.

The critic scores continuous actions.  Schedules chosen by the structure
or by random exploration enter as their virtual actions; schedules chosen
by the actor enter as its direct (possibly noisy) tanh output, so the
critic is trained where the actor's gradient is evaluated
(``raw_actor_actions=True``, the default).  With ``raw_actor_actions=False``
every stored action, and the TD target action, is the ranked virtual action.
"""
from __future__ import annotations

import numpy as np

from ..channel import SchedulingEnv, is_valid_action
from ..errors import ValidationError
from ..mdp import enumerate_actions
from ..nn import Adam, Mlp, ReplayMemory, learning_rate, sync_target
from .common import (Decay, EpisodeLog, Featurizer, SeDdpgConfig, TrainResult,
                     RewardShaper, default_reward_scale)
from .selection import loose_se_action, tight_se_action


def _rank(raw: np.ndarray) -> np.ndarray:
    """Descending order along the last axis, ties broken by lower index."""
    return np.argsort(-raw, axis=-1, kind="stable")


def _rank_values(N: int, M: int) -> np.ndarray:
    top = (M - np.arange(M)) / M
    rest = -(np.arange(N - M) + 1.0) / (N - M) if N > M else np.empty(0)
    return np.concatenate([top, rest])


def _virtual_from_order(order: np.ndarray, N: int, M: int) -> np.ndarray:
    v = np.empty(order.shape)
    np.put_along_axis(v, order, np.broadcast_to(_rank_values(N, M), order.shape), axis=-1)
    return v


def _schedule_from_order(order: np.ndarray, M: int) -> np.ndarray:
    a = np.zeros(order.shape, dtype=np.int64)
    np.put_along_axis(a, order[..., :M], np.broadcast_to(np.arange(1, M + 1), order[..., :M].shape),
                      axis=-1)
    return a


def map_virtual_action(raw, N: int, M: int):
    """Rank raw actor scores into ``(virtual action, schedule)``."""
    raw = np.asarray(raw, dtype=float)
    if raw.shape != (N,):
        raise ValidationError(f"expected {N} actor outputs, got shape {raw.shape}")
    order = _rank(raw)
    return _virtual_from_order(order, N, M), _schedule_from_order(order, M)


def encode_action(action, M: int, raw=None) -> np.ndarray:
    """Virtual action of a schedule.  Idle sensors are ranked by ``raw`` (if
    given, descending) and otherwise by index."""
    a = np.asarray(action, dtype=np.int64)
    N = len(a)
    sched = np.nonzero(a)[0]
    idle = np.nonzero(a == 0)[0]
    if len(sched) != M:
        raise ValidationError(f"schedule {a.tolist()} does not use all {M} channels")
    sched = sched[np.argsort(a[sched])]
    if raw is not None:
        idle = idle[_rank(np.asarray(raw, dtype=float)[idle])]
    return _virtual_from_order(np.concatenate([sched, idle]), N, M)


class ActorModel:
    """Greedy model backed by an actor network.

    ``random_action`` draws a uniformly random schedule (the SE stages'
    exploration); :meth:`noisy_action` perturbs the actor output with
    Gaussian noise of scale ``sigma`` (conventional DDPG exploration).
    """

    def __init__(self, actor: Mlp, featurizer: Featurizer, sigma: float = 0.3):
        self.actor, self.featurizer, self.sigma = actor, featurizer, sigma
        self.N, self.M = featurizer.N, featurizer.M
        self._actions = None

    def raw(self, taus, Hs) -> np.ndarray:
        return self.actor.forward(self.featurizer(taus, Hs))

    def greedy_actions(self, taus, Hs) -> np.ndarray:
        return _schedule_from_order(_rank(self.raw(taus, Hs)), self.M)

    def random_action(self, state, rng: np.random.Generator) -> np.ndarray:
        if self._actions is None:
            self._actions = enumerate_actions(self.N, self.M)
        return self._actions[rng.integers(len(self._actions))]

    def noisy_action(self, state, rng: np.random.Generator):
        """``(noisy output, virtual action, schedule)``: the actor output plus
        Gaussian noise, and its ranking."""
        noisy = self.raw(state.tau[None, :], state.H[None, :, :])[0] + self.sigma * rng.standard_normal(self.N)
        return (noisy, *map_virtual_action(noisy, self.N, self.M))

    def policy(self):
        return lambda state: self.greedy_actions(state.tau[None, :], state.H[None, :, :])[0]


def _critic_target(batch, actor_t: Mlp, critic_t: Mlp, gamma: float, N: int, M: int | None):
    """``r + gamma * Q'(s', mu'(s'))``; the target action is ranked unless ``M`` is None."""
    v_next = actor_t.forward(batch["s_next"])
    if M is not None:
        v_next = _virtual_from_order(_rank(v_next), N, M)
    q_next = critic_t.forward(np.concatenate([batch["s_next"], v_next], axis=1))[:, 0]
    return batch["r"] + gamma * q_next


def actor_gradients(batch: dict, actor: Mlp, critic: Mlp, alpha2: float | None = None,
                    center: bool = False):
    """Descent gradients for the actor.

    On SE transitions (``batch["se"]``) the actor ascends
    ``alpha2 * Q(s, mu(s)) - (1 - alpha2) * |v - mu(s)|^2``; elsewhere, or
    when ``alpha2`` is None, it ascends ``Q(s, mu(s))``.

    ``center=True`` removes the component of the critic's action slope along
    the all-ones direction.  Every virtual action has the same coordinate
    sum and the ranking ignores common shifts, so that component carries no
    scheduling information; left in, it drives all outputs into tanh
    saturation together.
    """
    s = batch["s"]
    B = len(s)
    mu, a_cache = actor.forward_train(s)
    _, c_cache = critic.forward_train(np.concatenate([s, mu], axis=1))
    _, x_grad = critic.backward(c_cache, np.ones((B, 1)), param_grads=False)
    dq = x_grad[:, s.shape[1]:]
    if center:
        dq = dq - dq.mean(axis=1, keepdims=True)
    if alpha2 is None:
        g = -dq / B
    else:
        se = batch["se"][:, None]
        g = -np.where(se, alpha2 * dq + 2.0 * (1.0 - alpha2) * (batch["v"] - mu), dq) / B
    grads, _ = actor.backward(a_cache, g)
    return grads


def _target_channels(batch: dict, raw_target: bool):
    # stored virtual actions have exactly M positive entries
    return None if raw_target else int(np.sum(batch["v"][0] > 0))


def se_critic_loss(batch: dict, critic: Mlp, actor_target: Mlp, critic_target: Mlp,
                   gamma: float, alpha1: float, raw_target: bool = False):
    """SE critic loss ``alpha1 * TD^2 + (1 - alpha1) * AD^2`` on SE transitions and
    ``TD^2`` elsewhere, with ``y = r + gamma * Q'(s', mu'(s'))`` held constant.
    The target action is the target actor's output itself if ``raw_target``,
    otherwise its ranked virtual action.

    Returns ``(loss, grads)``.
    """
    s, v, se = batch["s"], batch["v"], batch["se"]
    B, N = v.shape
    if s.shape[0] != B or se.shape != (B,) or batch["r"].shape != (B,):
        raise ValidationError("batch fields disagree in length")
    y = _critic_target(batch, actor_target, critic_target, gamma, N,
                       _target_channels(batch, raw_target))
    q, cache = critic.forward_train(np.concatenate([s, v], axis=1))
    td = y - q[:, 0]
    grads, _ = critic.backward(cache, (-2.0 * np.where(se, alpha1 * td, td) / B)[:, None])
    loss_rows = td ** 2
    if np.any(se):
        ss = s[se]
        q_hat, c_hat = critic.forward_train(np.concatenate([ss, batch["v_hat"][se]], axis=1))
        q_til, c_til = critic.forward_train(np.concatenate([ss, batch["v_tilde"][se]], axis=1))
        ad = q_hat[:, 0] - q_til[:, 0]
        gad = (2.0 * (1.0 - alpha1) * ad / B)[:, None]
        g_hat, _ = critic.backward(c_hat, gad)
        g_til, _ = critic.backward(c_til, -gad)
        grads = [gt + gh + gl for gt, gh, gl in zip(grads, g_hat, g_til)]
        loss_rows = loss_rows.copy()
        loss_rows[se] = alpha1 * td[se] ** 2 + (1.0 - alpha1) * ad ** 2
    return float(loss_rows.mean()), grads


def critic_loss(batch: dict, critic: Mlp, actor_target: Mlp, critic_target: Mlp, gamma: float,
                raw_target: bool = False):
    """Conventional squared TD critic loss.  Returns ``(loss, grads)``."""
    s, v = batch["s"], batch["v"]
    B, N = v.shape
    y = _critic_target(batch, actor_target, critic_target, gamma, N,
                       _target_channels(batch, raw_target))
    q, cache = critic.forward_train(np.concatenate([s, v], axis=1))
    td = y - q[:, 0]
    grads, _ = critic.backward(cache, (-2.0 * td / B)[:, None])
    return float((td ** 2).mean()), grads


def se_ddpg_losses(batch: dict, actor: Mlp, critic: Mlp, actor_target: Mlp, critic_target: Mlp,
                   gamma: float, alpha1: float, alpha2: float, center: bool = False,
                   raw_target: bool = False):
    """SE critic loss/gradients and SE actor gradients, both w.r.t. the given nets.

    ``batch`` holds features ``s``, ``s_next``; virtual actions ``v``
    (executed), ``v_hat`` (SE) and ``v_tilde`` (actor greedy); the flag
    ``se`` (executed action is the SE action) and the scaled reward ``r``.

    Returns ``(critic_loss, critic_grads, actor_grads)``.
    """
    loss, g_c = se_critic_loss(batch, critic, actor_target, critic_target, gamma, alpha1,
                               raw_target)
    return loss, g_c, actor_gradients(batch, actor, critic, alpha2, center)


def ddpg_losses(batch: dict, actor: Mlp, critic: Mlp, actor_target: Mlp, critic_target: Mlp,
                gamma: float, center: bool = False, raw_target: bool = False):
    """Conventional counterpart of :func:`se_ddpg_losses`."""
    loss, g_c = critic_loss(batch, critic, actor_target, critic_target, gamma, raw_target)
    return loss, g_c, actor_gradients(batch, actor, critic, None, center)


def _setup(env: SchedulingEnv, cfg: SeDdpgConfig, rng: np.random.Generator):
    N, M, levels = env.n_sensors, env.n_channels, env.channel.levels
    feat = Featurizer(N, M, levels, cfg.tau_norm)
    actor = Mlp([feat.width, *cfg.hidden, N], out_activation="tanh", rng=rng)
    critic = Mlp([feat.width + N, *cfg.hidden, 1], rng=rng)
    scale = cfg.reward_scale or default_reward_scale(env)
    return feat, actor, critic, actor.copy(), critic.copy(), scale


def _memory(cfg, F: int, N: int, with_se: bool) -> ReplayMemory:
    fields = {"s": ((F,), float), "v": ((N,), float), "r": ((), float), "s_next": ((F,), float)}
    if with_se:
        fields.update({"v_hat": ((N,), float), "v_tilde": ((N,), float), "se": ((), bool)})
    return ReplayMemory(cfg.memory, fields)


def train_se_ddpg(env: SchedulingEnv, config: SeDdpgConfig | None = None, seed=None) -> TrainResult:
    """Three-stage SE-DDPG.

    In the two SE stages the executed action is a uniformly random schedule
    with probability ``eps`` and otherwise the SE (or, failing the
    constraint, greedy) action; in the conventional stage it is the actor
    action perturbed by decaying Gaussian noise.  Targets are soft-updated every step.
    """
    cfg = config or SeDdpgConfig()
    rng = np.random.default_rng(seed)
    env.rng = rng
    feat, actor, critic, actor_t, critic_t, scale = _setup(env, cfg, rng)
    N, M = env.n_sensors, env.n_channels
    model = ActorModel(actor, feat, cfg.noise_sigma)
    opt_a = Adam(actor.params, lr=cfg.actor_lr)
    opt_c = Adam(critic.params, lr=cfg.critic_lr)
    mem = _memory(cfg, feat.width, N, with_se=True)
    eps = Decay(cfg.eps0, cfg.decay, cfg.floor)
    xi = Decay(cfg.xi0, cfg.decay, cfg.floor)
    sigma = Decay(cfg.noise_sigma, cfg.noise_decay, 0.0)
    result = TrainResult({"actor": actor, "critic": critic, "actor_target": actor_t,
                          "critic_target": critic_t}, [], cfg, extra={"reward_scale": scale})
    shape = RewardShaper(scale, cfg.reward_clip)
    for ep in range(cfg.episodes):
        stage = cfg.stage_of(ep)
        lr_a = learning_rate(cfg.actor_lr, cfg.lr_decay, ep)
        lr_c = learning_rate(cfg.critic_lr, cfg.lr_decay, ep)
        state = env.reset()
        log = EpisodeLog()
        for _ in range(cfg.horizon):
            model.sigma = sigma.value
            x = feat(state.tau, state.H)
            raw = actor.forward(x)[0]
            v_tilde = raw if cfg.raw_actor_actions else map_virtual_action(raw, N, M)[0]
            se_flag = False
            v_hat = np.zeros(N)
            if stage == 2:
                noisy, v, a = model.noisy_action(state, rng)
                if cfg.raw_actor_actions:
                    v = noisy
            else:
                if stage == 0:
                    out = loose_se_action(model, state, eps.value, xi.value, rng)
                else:
                    out = tight_se_action(model, state, eps.value, xi.value, rng,
                                          use_channel_threshold=cfg.use_channel_threshold)
                a = out.action
                if out.explored:
                    v = encode_action(a, M, raw)
                elif out.se_executed:
                    v_hat = encode_action(out.se_action, M, raw)
                    v, se_flag = v_hat, True
                else:
                    v = v_tilde
            result.actions_checked += 1
            if not is_valid_action(a, N, M):
                result.constraint_failures += 1
                raise AssertionError(f"executed action {a.tolist()} violates the constraint")
            log.record(env, state.tau)
            nxt, r, _ = env.step(a)
            mem.push(s=x, v=v, v_hat=v_hat, v_tilde=v_tilde, se=se_flag, r=shape(r),
                     s_next=feat(nxt.tau, nxt.H))
            state = nxt
            if len(mem) >= cfg.batch:
                batch = mem.sample(cfg.batch, rng)
                loss, g_c = se_critic_loss(batch, critic, actor_t, critic_t, cfg.gamma, cfg.alpha1,
                                           cfg.raw_actor_actions)
                opt_c.step(g_c, lr_c)
                opt_a.step(actor_gradients(batch, actor, critic, cfg.alpha2, cfg.center_action_gradient),
                           lr_a)
                sync_target(actor_t, actor, "soft", cfg.delta)
                sync_target(critic_t, critic, "soft", cfg.delta)
                log.loss += loss
                log.updates += 1
            eps.step()
            xi.step()
            sigma.step()
        result.metrics.append(log.row(ep, stage, eps.value, xi.value if stage < 2 else float("nan")))
    result.extra["model"] = model
    return result


def train_ddpg(env: SchedulingEnv, config: SeDdpgConfig | None = None, seed=None) -> TrainResult:
    """Conventional DDPG with Gaussian exploration noise and soft target updates."""
    cfg = config or SeDdpgConfig()
    rng = np.random.default_rng(seed)
    env.rng = rng
    feat, actor, critic, actor_t, critic_t, scale = _setup(env, cfg, rng)
    N, M = env.n_sensors, env.n_channels
    opt_a = Adam(actor.params, lr=cfg.actor_lr)
    opt_c = Adam(critic.params, lr=cfg.critic_lr)
    mem = _memory(cfg, feat.width, N, with_se=False)
    eps = Decay(cfg.eps0, cfg.decay, cfg.floor)
    sigma = Decay(cfg.noise_sigma, cfg.noise_decay, 0.0)
    result = TrainResult({"actor": actor, "critic": critic, "actor_target": actor_t,
                          "critic_target": critic_t}, [], cfg, extra={"reward_scale": scale})
    shape = RewardShaper(scale, cfg.reward_clip)
    for ep in range(cfg.episodes):
        lr_a = learning_rate(cfg.actor_lr, cfg.lr_decay, ep)
        lr_c = learning_rate(cfg.critic_lr, cfg.lr_decay, ep)
        state = env.reset()
        log = EpisodeLog()
        for _ in range(cfg.horizon):
            x = feat(state.tau, state.H)
            noisy = actor.forward(x)[0] + sigma.value * rng.standard_normal(N)
            v, a = map_virtual_action(noisy, N, M)
            if cfg.raw_actor_actions:
                v = noisy
            result.actions_checked += 1
            if not is_valid_action(a, N, M):
                result.constraint_failures += 1
                raise AssertionError(f"executed action {a.tolist()} violates the constraint")
            log.record(env, state.tau)
            nxt, r, _ = env.step(a)
            mem.push(s=x, v=v, r=shape(r), s_next=feat(nxt.tau, nxt.H))
            state = nxt
            if len(mem) >= cfg.batch:
                batch = mem.sample(cfg.batch, rng)
                loss, g_c = critic_loss(batch, critic, actor_t, critic_t, cfg.gamma,
                                        cfg.raw_actor_actions)
                opt_c.step(g_c, lr_c)
                opt_a.step(actor_gradients(batch, actor, critic, None, cfg.center_action_gradient), lr_a)
                sync_target(actor_t, actor, "soft", cfg.delta)
                sync_target(critic_t, critic, "soft", cfg.delta)
                log.loss += loss
                log.updates += 1
            eps.step()
            sigma.step()
        result.metrics.append(log.row(ep, 2, eps.value, float("nan")))
    result.extra["model"] = ActorModel(actor, feat, sigma.value)
    return result
