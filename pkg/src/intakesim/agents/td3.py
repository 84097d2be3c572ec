"""Twin-critic deterministic actor-critic with two regularizers.

* counterfactual consistency: the actor is penalized for moving its action
  between a state and a perturbed-nonverbal variant of it;
* reliability dropout: during training passes, low-reliability modality
  blocks are randomly dropped and the fusion gates renormalized.

Critics see actions in normalized box units and, like the PPO value head,
the episode progress ``t / 25``; the actor sees only the 20-D state.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..env import ACTION_DIM, ACTION_HIGH, ACTION_LOW, STATE_DIM, Fusion, reliability_dropout
from ..kernel import MLP, AdamState, adam_step, make_rng, polyak_update, sigmoid
from ..questionnaire import N_ITEMS
from .buffer import ReplayBuffer

SPAN = ACTION_HIGH - ACTION_LOW


@dataclass
class TD3Config:
    gamma: float = 0.985
    tau: float = 0.005
    lr: float = 3e-4
    buffer_size: int = 200_000
    batch: int = 256
    hidden: int = 256
    explore_sigma: float = 0.06  # fraction of (h - l)
    target_sigma: float = 0.04
    target_clip: float = 0.08
    policy_delay: int = 2
    lambda_cf: float = 0.1
    p_cf: float = 0.25
    kappa_threshold: float = 0.5
    kappa_drop_rate: float = 0.5
    reliability_dropout: bool = True
    update_every: int = 25  # env steps between update bursts
    updates_per_burst: int = 5
    warmup: int = 256  # transitions before the first update
    time_aware_critic: bool = True

    def __post_init__(self):
        for name in ("gamma", "lr", "batch", "hidden", "policy_delay", "update_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if min(self.explore_sigma, self.target_sigma, self.target_clip, self.lambda_cf, self.p_cf) < 0:
            raise ValueError("noise scales and regularizer weights must be non-negative")


def actor_arch(hidden: int = 256):
    return [("dense", STATE_DIM, hidden), ("layernorm", hidden), ("silu",),
            ("dense", hidden, hidden), ("silu",), ("dense", hidden, ACTION_DIM)]


def critic_arch(hidden: int = 256, time_aware: bool = True):
    n_in = STATE_DIM + ACTION_DIM + (1 if time_aware else 0)
    return [("dense", n_in, hidden), ("silu",),
            ("dense", hidden, hidden), ("silu",), ("dense", hidden, 1)]


def squash(head):
    """Map an unbounded head output into the action box."""
    return ACTION_LOW + SPAN * sigmoid(head)


def normalize(a):
    """Action in box coordinates, each dimension mapped onto [0, 1]."""
    return (np.asarray(a, dtype=float) - ACTION_LOW) / SPAN


def actor_forward(actor: MLP, s, params=None):
    return squash(actor(s, params))


def critic_input(s, a_norm, turns, time_aware: bool):
    """``[s, a_norm]`` plus the progress column ``t / 25`` for time-aware critics."""
    s = np.atleast_2d(s)
    a_norm = np.atleast_2d(a_norm)
    if not time_aware:
        return np.concatenate([s, a_norm], axis=1)
    if turns is None:
        raise ValueError("time-aware critics need turn indices")
    t = np.asarray(turns, dtype=float).reshape(-1, 1) / N_ITEMS
    return np.concatenate([s, a_norm, t], axis=1)


class TD3Agent:
    def __init__(self, cfg: TD3Config | None = None, seed: int = 0, fusion: Fusion | None = None):
        self.cfg = cfg or TD3Config()
        rng = make_rng(seed, "td3-init")
        h = self.cfg.hidden
        self.actor = MLP(actor_arch(h), rng, zero_last=True)
        ta = self.cfg.time_aware_critic
        self.critic1 = MLP(critic_arch(h, ta), rng)
        self.critic2 = MLP(critic_arch(h, ta), rng)
        self.actor_t = self.actor.copy_params()
        self.critic1_t = self.critic1.copy_params()
        self.critic2_t = self.critic2.copy_params()
        self.opt_actor = AdamState(lr=self.cfg.lr)
        self.opt_c1 = AdamState(lr=self.cfg.lr)
        self.opt_c2 = AdamState(lr=self.cfg.lr)
        self.buffer = ReplayBuffer(self.cfg.buffer_size)
        self.fusion = fusion
        self.rng = make_rng(seed, "td3-train")
        self.update_calls = 0
        self.actor_updates = 0
        self.critic_updates = 0
        self._ema_gap = None

    # -- acting ---------------------------------------------------------------
    def act(self, s, explore: bool, rng=None):
        return select_action(self.actor, s, explore, rng, self.cfg.explore_sigma)

    def uncertainty(self, s, a, turn: int = 0) -> float:
        """Twin-critic disagreement relative to its running average, in [0, 1)."""
        sa = critic_input(s, normalize(a), [turn], self.cfg.time_aware_critic)
        gap = abs(float(self.critic1(sa)[0, 0] - self.critic2(sa)[0, 0]))
        ema = self._ema_gap
        self._ema_gap = gap if ema is None else 0.99 * ema + 0.01 * gap
        ref = self._ema_gap
        return gap / (gap + ref) if gap + ref > 0 else 0.0

    # -- learning -------------------------------------------------------------
    def _states(self, batch, key_s, key_blocks, key_kappa):
        s = batch[key_s]
        if not (self.cfg.reliability_dropout and self.fusion is not None):
            return s
        x = reliability_dropout(batch[key_blocks], batch[key_kappa], self.fusion, self.rng,
                                self.cfg.kappa_threshold, self.cfg.kappa_drop_rate)
        out = s.copy()
        out[:, :x.shape[1]] = x
        return out

    def update(self) -> dict | None:
        if len(self.buffer) < max(self.cfg.batch, self.cfg.warmup):
            return None
        batch = self.buffer.sample(self.cfg.batch, self.rng)
        batch["s"] = self._states(batch, "s", "blocks", "kappa")
        if self.cfg.lambda_cf > 0 and batch["has_cf"].any():
            batch["s_cf"] = self._states(batch, "s_cf", "blocks_cf", "kappa_cf")
        return td3_update(self, batch)

    def state_dict(self) -> dict:
        out = {}
        for name, net in (("actor", self.actor.params), ("critic1", self.critic1.params),
                          ("critic2", self.critic2.params), ("actor_t", self.actor_t),
                          ("critic1_t", self.critic1_t), ("critic2_t", self.critic2_t)):
            for k, v in net.items():
                out[f"{name}/{k}"] = v
        for name, opt in (("opt_actor", self.opt_actor), ("opt_c1", self.opt_c1), ("opt_c2", self.opt_c2)):
            out.update(adam_state_dict(name, opt))
        out["counters"] = np.array([self.update_calls, self.actor_updates, self.critic_updates])
        out["ema_gap"] = np.array([np.nan if self._ema_gap is None else self._ema_gap])
        return out

    def load_state_dict(self, d: dict) -> None:
        for name, net in (("actor", self.actor.params), ("critic1", self.critic1.params),
                          ("critic2", self.critic2.params), ("actor_t", self.actor_t),
                          ("critic1_t", self.critic1_t), ("critic2_t", self.critic2_t)):
            for k in net:
                net[k] = np.array(d[f"{name}/{k}"], dtype=float)
        for name, opt in (("opt_actor", self.opt_actor), ("opt_c1", self.opt_c1), ("opt_c2", self.opt_c2)):
            load_adam_state(name, opt, d)
        self.update_calls, self.actor_updates, self.critic_updates = (int(v) for v in d["counters"])
        g = float(d["ema_gap"][0])
        self._ema_gap = None if np.isnan(g) else g

    def config_dict(self) -> dict:
        return asdict(self.cfg)


def adam_state_dict(prefix: str, opt: AdamState) -> dict:
    out = {f"{prefix}.hyper": np.array([opt.lr, opt.beta1, opt.beta2, opt.eps, opt.step], dtype=float)}
    for k, v in opt.m.items():
        out[f"{prefix}.m/{k}"] = v
        out[f"{prefix}.v/{k}"] = opt.v[k]
    return out


def load_adam_state(prefix: str, opt: AdamState, d: dict) -> None:
    lr, b1, b2, eps, step = d[f"{prefix}.hyper"]
    opt.lr, opt.beta1, opt.beta2, opt.eps, opt.step = float(lr), float(b1), float(b2), float(eps), int(step)
    opt.m, opt.v = {}, {}
    for key in d:
        if key.startswith(f"{prefix}.m/"):
            k = key[len(prefix) + 3:]
            opt.m[k] = np.array(d[key], dtype=float)
            opt.v[k] = np.array(d[f"{prefix}.v/{k}"], dtype=float)


def select_action(actor: MLP, s, explore: bool, rng=None, sigma: float = 0.06, params=None):
    a = actor_forward(actor, s, params)
    if not explore or sigma == 0.0:
        return a
    noise = rng.normal(0.0, 1.0, size=np.shape(a)) * sigma * SPAN
    return np.clip(a + noise, ACTION_LOW, ACTION_HIGH)


def td3_target(batch: dict, actor: MLP, critic: MLP, actor_t: dict, critic1_t: dict, critic2_t: dict,
               cfg: TD3Config, rng) -> np.ndarray:
    """Clipped double-Q bootstrap target with target-policy smoothing."""
    s2 = batch["s2"]
    a2 = actor_forward(actor, s2, actor_t)
    if cfg.target_sigma > 0:
        eps = rng.normal(0.0, cfg.target_sigma, size=a2.shape)
        eps = np.clip(eps, -cfg.target_clip, cfg.target_clip) * SPAN
        a2 = np.clip(a2 + eps, ACTION_LOW, ACTION_HIGH)
    t2 = batch["t"] + 1 if cfg.time_aware_critic else None
    sa2 = critic_input(s2, normalize(a2), t2, cfg.time_aware_critic)
    q1 = critic(sa2, critic1_t)[:, 0]
    q2 = critic(sa2, critic2_t)[:, 0]
    return batch["r"] + cfg.gamma * (1.0 - batch["done"]) * np.minimum(q1, q2)


def _critic_step(critic: MLP, opt: AdamState, sa, y) -> float:
    q, cache = critic.forward(sa)
    err = q[:, 0] - y
    n = len(y)
    grads, _ = critic.backward(cache, (2.0 / n) * err[:, None])
    adam_step(critic.params, grads, opt)
    return float(np.mean(err * err))


def td3_update(agent: TD3Agent, batch: dict) -> dict:
    """One critic step for both critics, and an actor step every ``policy_delay`` calls."""
    cfg = agent.cfg
    agent.update_calls += 1
    y = td3_target(batch, agent.actor, agent.critic1, agent.actor_t, agent.critic1_t, agent.critic2_t,
                   cfg, agent.rng)
    turns = batch["t"] if cfg.time_aware_critic else None
    sa = critic_input(batch["s"], normalize(batch["a"]), turns, cfg.time_aware_critic)
    report = {"critic1_loss": _critic_step(agent.critic1, agent.opt_c1, sa, y),
              "critic2_loss": _critic_step(agent.critic2, agent.opt_c2, sa, y)}
    agent.critic_updates += 1
    if agent.update_calls % cfg.policy_delay != 0:
        return report

    # the critic and the drift penalty both work in normalized action units
    s = batch["s"]
    n = len(s)
    head, a_cache = agent.actor.forward(s)
    an = sigmoid(head)
    q, q_cache = agent.critic1.forward(critic_input(s, an, turns, cfg.time_aware_critic))
    _, dsa = agent.critic1.backward(q_cache, np.full((n, 1), -1.0 / n), need_params=False)
    d_an = dsa[:, STATE_DIM:STATE_DIM + ACTION_DIM]
    cf_loss = 0.0
    g_cf = None
    mask = batch.get("has_cf")
    if cfg.lambda_cf > 0 and mask is not None and mask.any():
        head_cf, cf_cache = agent.actor.forward(batch["s_cf"])
        an_cf = sigmoid(head_cf)
        diff = (an - an_cf) * mask[:, None]
        n_cf = int(mask.sum())
        cf_loss = cfg.lambda_cf * float((diff * diff).sum()) / n_cf
        d_diff = 2.0 * cfg.lambda_cf * diff / n_cf
        d_an = d_an + d_diff
        g_cf, _ = agent.actor.backward(cf_cache, -d_diff * an_cf * (1.0 - an_cf))
    grads, _ = agent.actor.backward(a_cache, d_an * an * (1.0 - an))
    if g_cf is not None:
        for k in grads:
            grads[k] = grads[k] + g_cf[k]
    adam_step(agent.actor.params, grads, agent.opt_actor)
    polyak_update(agent.actor_t, agent.actor.params, cfg.tau)
    polyak_update(agent.critic1_t, agent.critic1.params, cfg.tau)
    polyak_update(agent.critic2_t, agent.critic2.params, cfg.tau)
    agent.actor_updates += 1
    report.update(actor_loss=float(-q.mean()) + cf_loss, cf_loss=cf_loss)
    return report


def counterfactual_loss(actor: MLP, s, s_cf, lambda_cf: float) -> float:
    """lambda * mean squared (normalized) action drift between states and their variants."""
    d = normalize(actor_forward(actor, s)) - normalize(actor_forward(actor, s_cf))
    d = np.atleast_2d(d)
    return lambda_cf * float((d * d).sum(axis=1).mean())
