"""Clipped-ratio policy gradient with GAE.

The policy is a diagonal Gaussian in normalized action units: the mean is
the same squashed head as the TD3 actor and the log-std is a learned,
state-independent vector.  Samples are clipped into the box for execution
but log-probabilities use the unclipped sample.

The state carries no turn index, yet returns in a fixed 25-turn episode
depend heavily on how many turns remain.  The value head therefore also
receives the episode progress ``t / 25`` (the policy does not), which keeps
that trend out of the advantages.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..env import ACTION_DIM, ACTION_HIGH, ACTION_LOW, STATE_DIM
from ..kernel import MLP, AdamState, adam_step, make_rng, sigmoid
from ..questionnaire import N_ITEMS
from .td3 import actor_arch, adam_state_dict, load_adam_state

SPAN = ACTION_HIGH - ACTION_LOW
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class PPOConfig:
    gamma: float = 0.985
    gae_lambda: float = 0.92
    clip: float = 0.2
    entropy_coef: float = 0.004
    value_coef: float = 0.5
    lr: float = 3e-4
    rollout: int = 1024  # steps; rounded up to whole episodes
    epochs: int = 4
    minibatch: int = 256
    hidden: int = 256
    init_std: float = 0.25  # fraction of (h - l), same spread as the CEM start
    min_log_std: float = -5.0
    max_log_std: float = 0.0
    time_aware_value: bool = True

    def __post_init__(self):
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("GAE lambda must lie in [0, 1]")
        if self.clip <= 0:
            raise ValueError("clip range must be positive")
        if min(self.rollout, self.epochs, self.minibatch) < 1:
            raise ValueError("rollout, epochs and minibatch must be >= 1")


def value_arch(hidden: int = 256, time_aware: bool = True):
    n_in = STATE_DIM + (1 if time_aware else 0)
    return [("dense", n_in, hidden), ("silu",), ("dense", hidden, hidden), ("silu",), ("dense", hidden, 1)]


def gae(rewards, values, dones, gamma: float, lam: float):
    """Backward GAE recursion; ``values`` has one more entry than ``rewards``."""
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    d = np.asarray(dones, dtype=float)
    if len(v) != len(r) + 1:
        raise ValueError("values must have len(rewards) + 1 entries")
    adv = np.zeros_like(r)
    last = 0.0
    for t in range(len(r) - 1, -1, -1):
        live = 1.0 - d[t]
        delta = r[t] + gamma * live * v[t + 1] - v[t]
        last = delta + gamma * lam * live * last
        adv[t] = last
    return adv, adv + v[:-1]


def clipped_objective(ratio, adv, clip: float):
    """Per-sample min(rho * A, clip(rho) * A)."""
    ratio = np.asarray(ratio, dtype=float)
    adv = np.asarray(adv, dtype=float)
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv)


class PPOAgent:
    def __init__(self, cfg: PPOConfig | None = None, seed: int = 0):
        self.cfg = cfg or PPOConfig()
        rng = make_rng(seed, "ppo-init")
        self.policy = MLP(actor_arch(self.cfg.hidden), rng, zero_last=True)
        self.value = MLP(value_arch(self.cfg.hidden, self.cfg.time_aware_value), rng)
        self.log_std = np.full(ACTION_DIM, np.log(self.cfg.init_std))
        self.opt_pi = AdamState(lr=self.cfg.lr)
        self.opt_v = AdamState(lr=self.cfg.lr)
        self.rng = make_rng(seed, "ppo-train")
        self.updates = 0

    def mean_norm(self, s, params=None):
        return sigmoid(self.policy(s, params))

    def act(self, s, explore: bool, rng=None):
        """Returns ``(action, normalized sample, log-prob)``."""
        mu = self.mean_norm(s)
        if not explore:
            return ACTION_LOW + SPAN * mu, mu, 0.0
        std = np.exp(self.log_std)
        z = mu + std * rng.normal(size=ACTION_DIM)
        a = np.clip(ACTION_LOW + SPAN * z, ACTION_LOW, ACTION_HIGH)
        return a, z, self.log_prob(z, mu)

    def log_prob(self, z, mu):
        std = np.exp(self.log_std)
        q = ((z - mu) / std) ** 2
        return -0.5 * (q + 2.0 * self.log_std + LOG_2PI).sum(axis=-1)

    def entropy(self) -> float:
        return float((self.log_std + 0.5 * (LOG_2PI + 1.0)).sum())

    def uncertainty(self) -> float:
        """Mean policy std mapped linearly from [0.01, 0.3] onto [0, 1]."""
        std = float(np.exp(self.log_std).mean())
        return float(np.clip((std - 0.01) / 0.29, 0.0, 1.0))

    def value_inputs(self, s, turns=None):
        s = np.atleast_2d(np.asarray(s, dtype=float))
        if not self.cfg.time_aware_value:
            return s
        if turns is None:
            raise ValueError("a time-aware value head needs turn indices")
        t = np.asarray(turns, dtype=float).reshape(-1, 1) / N_ITEMS
        return np.hstack([s, t])

    def values(self, s, turns=None):
        return self.value(self.value_inputs(s, turns))[..., 0]

    def update(self, states, z, logp_old, advantages, returns, turns=None) -> dict:
        cfg = self.cfg
        n = len(states)
        vin = self.value_inputs(states, turns)
        stats = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "clip_frac": 0.0}
        count = 0
        for _ in range(cfg.epochs):
            order = self.rng.permutation(n)
            for lo in range(0, n, cfg.minibatch):
                idx = order[lo:lo + cfg.minibatch]
                if len(idx) < 2:
                    continue
                rep = self._minibatch(states[idx], vin[idx], z[idx], logp_old[idx], advantages[idx], returns[idx])
                for k in stats:
                    stats[k] += rep[k]
                count += 1
        self.updates += 1
        return {k: v / max(count, 1) for k, v in stats.items()}

    def _minibatch(self, s, vin, z, logp_old, adv, ret) -> dict:
        cfg = self.cfg
        m = len(s)
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        head, cache = self.policy.forward(s)
        mu = sigmoid(head)
        std = np.exp(self.log_std)
        logp = self.log_prob(z, mu)
        ratio = np.exp(logp - logp_old)
        unclipped = ratio * adv
        clipped = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * adv
        use_unclipped = unclipped <= clipped
        obj = np.where(use_unclipped, unclipped, clipped)
        entropy = self.entropy()
        # d(-mean obj)/d logp: only where the unclipped branch is active
        dlogp = np.where(use_unclipped, -ratio * adv, 0.0) / m
        diff = (z - mu) / std
        dmu = dlogp[:, None] * (diff / std)  # d logp / d mu = (z - mu) / std^2
        dlog_std = (dlogp[:, None] * (diff * diff - 1.0)).sum(axis=0) - cfg.entropy_coef
        grads, _ = self.policy.backward(cache, dmu * mu * (1.0 - mu))
        grads["log_std"] = dlog_std
        params = dict(self.policy.params)
        params["log_std"] = self.log_std
        adam_step(params, grads, self.opt_pi)
        np.clip(self.log_std, cfg.min_log_std, cfg.max_log_std, out=self.log_std)

        v, vcache = self.value.forward(vin)
        err = v[:, 0] - ret
        vgrads, _ = self.value.backward(vcache, (cfg.value_coef * 2.0 / m) * err[:, None])
        adam_step(self.value.params, vgrads, self.opt_v)
        return {"policy_loss": float(-obj.mean() - cfg.entropy_coef * entropy),
                "value_loss": float(cfg.value_coef * np.mean(err * err)),
                "entropy": entropy, "clip_frac": float(np.mean(np.abs(ratio - 1.0) > cfg.clip))}

    def state_dict(self) -> dict:
        out = {f"policy/{k}": v for k, v in self.policy.params.items()}
        out.update({f"value/{k}": v for k, v in self.value.params.items()})
        out["log_std"] = self.log_std
        out.update(adam_state_dict("opt_pi", self.opt_pi))
        out.update(adam_state_dict("opt_v", self.opt_v))
        out["counters"] = np.array([self.updates])
        return out

    def load_state_dict(self, d: dict) -> None:
        for k in self.policy.params:
            self.policy.params[k] = np.array(d[f"policy/{k}"], dtype=float)
        for k in self.value.params:
            self.value.params[k] = np.array(d[f"value/{k}"], dtype=float)
        self.log_std = np.array(d["log_std"], dtype=float)
        load_adam_state("opt_pi", self.opt_pi, d)
        load_adam_state("opt_v", self.opt_v, d)
        self.updates = int(d["counters"][0])

    def config_dict(self) -> dict:
        return asdict(self.cfg)
