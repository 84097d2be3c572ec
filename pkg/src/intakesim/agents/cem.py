"""Cross-entropy search over a single static action."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..env import ACTION_HIGH, ACTION_LOW, BOUNDS
from ..kernel import make_rng

SPAN = ACTION_HIGH - ACTION_LOW


@dataclass
class CEMConfig:
    population: int = 64
    elite_frac: float = 0.25
    var_floor: float = 1e-4  # times (h - l)^2
    init_std: float = 0.25  # fraction of (h - l)

    def __post_init__(self):
        if self.population < 1 or not 0.0 < self.elite_frac <= 1.0:
            raise ValueError("population must be >= 1 and elite fraction in (0, 1]")
        if self.n_elite < 1:
            raise ValueError("elite count must be at least 1")

    @property
    def n_elite(self) -> int:
        return int(np.floor(self.elite_frac * self.population + 0.5))

    @property
    def floor(self) -> np.ndarray:
        return self.var_floor * SPAN ** 2


def select_elites(returns, n_elite: int) -> np.ndarray:
    """Indices of the ``n_elite`` best returns; earlier samples win ties."""
    r = np.asarray(returns, dtype=float)
    order = np.lexsort((np.arange(len(r)), -r))
    return order[:n_elite]


def cem_iterate(mean, var, evaluate, cfg: CEMConfig, rng):
    """Sample, evaluate, refit.

    ``evaluate(candidates) -> returns`` scores each static action over one
    episode.  Returns ``(new_mean, new_var, best_return, info)``.
    """
    mean = np.asarray(mean, dtype=float)
    var = np.maximum(np.asarray(var, dtype=float), cfg.floor)
    cand = mean + np.sqrt(var) * rng.normal(size=(cfg.population, len(mean)))
    cand = BOUNDS.clip(cand)
    returns = np.asarray(evaluate(cand), dtype=float)
    elite = select_elites(returns, cfg.n_elite)
    e = cand[elite]
    new_mean = e.mean(axis=0)
    new_var = np.maximum(e.var(axis=0), cfg.floor)
    return new_mean, new_var, float(returns.max()), {"candidates": cand, "returns": returns, "elite": elite}


class CEMAgent:
    def __init__(self, cfg: CEMConfig | None = None, seed: int = 0):
        self.cfg = cfg or CEMConfig()
        self.mean = BOUNDS.mid.copy()
        self.var = (self.cfg.init_std * SPAN) ** 2
        self.rng = make_rng(seed, "cem")
        self.iterations = 0

    def uncertainty(self) -> float:
        frac = float((np.sqrt(self.var) / SPAN).mean())
        return min(1.0, frac / self.cfg.init_std)

    def act(self, s=None, explore: bool = False, rng=None):
        if not explore:
            return self.mean.copy()
        return BOUNDS.clip(self.mean + np.sqrt(self.var) * rng.normal(size=len(self.mean)))

    def step(self, evaluate):
        self.mean, self.var, best, info = cem_iterate(self.mean, self.var, evaluate, self.cfg, self.rng)
        self.iterations += 1
        return best, info

    def state_dict(self) -> dict:
        return {"mean": self.mean, "var": self.var, "counters": np.array([self.iterations])}

    def load_state_dict(self, d: dict) -> None:
        self.mean = np.array(d["mean"], dtype=float)
        self.var = np.array(d["var"], dtype=float)
        self.iterations = int(d["counters"][0])

    def config_dict(self) -> dict:
        return asdict(self.cfg)
