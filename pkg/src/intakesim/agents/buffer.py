"""Fixed-capacity ring buffer of transitions."""

from __future__ import annotations

import numpy as np

from ..env import ACTION_DIM, STATE_DIM, X_DIM


class ReplayBuffer:
    """Ring storage for ``(s, a, r, s', done, s_cf)``, the turn index and fusion provenance.

    Provenance (per-modality projected blocks and their reliabilities) is
    kept for ``s`` and ``s_cf`` so training passes can re-pool the fused
    features after dropping low-reliability modalities.  Storage grows in
    chunks up to ``capacity`` so short runs do not reserve the full ring.
    """

    _CHUNK = 16384

    def __init__(self, capacity: int = 200_000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.cursor = 0
        self.size = 0
        self.inserted = 0
        self._alloc(min(self.capacity, self._CHUNK))

    def _fields(self, n):
        return {
            "s": np.zeros((n, STATE_DIM)), "a": np.zeros((n, ACTION_DIM)), "r": np.zeros(n),
            "s2": np.zeros((n, STATE_DIM)), "done": np.zeros(n), "t": np.zeros(n), "s_cf": np.zeros((n, STATE_DIM)),
            "has_cf": np.zeros(n, dtype=bool),
            "blocks": np.zeros((n, 3, X_DIM)), "kappa": np.zeros((n, 3)),
            "blocks_cf": np.zeros((n, 3, X_DIM)), "kappa_cf": np.zeros((n, 3)),
        }

    def _alloc(self, n):
        self.data = self._fields(n)

    def _grow(self):
        n_old = len(self.data["r"])
        n_new = min(self.capacity, n_old * 2)
        new = self._fields(n_new)
        for k, v in self.data.items():
            new[k][:n_old] = v
        self.data = new

    def __len__(self) -> int:
        return self.size

    def add(self, s, a, r, s2, done, s_cf=None, blocks=None, kappa=None, blocks_cf=None, kappa_cf=None,
            turn: int = 0):
        if self.cursor >= len(self.data["r"]):
            self._grow()
        i = self.cursor
        d = self.data
        d["s"][i] = s
        d["a"][i] = a
        d["r"][i] = r
        d["s2"][i] = s2
        d["done"][i] = float(done)
        d["t"][i] = turn
        d["has_cf"][i] = s_cf is not None
        d["s_cf"][i] = s if s_cf is None else s_cf
        d["blocks"][i] = 0.0 if blocks is None else blocks
        d["kappa"][i] = 0.0 if kappa is None else kappa
        d["blocks_cf"][i] = d["blocks"][i] if blocks_cf is None else blocks_cf
        d["kappa_cf"][i] = d["kappa"][i] if kappa_cf is None else kappa_cf
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.inserted += 1

    def ordered(self, key: str) -> np.ndarray:
        """Stored values of one field, oldest first."""
        v = self.data[key]
        if self.size < self.capacity:
            return v[:self.size].copy()
        return np.concatenate([v[self.cursor:self.capacity], v[:self.cursor]])

    def sample(self, batch: int, rng) -> dict:
        idx = rng.integers(0, self.size, size=batch)
        return {k: v[idx] for k, v in self.data.items()}

    def state_dict(self) -> dict:
        out = {f"buf.{k}": v[:self.size].copy() for k, v in self.data.items()}
        out["buf.meta"] = np.array([self.capacity, self.cursor, self.size, self.inserted])
        return out
