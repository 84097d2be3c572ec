"""Versioned ``.npz`` checkpoints: every tensor, optimizer state and a config hash."""

from __future__ import annotations

import hashlib
import json
import zipfile
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT = "intakesim-checkpoint"
CHECKPOINT_VERSION = 1


def config_hash(config: dict) -> str:
    text = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def save_checkpoint(path, agent_kind: str, state: dict, config: dict) -> str:
    meta = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "agent": agent_kind,
            "config": config, "config_hash": config_hash(config)}
    arrays = {k: np.asarray(v) for k, v in state.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True, default=str).encode("utf-8"), dtype=np.uint8)
    # np.savez stamps entries with the wall clock; a fixed stamp keeps files byte-identical
    with zipfile.ZipFile(Path(path), "w", zipfile.ZIP_STORED) as zf:
        for k in sorted(arrays):
            info = zipfile.ZipInfo(k + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, arrays[k], allow_pickle=False)
    return meta["config_hash"]


def load_checkpoint(path):
    """Returns ``(agent_kind, state, config)``; raises ``ValueError`` on a bad file."""
    with np.load(Path(path), allow_pickle=False) as data:
        if "__meta__" not in data:
            raise ValueError(f"{path} is not a checkpoint")
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint format in {path}")
        state = {k: data[k].copy() for k in data.files if k != "__meta__"}
    if config_hash(meta["config"]) != meta["config_hash"]:
        raise ValueError(f"config hash mismatch in {path}")
    return meta["agent"], state, meta["config"]
