"""PHQ-8 / PCL-C item schedule, scoring and a noisy answer interpreter."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import NamedTuple, Sequence

import numpy as np

PHQ8 = "PHQ8"
PCLC = "PCLC"
CLUSTERS = ("PHQ", "B", "C", "D")


class ValidationError(ValueError):
    pass


@lru_cache(maxsize=1)
def instruments() -> dict:
    """Item texts and scoring constants from the bundled data file."""
    text = resources.files("intakesim.data").joinpath("instruments.json").read_text("utf-8")
    return json.loads(text)


@dataclass(frozen=True)
class ItemId:
    instrument: str
    index: int  # 1-based, table order
    cluster: str = "none"

    @property
    def likert_range(self) -> tuple[int, int]:
        spec = instruments()[self.instrument]
        return spec["likert_min"], spec["likert_max"]

    @property
    def topic(self) -> str:
        """Topic bucket used for balance: PHQ, B, C or D."""
        return "PHQ" if self.instrument == PHQ8 else self.cluster

    @property
    def text(self) -> str:
        return instruments()[self.instrument]["items"][self.index - 1]

    def __str__(self) -> str:
        return f"{self.instrument}-Q{self.index}"


def pclc_cluster(index: int) -> str:
    for name, (lo, hi) in instruments()[PCLC]["clusters"].items():
        if lo <= index <= hi:
            return name
    raise ValidationError(f"PCL-C item index out of range: {index}")


@lru_cache(maxsize=1)
def item_schedule() -> tuple[ItemId, ...]:
    """The 25 mandatory items: PHQ-8 Q1-Q8 then PCL-C Q1-Q17."""
    phq = [ItemId(PHQ8, i) for i in range(1, 9)]
    pcl = [ItemId(PCLC, i, pclc_cluster(i)) for i in range(1, 18)]
    return tuple(phq + pcl)


N_ITEMS = 25


def normalized_severity(item: ItemId, score: int) -> float:
    lo, hi = item.likert_range
    return (score - lo) / (hi - lo)


# --------------------------------------------------------------------------
# interpreter surrogate
# --------------------------------------------------------------------------

def interpret_answer(latent_score: int, rng: np.random.Generator, fidelity: float,
                     lo: int = 0, hi: int = 3) -> tuple[int, float]:
    """Map a latent item score to an interpreted Likert value and confidence.

    With probability ``fidelity`` the latent value is returned with confidence
    in ``[fidelity, (1 + fidelity) / 2]``; otherwise an adjacent value is
    returned (stepping inward at the ends of the scale) with confidence in
    ``[0.3, 0.7] * fidelity``.  Every call consumes exactly three draws.
    """
    if not lo <= latent_score <= hi:
        raise ValidationError(f"latent score {latent_score} outside [{lo}, {hi}]")
    fidelity = float(np.clip(fidelity, 0.0, 1.0))
    u_keep, u_dir, u_conf = rng.random(3)
    if u_keep < fidelity:
        return int(latent_score), fidelity + (1.0 - fidelity) * 0.5 * u_conf
    step = 1 if u_dir < 0.5 else -1
    value = latent_score + step
    if value < lo or value > hi:
        value = latent_score - step
    value = int(min(max(value, lo), hi))
    return value, fidelity * (0.3 + 0.4 * u_conf)


# --------------------------------------------------------------------------
# scoring
# --------------------------------------------------------------------------

class PHQ8Score(NamedTuple):
    total: int
    band: str
    positive: bool


class PCLCScore(NamedTuple):
    total: int
    cluster_positive: bool
    cutpoint_positive: bool


@dataclass(frozen=True)
class ScreenResult:
    phq8_total: int
    phq8_band: str
    phq8_positive: bool
    pclc_total: int
    pclc_cluster_positive: bool
    pclc_cutpoint_positive: bool
    cutpoint_used: int


def _validate(scores, n: int, lo: int, hi: int, name: str) -> np.ndarray:
    arr = np.asarray(scores)
    if arr.shape != (n,):
        raise ValidationError(f"{name} needs {n} item scores, got shape {arr.shape}")
    if not np.all(np.equal(np.mod(arr, 1), 0)):
        raise ValidationError(f"{name} scores must be integers")
    arr = arr.astype(int)
    if arr.min() < lo or arr.max() > hi:
        raise ValidationError(f"{name} scores must lie in [{lo}, {hi}]")
    return arr


def phq8_band(total: int) -> str:
    spec = instruments()[PHQ8]
    band = 0
    for cut in spec["band_cutpoints"]:
        if total >= cut:
            band += 1
    return spec["bands"][band]


def score_phq8(scores: Sequence[int], cutpoint: int = 10) -> PHQ8Score:
    """Sum, severity band (cutpoints 5/10/15/20) and screen (total >= cutpoint)."""
    arr = _validate(scores, 8, 0, 3, "PHQ-8")
    total = int(arr.sum())
    return PHQ8Score(total, phq8_band(total), total >= cutpoint)


def pclc_cluster_rule(scores: Sequence[int]) -> bool:
    spec = instruments()[PCLC]
    arr = np.asarray(scores)
    thr = spec["symptomatic_at"]
    for name, need in spec["cluster_rule"].items():
        lo, hi = spec["clusters"][name]
        if int((arr[lo - 1:hi] >= thr).sum()) < need:
            return False
    return True


def score_pclc(scores: Sequence[int], cutpoint: int = 44) -> PCLCScore:
    """Total, B(1)+C(3)+D(2) cluster rule, and total >= cutpoint."""
    lo_cut, hi_cut = instruments()[PCLC]["cutpoint_range"]
    if not lo_cut <= cutpoint <= hi_cut:
        raise ValidationError(f"PCL-C cutpoint must lie in [{lo_cut}, {hi_cut}], got {cutpoint}")
    arr = _validate(scores, 17, 1, 5, "PCL-C")
    total = int(arr.sum())
    return PCLCScore(total, pclc_cluster_rule(arr), total >= cutpoint)


def screen(phq_scores, pcl_scores, phq_cutpoint: int = 10, pcl_cutpoint: int = 44) -> ScreenResult:
    phq = score_phq8(phq_scores, phq_cutpoint)
    pcl = score_pclc(pcl_scores, pcl_cutpoint)
    return ScreenResult(phq.total, phq.band, phq.positive, pcl.total,
                        pcl.cluster_positive, pcl.cutpoint_positive, pcl_cutpoint)


def posterior_uncertainty(confidences, answered) -> np.ndarray:
    """1 - confidence for answered items, 1 for everything else."""
    conf = np.clip(np.asarray(confidences, dtype=float), 0.0, 1.0)
    answered = np.asarray(answered, dtype=bool)
    if conf.shape != answered.shape:
        raise ValidationError("confidences and answered must have equal length")
    return np.where(answered, 1.0 - conf, 1.0)
