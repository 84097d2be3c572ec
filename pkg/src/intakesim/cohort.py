"""Synthetic patient population and per-turn multimodal observations.

Time quantities are in deciseconds (ds) throughout the package.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .kernel import make_rng
from .questionnaire import PCLC, ItemId, instruments, normalized_severity, pclc_cluster_rule

COHORT_FORMAT = "intakesim-cohort"
COHORT_VERSION = 1

SPEECH_DIM, FACE_DIM, POSE_DIM = 8, 8, 4
MODALITIES = ("speech", "face", "pose")

# Speech-block noise std is SPEECH_NOISE_FLOOR + SPEECH_NOISE_JITTER * prosody_jitter.
SPEECH_NOISE_FLOOR = 0.02
SPEECH_NOISE_JITTER = 0.10
FACE_NOISE = 0.05
POSE_NOISE = 0.05
# Extra feature noise for an unreliable extractor: std = UNRELIABLE_NOISE * (1 - kappa).
UNRELIABLE_NOISE = 0.3
# kappa = 1 - dip, dip ~ Beta(1, b) with P(dip > 0.5) = 0.5**b = 0.05.
KAPPA_DIP_B = float(np.log(0.05) / np.log(0.5))

# Counterfactual cue channels: (block, index) inside the frame.
CUE_CHANNELS = {
    "au4": ("face", 0),
    "au12": ("face", 1),
    "gaze_aversion": ("face", 2),
    "prosody_jitter": ("speech", 0),
    "pause_rate": ("speech", 1),
}
PROSODY_SLICE = slice(0, 4)  # speech dims carrying prosodic information

PHQ_BANDS = ((0, 4), (5, 9), (10, 14), (15, 19), (20, 24))


class PerturbationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PatientProfile:
    id: int
    phq8_latent: tuple[int, ...]
    pclc_latent: tuple[int, ...]
    base_latency: float  # ds
    utterance_scale: float  # ds of speech for a severity-0 answer
    au4_intensity: float
    au12_intensity: float
    gaze_aversion: float
    prosody_jitter: float
    pause_rate: float

    def latent_score(self, item: ItemId) -> int:
        if item.instrument == PCLC:
            return self.pclc_latent[item.index - 1]
        return self.phq8_latent[item.index - 1]

    @property
    def phq8_total(self) -> int:
        return int(sum(self.phq8_latent))

    @property
    def pclc_total(self) -> int:
        return int(sum(self.pclc_latent))

    @property
    def severity(self) -> float:
        """Overall severity in [0, 1] that drives the behavioural parameters."""
        return 0.6 * self.phq8_total / 24 + 0.4 * (self.pclc_total - 17) / 68


@dataclass
class ModalityFrame:
    speech: np.ndarray
    face: np.ndarray
    pose: np.ndarray
    kappa: np.ndarray  # per-modality reliability in [0, 1]

    def block(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def copy(self) -> "ModalityFrame":
        return ModalityFrame(self.speech.copy(), self.face.copy(), self.pose.copy(), self.kappa.copy())

    def cue(self, name: str) -> float:
        block, idx = CUE_CHANNELS[name]
        return float(self.block(block)[idx])


@dataclass(frozen=True)
class CounterfactualBounds:
    au4: float = 0.15
    au12: float = 0.15
    gaze_aversion: float = 0.15
    prosody_jitter: float = 0.10
    pause_rate: float = 0.10

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


# --------------------------------------------------------------------------
# cohort generation
# --------------------------------------------------------------------------

def _compose(total: int, n: int, cap: int, rng) -> list[int]:
    scores = [0] * n
    for _ in range(total):
        open_items = [i for i in range(n) if scores[i] < cap]
        scores[open_items[int(rng.integers(len(open_items)))]] += 1
    return scores


def _pclc_items(positive: bool, z: float, rng) -> list[int]:
    spec = instruments()[PCLC]
    need = spec["cluster_rule"]
    counts = {}
    for name, (lo, hi) in spec["clusters"].items():
        size = hi - lo + 1
        counts[name] = int(rng.binomial(size, 0.15 + 0.6 * z))
    if positive:
        for name in counts:
            counts[name] = max(counts[name], need[name])
    else:
        fail = list(counts)[int(rng.integers(3))]
        counts[fail] = int(rng.integers(0, need[fail]))
    scores = []
    for name, (lo, hi) in spec["clusters"].items():
        size = hi - lo + 1
        symptomatic = set(rng.permutation(size)[:counts[name]].tolist())
        for j in range(size):
            if j in symptomatic:
                scores.append(int(rng.choice([3, 4, 5], p=_high_probs(z))))
            else:
                scores.append(int(rng.choice([1, 2], p=[0.7 - 0.4 * z, 0.3 + 0.4 * z])))
    assert pclc_cluster_rule(scores) == positive
    return scores


def _high_probs(z: float) -> list[float]:
    w = np.array([1.2 - z, 0.8, 0.3 + z])
    return (w / w.sum()).tolist()


def generate_cohort(n: int, seed: int) -> list[PatientProfile]:
    """Stratified synthetic cohort.

    Patients cycle through the ten strata (five PHQ-8 bands x PCL-C cluster
    rule met / not met) in a shuffled order, so every band and both PTSD
    outcomes are represented.  Behavioural parameters rise with severity
    (latency, AU4, gaze aversion, jitter, pauses) or fall with it (AU12).
    """
    if n < 1:
        raise ValueError("cohort size must be >= 1")
    rng = make_rng(seed, "cohort")
    strata = [(b, pos) for b in range(len(PHQ_BANDS)) for pos in (False, True)]
    assignment = [strata[i % len(strata)] for i in range(n)]
    order = rng.permutation(n)
    out = []
    for pid in range(n):
        band, pos = assignment[int(order[pid])]
        lo, hi = PHQ_BANDS[band]
        phq = _compose(int(rng.integers(lo, hi + 1)), 8, 3, rng)
        zp = sum(phq) / 24
        pcl = _pclc_items(pos, float(np.clip(0.5 * zp + 0.5 * rng.random(), 0, 1)), rng)
        z = 0.6 * sum(phq) / 24 + 0.4 * (sum(pcl) - 17) / 68
        c = lambda v: float(np.clip(v, 0.0, 1.0))
        out.append(PatientProfile(
            id=pid,
            phq8_latent=tuple(phq),
            pclc_latent=tuple(pcl),
            base_latency=float(np.clip(7.0 + 12.0 * z + rng.normal(0, 2.0), 4.0, 30.0)),
            utterance_scale=float(25.0 * (1.0 - 0.2 * z) * np.exp(rng.normal(0, 0.2))),
            au4_intensity=c(0.15 + 0.55 * z + rng.normal(0, 0.12)),
            au12_intensity=c(0.65 - 0.45 * z + rng.normal(0, 0.12)),
            gaze_aversion=c(0.15 + 0.55 * z + rng.normal(0, 0.15)),
            prosody_jitter=c(0.15 + 0.35 * z + rng.normal(0, 0.12)),
            pause_rate=c(0.15 + 0.55 * z + rng.normal(0, 0.15)),
        ))
    return out


def split_holdout(cohort, fraction: float, seed: int):
    """Speaker-disjoint split; returns ``(train, held_out)`` in id order."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("holdout fraction must lie strictly between 0 and 1")
    n = len(cohort)
    k = int(np.floor(fraction * n + 0.5))
    k = min(max(k, 1), n - 1) if n > 1 else 0
    held_idx = set(make_rng(seed, "holdout").permutation(n)[:k].tolist())
    train = [p for i, p in enumerate(cohort) if i not in held_idx]
    held = [p for i, p in enumerate(cohort) if i in held_idx]
    return train, held


def save_cohort(cohort, path, seed: int | None = None) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": COHORT_FORMAT, "version": COHORT_VERSION,
                             "n": len(cohort), "seed": seed}, sort_keys=True) + "\n")
        for p in cohort:
            fh.write(json.dumps(asdict(p), sort_keys=True) + "\n")


def load_cohort(path) -> list[PatientProfile]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = json.loads(lines[0])
    if header.get("format") != COHORT_FORMAT or header.get("version") != COHORT_VERSION:
        raise ValueError(f"not a version-{COHORT_VERSION} cohort file: {path}")
    out = []
    for line in lines[1:]:
        if not line.strip():
            continue
        d = json.loads(line)
        d["phq8_latent"] = tuple(d["phq8_latent"])
        d["pclc_latent"] = tuple(d["pclc_latent"])
        out.append(PatientProfile(**d))
    if len(out) != header["n"]:
        raise ValueError(f"cohort header says {header['n']} patients, found {len(out)}")
    return out


def label_summary(cohort, phq_cutpoint: int = 10, pcl_cutpoint: int = 44) -> dict:
    from .questionnaire import score_pclc, score_phq8

    bands: dict[str, int] = {}
    dep = ptsd_cluster = ptsd_cut = 0
    for p in cohort:
        s = score_phq8(p.phq8_latent, phq_cutpoint)
        c = score_pclc(p.pclc_latent, pcl_cutpoint)
        bands[s.band] = bands.get(s.band, 0) + 1
        dep += s.positive
        ptsd_cluster += c.cluster_positive
        ptsd_cut += c.cutpoint_positive
    return {"n": len(cohort), "phq8_bands": bands, "depression_positive": dep,
            "ptsd_cluster_positive": ptsd_cluster, "ptsd_cutpoint_positive": ptsd_cut}


# --------------------------------------------------------------------------
# per-turn observations
# --------------------------------------------------------------------------

def sample_kappa(rng) -> np.ndarray:
    return 1.0 - rng.beta(1.0, KAPPA_DIP_B, size=3)


def emit_turn_features(profile: PatientProfile, item: ItemId, rng):
    """Observation frame for one item plus the answer's speech duration (ds)."""
    s = normalized_severity(item, profile.latent_score(item))
    kappa = sample_kappa(rng)
    sd_speech = SPEECH_NOISE_FLOOR + SPEECH_NOISE_JITTER * profile.prosody_jitter
    voice = (profile.id * 0.6180339887) % 1.0
    speech_mean = np.array([
        profile.prosody_jitter + 0.15 * (s - 0.5),
        profile.pause_rate + 0.30 * (s - 0.5),
        profile.base_latency / 30.0,
        0.70 - 0.30 * s,
        0.60 - 0.25 * s - 0.2 * profile.severity,
        0.55 - 0.20 * s,
        voice,
        1.0 - voice,
    ])
    face_mean = np.array([
        profile.au4_intensity + 0.25 * (s - 0.5),
        profile.au12_intensity - 0.20 * (s - 0.5),
        profile.gaze_aversion + 0.25 * (s - 0.5),
        0.30 + 0.30 * s,
        0.20 + 0.40 * profile.severity,
        0.40 + 0.20 * s,
        0.30,
        0.50 - 0.20 * profile.severity,
    ])
    pose_mean = np.array([
        0.20 + 0.30 * s,
        0.25 + 0.50 * profile.severity,
        0.50 - 0.20 * s,
        0.40 - 0.20 * profile.severity,
    ])
    speech = speech_mean + rng.normal(0.0, 1.0, SPEECH_DIM) * np.hypot(sd_speech, UNRELIABLE_NOISE * (1 - kappa[0]))
    face = face_mean + rng.normal(0.0, 1.0, FACE_DIM) * np.hypot(FACE_NOISE, UNRELIABLE_NOISE * (1 - kappa[1]))
    pose = pose_mean + rng.normal(0.0, 1.0, POSE_DIM) * np.hypot(POSE_NOISE, UNRELIABLE_NOISE * (1 - kappa[2]))
    frame = ModalityFrame(speech, face, pose, kappa)
    for block, idx in CUE_CHANNELS.values():
        arr = frame.block(block)
        arr[idx] = min(max(arr[idx], 0.0), 1.0)
    duration = profile.utterance_scale * (1.0 + 0.6 * s) * float(np.exp(rng.normal(0.0, 0.25)))
    return frame, duration


def perturb_counterfactual(frame: ModalityFrame, profile: PatientProfile | None,
                           bounds: CounterfactualBounds, rng, direction: int | None = None,
                           max_attempts: int = 100) -> ModalityFrame:
    """Shift the nonverbal cue channels by uniform noise within ``bounds``.

    Symmetric shifts (``direction=None``) are rejection-sampled: a draw that
    moves any AU or gaze cue outside [0, 1] is discarded and redrawn, and
    :class:`PerturbationError` is raised after ``max_attempts``.  Prosody and
    pause cues are clamped.  One-sided shifts (``direction=+1/-1``) cannot be
    rejection-sampled at a boundary, so every channel is clamped instead.
    ``profile`` is accepted for interface symmetry; the shift only depends on
    the frame.
    """
    b = bounds.as_dict()
    names = list(CUE_CHANNELS)
    width = np.array([b[n] for n in names])
    if np.all(width == 0):
        return frame.copy()
    current = np.array([frame.cue(n) for n in names])
    face_like = np.array([CUE_CHANNELS[n][0] == "face" for n in names])
    for _ in range(max_attempts):
        if direction is None:
            shift = rng.uniform(-1.0, 1.0, len(names)) * width
        else:
            shift = np.sign(direction) * rng.uniform(0.0, 1.0, len(names)) * width
        new = current + shift
        if direction is None and np.any(((new < 0) | (new > 1)) & face_like):
            continue
        out = frame.copy()
        for n, v in zip(names, np.clip(new, 0.0, 1.0)):
            block, idx = CUE_CHANNELS[n]
            out.block(block)[idx] = v
        return out
    raise PerturbationError(f"no plausible counterfactual after {max_attempts} attempts; bounds too large")


def mask_modalities(frame: ModalityFrame, p: float, rng) -> ModalityFrame:
    """Independently zero each modality with probability ``p`` (kappa -> 0)."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("mask probability must lie in [0, 1]")
    out = frame.copy()
    drop = rng.random(3) < p
    for m, name in enumerate(MODALITIES):
        if drop[m]:
            out.block(name)[:] = 0.0
            out.kappa[m] = 0.0
    return out
