"""The 25-turn interview MDP.

Each step delivers one mandatory item.  The patient's answer is a timeline of
speech segments separated by pauses; the agent's five-dimensional action sets
how long it holds a silence before taking the floor (``a1``), how soon it
reacts to a silence (``a2``), backchannel rate (``a3``), how much trailing
speech the safety layer lets it talk over (``a4``) and an immediacy gain
(``a5``).  All times are deciseconds.

Turn dynamics
-------------
* The turn manager holds every silence for ``a1`` (clamped to the dwell
  limits).  A mid-answer pause that lasts that long makes the agent start
  early: the patient either yields (the rest of the answer is lost) or
  resumes speaking.  With the uncertainty-aware manager the agent yields to a
  resuming patient immediately; with fixed pacing it keeps talking.
* Fixed pacing also commits to a start as soon as a silence reaches ``a2``, so
  the start can land in the middle of resumed speech.  The safety layer
  defers such cuts to the next pause boundary unless fewer than
  ``a4 * tolerance_window`` ds of speech remain.
* When uncertainty exceeds ``u_bc`` the manager injects a backchannel ``a2``
  ds into each silence with probability ``min(1, a3 * a5)``; a backchannel
  inside a pause shortens the rest of that pause.  Independent of
  uncertainty, ambient backchannels occur at rate ``a3 * a5`` per
  ``bc_period`` ds of answer and land wherever they land.
* A patient who has not started answering after ``stall_timeout`` gets a
  fallback prompt; they recover with a probability that rises with ``a5``,
  otherwise the item is skipped.  An answer cut off before ``min_delivered``
  of its speech is also skipped.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .cohort import (MODALITIES, PROSODY_SLICE, CounterfactualBounds, ModalityFrame, PatientProfile,
                     emit_turn_features, mask_modalities, perturb_counterfactual)
from .kernel import make_rng
from .questionnaire import (CLUSTERS, N_ITEMS, ValidationError, interpret_answer,
                            item_schedule, normalized_severity, score_pclc, score_phq8)

ACTION_LOW = np.array([10.0, 3.0, 0.40, 0.00, 0.85])
ACTION_HIGH = np.array([24.0, 9.0, 0.85, 0.70, 1.15])
ACTION_NAMES = ("target_latency", "max_wait", "backchannel_rate", "interruption_tolerance", "immediacy_gain")

METRIC_NAMES = ("coverage", "rapport", "balance", "pace", "wasted_wait_score", "latency_score",
                "overlap_score", "clarify_score", "cut_consistency", "bc_precision")
METRIC_INDEX = {n: i for i, n in enumerate(METRIC_NAMES)}
# The rapport composite and its latency/overlap parts; dropped from the preference
# vector when the trust/rapport term is ablated.  Pace is a separate objective.
RAPPORT_TERMS = ("rapport", "latency_score", "overlap_score")

X_DIM = 10
STATE_DIM = 20
ACTION_DIM = 5
FUSION_GAIN = 4.0


class StateError(RuntimeError):
    pass


@dataclass(frozen=True)
class ActionBounds:
    low: np.ndarray = field(default_factory=lambda: ACTION_LOW.copy())
    high: np.ndarray = field(default_factory=lambda: ACTION_HIGH.copy())

    def __post_init__(self):
        if not np.all(np.asarray(self.low) < np.asarray(self.high)):
            raise ValidationError("action bounds need low < high elementwise")

    @property
    def span(self) -> np.ndarray:
        return self.high - self.low

    @property
    def mid(self) -> np.ndarray:
        return 0.5 * (self.low + self.high)

    def clip(self, a) -> np.ndarray:
        return np.clip(np.asarray(a, dtype=float), self.low, self.high)


BOUNDS = ActionBounds()


@dataclass
class EnvConfig:
    ua: bool = True  # uncertainty-aware turn manager
    xf: bool = True  # reliability-gated fusion (False: uniform pooling)
    pr: bool = True  # prosody features available
    guardrails: bool = True
    dropout_p: float = 0.0  # inference-time modality masking
    phq_cutpoint: int = 10
    pcl_cutpoint: int = 44
    # timing model (ds)
    lambda_lat: float = 5.0
    lambda_ov: float = 2.0
    lambda_wait: float = 8.0
    min_dwell: float = 10.0
    max_dwell: float = 22.0
    tolerance_window: float = 10.0
    topic_cap: float = 250.0
    stall_timeout: float = 45.0
    prompt_len: float = 15.0
    bc_period: float = 30.0
    bc_pause_shrink: float = 0.6
    u_bc: float = 0.5
    min_delivered: float = 0.4
    # interpretation / clarification
    base_fidelity: float = 0.97
    clarify_threshold: float = 0.25
    clarify_noise: float = 0.15
    unnecessary_conf: float = 0.9
    # end-of-episode screen reward
    alpha: float = 1.0
    gamma_sens: float = 1.0
    rho: float = 1.0
    fusion_seed: int = 7
    cf_bounds: CounterfactualBounds = field(default_factory=CounterfactualBounds)


# --------------------------------------------------------------------------
# reward helpers
# --------------------------------------------------------------------------

@dataclass
class RewardWeights:
    w: np.ndarray
    alpha: float = 1.0
    gamma_sens: float = 1.0
    rho: float = 1.0

    def __post_init__(self):
        self.w = validate_weights(self.w)
        if min(self.alpha, self.gamma_sens, self.rho) < 0:
            raise ValidationError("legacy reward weights must be non-negative")


def validate_weights(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.shape != (len(METRIC_NAMES),):
        raise ValidationError(f"preference vector must have {len(METRIC_NAMES)} entries")
    if np.any(w < 0) or not np.isfinite(w).all():
        raise ValidationError("preference weights must be finite and non-negative")
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValidationError(f"preference weights must sum to 1, got {w.sum():.6g}")
    return w


def uniform_weights() -> np.ndarray:
    return np.full(len(METRIC_NAMES), 1.0 / len(METRIC_NAMES))


def weights_without(names) -> np.ndarray:
    w = uniform_weights()
    for n in names:
        w[METRIC_INDEX[n]] = 0.0
    return w / w.sum()


def scalarize(weights, m) -> float:
    w = weights.w if isinstance(weights, RewardWeights) else np.asarray(weights, dtype=float)
    return float(np.dot(w, np.asarray(m, dtype=float)))


def legacy_reward(delta_acc: float, sens: float, rapport: float, weights=None) -> float:
    """alpha * dAcc + gamma * Sens + rho * Rapport."""
    if weights is None:
        alpha = gamma = rho = 1.0
    elif isinstance(weights, (RewardWeights, EnvConfig)):
        alpha, gamma, rho = weights.alpha, weights.gamma_sens, weights.rho
    else:
        alpha, gamma, rho = weights
    return alpha * delta_acc + gamma * sens + rho * rapport


def screen_bonus_terms(pred_phq, pred_pcl, true_phq, true_pcl, phq_cutpoint=10, pcl_cutpoint=44):
    """(dAcc, Sens) for one patient: screen accuracy over chance and mean hit rate on true positives."""
    pred = (score_phq8(pred_phq, phq_cutpoint).positive, score_pclc(pred_pcl, pcl_cutpoint).cutpoint_positive)
    true = (score_phq8(true_phq, phq_cutpoint).positive, score_pclc(true_pcl, pcl_cutpoint).cutpoint_positive)
    acc = np.mean([p == t for p, t in zip(pred, true)])
    hits = [p for p, t in zip(pred, true) if t]
    sens = float(np.mean(hits)) if hits else 1.0
    return float(acc - 0.5), sens


def impute_scores(likert, answered, lo: int) -> list[int]:
    """Fill unanswered items with the rounded mean of the answered ones."""
    likert = np.asarray(likert, dtype=float)
    answered = np.asarray(answered, dtype=bool)
    fill = int(np.floor(likert[answered].mean() + 0.5)) if answered.any() else lo
    return [int(v) if a else fill for v, a in zip(likert, answered)]


# --------------------------------------------------------------------------
# metric formulas
# --------------------------------------------------------------------------

def normalized_entropy(counts) -> float:
    c = np.asarray(counts, dtype=float)
    total = c.sum()
    if total <= 0:
        return 0.0
    p = c[c > 0] / total
    return float(-(p * np.log(p)).sum() / np.log(len(c)))


@dataclass
class TurnTrace:
    """Everything the metric formulas need about one completed turn."""

    turn: int
    delivered: int  # items delivered so far, this one included
    target_latency: float  # a1 as requested
    actual_latency: float  # agent start - patient end (negative = early)
    overlap: float
    wasted_wait: float  # ds the patient waited beyond their natural gap
    unnecessary_clarify: int
    cut_consistent: bool
    bc_total: int
    bc_in_pause: int
    topic_counts: tuple


def compute_metrics(tr: TurnTrace, cfg: EnvConfig | None = None) -> np.ndarray:
    cfg = cfg or EnvConfig()
    span1 = ACTION_HIGH[0] - ACTION_LOW[0]
    dev = abs(tr.actual_latency - tr.target_latency)
    latency_score = float(np.exp(-dev / cfg.lambda_lat))
    overlap_score = 1.0 if tr.overlap <= 0 else float(np.exp(-tr.overlap / cfg.lambda_ov))
    m = np.empty(len(METRIC_NAMES))
    m[0] = tr.delivered / N_ITEMS
    m[1] = 0.5 * (latency_score + overlap_score)
    m[2] = normalized_entropy(tr.topic_counts)
    m[3] = float(np.clip(1.0 - dev / span1, 0.0, 1.0))
    m[4] = 1.0 - min(1.0, tr.wasted_wait / cfg.lambda_wait)
    m[5] = latency_score
    m[6] = overlap_score
    m[7] = float(np.clip(1.0 - tr.unnecessary_clarify, 0.0, 1.0))
    m[8] = 1.0 if tr.cut_consistent else 0.0
    m[9] = 1.0 if tr.bc_total == 0 else tr.bc_in_pause / tr.bc_total
    return m


# --------------------------------------------------------------------------
# probe targeting
# --------------------------------------------------------------------------

def select_probe_target(uncertainties, eligible=None):
    """Index of the most uncertain eligible item (lowest index on ties), or None."""
    u = np.asarray(uncertainties, dtype=float).copy()
    if eligible is not None:
        u[~np.asarray(eligible, dtype=bool)] = 0.0
    if u.size == 0 or u.max() <= 0.0:
        return None
    return int(np.argmax(u))


# --------------------------------------------------------------------------
# fusion surrogate
# --------------------------------------------------------------------------

class Fusion:
    """Fixed random projections of each modality pooled by reliability gates."""

    def __init__(self, seed: int = 7, xf: bool = True, pr: bool = True):
        rng = make_rng(seed, "fusion")
        self.xf, self.pr = xf, pr
        dims = {"speech": 8, "face": 8, "pose": 4}
        self.proj = {m: rng.normal(0.0, 1.0 / np.sqrt(d), size=(X_DIM, d)) for m, d in dims.items()}

    def blocks(self, frame: ModalityFrame) -> np.ndarray:
        out = np.zeros((3, X_DIM))
        for i, m in enumerate(MODALITIES):
            if frame.kappa[i] <= 0.0:
                continue
            f = frame.block(m) - 0.5
            if m == "speech" and not self.pr:
                f = f.copy()
                f[PROSODY_SLICE] = 0.0
            out[i] = FUSION_GAIN * (self.proj[m] @ f)
        return out

    def gates(self, kappa, keep=None) -> np.ndarray:
        g = np.asarray(kappa, dtype=float).copy() if self.xf else np.ones(3)
        if keep is not None:
            g = g * keep
        s = g.sum()
        return g / s if s > 0 else np.zeros(3)

    def pool(self, blocks, kappa, keep=None) -> np.ndarray:
        return self.gates(kappa, keep) @ blocks

    def __call__(self, frame: ModalityFrame) -> np.ndarray:
        return self.pool(self.blocks(frame), frame.kappa)


def reliability_dropout(blocks, kappa, fusion: Fusion, rng, threshold: float = 0.5, rate: float = 0.5):
    """Re-pool a batch of observations after randomly dropping low-kappa modalities.

    ``blocks`` is ``[B, 3, 10]`` and ``kappa`` ``[B, 3]``; returns ``[B, 10]``.
    Rows where every modality would be dropped keep their original gates.
    """
    kappa = np.asarray(kappa, dtype=float)
    drop = (kappa < threshold) & (rng.random(kappa.shape) < rate)
    keep = (~drop).astype(float)
    base = kappa.copy() if fusion.xf else np.ones_like(kappa)
    g = base * keep
    s = g.sum(axis=1, keepdims=True)
    fallback = base / np.maximum(base.sum(axis=1, keepdims=True), 1e-300)
    g = np.where(s > 0, g / np.where(s > 0, s, 1.0), fallback)
    g[base.sum(axis=1) <= 0] = 0.0
    return np.einsum("bm,bmx->bx", g, blocks)


# --------------------------------------------------------------------------
# patient timeline
# --------------------------------------------------------------------------

@dataclass
class Timeline:
    onset: float
    segments: np.ndarray  # speech segment durations
    pauses: np.ndarray  # pause durations between segments (len = len(segments) - 1)
    gap: float  # patient's natural response gap
    yield_prob: float


def patient_timeline(profile: PatientProfile, severity: float, duration: float, rng) -> Timeline:
    onset = profile.base_latency * (0.5 + 0.5 * severity) * float(np.exp(rng.normal(0.0, 0.4)))
    n_p = int(rng.poisson(0.4 + 2.6 * profile.pause_rate * (0.5 + 0.5 * severity)))
    mu = 5.0 + 9.0 * profile.pause_rate + 6.0 * severity
    pauses = mu * np.exp(rng.normal(0.0, 0.35, size=n_p))
    segments = duration * rng.dirichlet(np.full(n_p + 1, 2.0))
    gap = profile.base_latency * (0.7 + 0.6 * severity) * float(np.exp(rng.normal(0.0, 0.1)))
    return Timeline(onset, segments, pauses, gap, 0.4 + 0.4 * severity)


# --------------------------------------------------------------------------
# turn manager and safety layer
# --------------------------------------------------------------------------

@dataclass
class Audit:
    turn: int
    kind: str  # override | dwell-cap | timeout-fallback | backchannel-injected | clarify
    proposed: list | None = None
    applied: list | None = None
    detail: dict = field(default_factory=dict)
    reward_terms: dict | None = None

    def as_dict(self) -> dict:
        return {"turn": self.turn, "kind": self.kind, "proposed": self.proposed,
                "applied": self.applied, "detail": self.detail, "reward_terms": self.reward_terms}


@dataclass
class TimingPlan:
    hold: float  # silence held before taking the floor
    declare: float  # silence after which fixed pacing commits
    dwell_capped: bool
    inject_prob: float


def turn_manager(action, uncertainty: float, cfg: EnvConfig, silences=None, rng=None):
    """Timing plan plus reactive backchannels for a list of silence lengths.

    Returns ``(plan, events)`` where ``events`` holds
    ``(silence_index, offset_into_silence)`` for each injected backchannel.
    Injection happens only in uncertainty-aware mode above ``u_bc``.
    """
    if not 0.0 <= uncertainty <= 1.0:
        raise ValueError("uncertainty must lie in [0, 1]")
    a1, a2, a3, _, a5 = (float(v) for v in action)
    hold = min(max(a1, cfg.min_dwell), cfg.max_dwell)
    inject = min(1.0, a3 * a5) if (cfg.ua and uncertainty > cfg.u_bc) else 0.0
    plan = TimingPlan(hold, a2, hold != a1, inject)
    events = []
    if silences is not None and inject > 0.0:
        for j, length in enumerate(silences):
            if length > a2 and rng.random() < inject:
                events.append((j, a2))
    return plan, events


def safety_check(proposed: float, seg_bounds, tolerance: float, cfg: EnvConfig):
    """Vet an agent start against the patient's speech timeline.

    ``seg_bounds`` is a list of ``(start, end)`` speech intervals.  Returns
    ``(applied_start, overlap, consistent, overridden, truncate_at)`` where
    ``truncate_at`` is the time after which the patient's speech is lost.
    """
    end = seg_bounds[-1][1]
    for s, e in seg_bounds:
        if s < proposed < e:
            if cfg.guardrails and proposed < end - tolerance * cfg.tolerance_window:
                return e, 0.0, True, True, e
            return proposed, e - proposed, False, False, e
    return proposed, 0.0, True, False, proposed


# --------------------------------------------------------------------------
# environment
# --------------------------------------------------------------------------

@dataclass
class StepResult:
    state: np.ndarray
    metrics: np.ndarray
    reward: float
    done: bool
    audit: list
    info: dict


class InterviewEnv:
    """One interview at a time; call :meth:`reset` before every episode."""

    def __init__(self, cfg: EnvConfig | None = None):
        self.cfg = cfg or EnvConfig()
        self.fusion = Fusion(self.cfg.fusion_seed, xf=self.cfg.xf, pr=self.cfg.pr)
        self.items = item_schedule()
        self.t = None
        self.done = True

    # -- observation ---------------------------------------------------------
    def _observe(self, frame: ModalityFrame):
        blocks = self.fusion.blocks(frame)
        return self.fusion.pool(blocks, frame.kappa), blocks

    @property
    def state(self) -> np.ndarray:
        return np.concatenate([self.x, self.w])

    @property
    def provenance(self):
        """Per-modality projected blocks and reliabilities behind the current x."""
        return self.blocks.copy(), self.frame.kappa.copy()

    def counterfactual_state(self, rng):
        """State (and provenance) for a perturbed copy of the current frame."""
        frame = perturb_counterfactual(self.frame, self.patient, self.cfg.cf_bounds, rng)
        x, blocks = self._observe(frame)
        return np.concatenate([x, self.w]), blocks, frame.kappa.copy()

    def _emit(self):
        frame, duration = emit_turn_features(self.patient, self.items[self.t], self.rng_patient)
        if self.cfg.dropout_p > 0:
            frame = mask_modalities(frame, self.cfg.dropout_p, self.rng_mask)
        self.frame, self.duration = frame, duration
        self.x, self.blocks = self._observe(frame)

    # -- episode ---------------------------------------------------------------
    def reset(self, patient: PatientProfile, w=None, seed: int = 0) -> np.ndarray:
        self.w = validate_weights(uniform_weights() if w is None else w)
        self.patient = patient
        self.rng_patient = make_rng(seed, "patient")
        self.rng_fx = make_rng(seed, "effects")
        self.rng_mask = make_rng(seed, "mask")
        self.t = 0
        self.done = False
        self.delivered = 0
        self.answered = np.zeros(N_ITEMS, dtype=bool)
        self.skipped = np.zeros(N_ITEMS, dtype=bool)
        self.likert = np.zeros(N_ITEMS, dtype=int)
        self.confidence = np.zeros(N_ITEMS)
        self.clarified = np.zeros(N_ITEMS)
        self.topic_counts = np.zeros(len(CLUSTERS))
        self.rapport_sum = 0.0
        self._emit()
        return self.state

    def _uncertainty_vector(self):
        conf = np.maximum(self.confidence, self.clarified)
        return np.where(self.answered, 1.0 - conf, 0.0)

    def step(self, action, uncertainty: float = 0.0) -> StepResult:
        if self.done:
            raise StateError("step() called on a finished episode; call reset()")
        cfg = self.cfg
        a = BOUNDS.clip(action)
        item = self.items[self.t]
        latent = self.patient.latent_score(item)
        sev = normalized_severity(item, latent)
        tl = patient_timeline(self.patient, sev, self.duration, self.rng_patient)
        u = float(np.clip(uncertainty, 0.0, 1.0))
        turn = self._play_turn(tl, a, u)
        audit = turn["audit"]

        lo, hi = item.likert_range
        clar_unnecessary = 0
        if turn["skipped"]:
            self.skipped[self.t] = True
        else:
            self.delivered += 1
            fidelity = cfg.base_fidelity * (0.35 + 0.65 * turn["delivered_frac"]) * (0.8 + 0.2 * self.frame.kappa[0])
            likert, conf = interpret_answer(latent, self.rng_fx, fidelity, lo, hi)
            self.answered[self.t] = True
            self.likert[self.t] = likert
            self.confidence[self.t] = conf
            self.topic_counts[CLUSTERS.index(item.topic)] += 1
            # clarification sub-turn on perceived uncertainty
            noise_sd = cfg.clarify_noise * (1.3 - float(self.frame.kappa.mean()))
            perceived = (1.0 - conf) + noise_sd * self.rng_fx.normal()
            if perceived > cfg.clarify_threshold:
                unc = self._uncertainty_vector()
                unc[self.t] = max(perceived, 0.0)
                target = select_probe_target(unc, self.answered)
                if target is not None:
                    tgt = self.items[target]
                    if cfg.guardrails and self.likert[target] == tgt.likert_range[1]:
                        audit.append(Audit(self.t, "override", detail={
                            "reason": "de-escalation", "target": str(tgt)}))
                    else:
                        true_conf = max(self.confidence[target], self.clarified[target])
                        clar_unnecessary = int(true_conf >= cfg.unnecessary_conf)
                        self.clarified[target] = max(self.clarified[target], 0.95)
                        self.topic_counts[CLUSTERS.index(tgt.topic)] += 1
                        audit.append(Audit(self.t, "clarify", detail={
                            "target": str(tgt), "unnecessary": bool(clar_unnecessary)}))
        trace = TurnTrace(
            turn=self.t, delivered=self.delivered, target_latency=float(a[0]),
            actual_latency=turn["latency"], overlap=turn["overlap"], wasted_wait=turn["wasted_wait"],
            unnecessary_clarify=clar_unnecessary, cut_consistent=turn["consistent"],
            bc_total=turn["bc_total"], bc_in_pause=turn["bc_in_pause"],
            topic_counts=tuple(self.topic_counts))
        m = compute_metrics(trace, cfg)
        r = scalarize(self.w, m)
        self.rapport_sum += m[1]
        terms = {n: float(v) for n, v in zip(METRIC_NAMES, m)}
        for rec in audit:
            if rec.kind in ("override", "dwell-cap", "timeout-fallback"):
                rec.reward_terms = terms
        info = {
            "item": str(item), "latent": latent,
            "likert": int(self.likert[self.t]) if self.answered[self.t] else None,
            "confidence": float(self.confidence[self.t]) if self.answered[self.t] else None,
            "skipped": bool(self.skipped[self.t]), "uncertainty": u,
            "latency": turn["latency"], "overlap": turn["overlap"], "wasted_wait": turn["wasted_wait"],
            "clarify_unnecessary": clar_unnecessary, "cut_consistent": turn["consistent"],
            "bc_total": turn["bc_total"], "bc_in_pause": turn["bc_in_pause"],
            "injected_bc": turn["injected"], "delivered_frac": turn["delivered_frac"],
        }
        self.t += 1
        if self.t >= N_ITEMS:
            self.done = True
        else:
            self._emit()
        return StepResult(self.state, m, r, self.done, audit, info)

    # -- the turn itself -------------------------------------------------------
    def _play_turn(self, tl: Timeline, a, u: float) -> dict:
        cfg = self.cfg
        rng = self.rng_fx
        a1, a2, a3, a4, a5 = (float(v) for v in a)
        audit: list[Audit] = []
        plan, _ = turn_manager(a, u, cfg)
        if plan.dwell_capped:
            audit.append(Audit(self.t, "dwell-cap", proposed=[a1], applied=[plan.hold]))
        hold = plan.hold
        out = {"audit": audit, "overlap": 0.0, "consistent": True, "skipped": False,
               "delivered_frac": 1.0, "bc_total": 0, "bc_in_pause": 0, "injected": 0,
               "latency": hold, "wasted_wait": 0.0}

        onset = tl.onset
        if onset > cfg.stall_timeout:
            ok = rng.random() < self._recover_prob(a5)
            audit.append(Audit(self.t, "timeout-fallback", detail={"reason": "stall", "recovered": bool(ok)}))
            if not ok:
                out["skipped"] = True
                out["delivered_frac"] = 0.0
                return out
            onset = cfg.stall_timeout + cfg.prompt_len + 0.3 * tl.onset

        segs = list(tl.segments)
        pauses = list(tl.pauses)
        speech_total = float(sum(segs))

        # Backchannels inside a pause encourage the patient: the first one to
        # land shortens the rest of that pause.  Reactive ones come from the
        # uncertainty-aware manager at offset a2, ambient ones anywhere.
        rate = a3 * a5 / cfg.bc_period
        _, events = turn_manager(a, u, cfg, pauses, rng)
        injected_at = dict(events)
        pause_bcs = []
        for j, p in enumerate(pauses):
            offs = list(p * rng.random(int(rng.poisson(rate * p))))
            if j in injected_at:
                offs.append(injected_at[j])
                out["injected"] += 1
                audit.append(Audit(self.t, "backchannel-injected", detail={"pause": j}))
            if offs:
                first = min(offs)
                pauses[j] = first + (p - first) * cfg.bc_pause_shrink
                pause_bcs += [(j, o) for o in offs if o < pauses[j]]
        speech_pos = np.sort(speech_total * rng.random(int(rng.poisson(rate * speech_total))))

        # absolute speech intervals
        bounds = []
        t0 = onset
        for k, d in enumerate(segs):
            bounds.append((t0, t0 + d))
            t0 += d + (pauses[k] if k < len(pauses) else 0.0)
        end = bounds[-1][1]

        start = None
        truncate_at = end
        for k, p in enumerate(pauses):
            ps = bounds[k][1]
            if p >= hold:
                c = ps + hold
                if rng.random() < tl.yield_prob:
                    start, truncate_at = c, ps
                    break
                resume = ps + p
                if cfg.ua:
                    continue  # agent yields to the resuming patient
                talk_end = min(c + cfg.prompt_len, bounds[k + 1][1])
                out["overlap"] = max(0.0, talk_end - resume)
                start, truncate_at = c, min(talk_end, bounds[k + 1][1])
                break
            if not cfg.ua and p >= a2:
                c = ps + hold
                applied, overlap, consistent, overridden, cut = safety_check(c, bounds, a4, cfg)
                if overridden:
                    audit.append(Audit(self.t, "override", proposed=[c], applied=[applied],
                                       detail={"reason": "cut-deferred"}))
                out["overlap"] = overlap
                out["consistent"] = consistent
                start, truncate_at = applied, cut
                break
        if start is None:
            start = end + hold
        if start > cfg.topic_cap:
            applied, overlap, consistent, _, cut = safety_check(cfg.topic_cap, bounds, 1.0, replace(cfg, guardrails=True))
            audit.append(Audit(self.t, "dwell-cap", proposed=[start], applied=[applied],
                               detail={"reason": "topic-cap"}))
            start, truncate_at = applied, min(truncate_at, cut)
            out["overlap"], out["consistent"] = overlap, consistent

        delivered = sum(max(0.0, min(e, truncate_at) - s) for s, e in bounds)
        frac = delivered / speech_total if speech_total > 0 else 1.0
        out["delivered_frac"] = float(frac)
        out["latency"] = float(start - end)
        out["wasted_wait"] = float(max(0.0, start - end - tl.gap))

        # only backchannels before the agent takes the floor count; one more
        # reactive backchannel goes into the final silence when injecting
        limit = min(start, end)
        total = in_pause = 0
        for j, o in pause_bcs:
            if bounds[j][1] + o < limit:
                total += 1
                in_pause += 1
        seg_start = np.concatenate([[0.0], np.cumsum(segs)])
        for pos in speech_pos:
            k = min(int(np.searchsorted(seg_start, pos, side="right")) - 1, len(segs) - 1)
            if bounds[k][0] + pos - seg_start[k] < limit:
                total += 1
        if plan.inject_prob > 0 and start > end + a2 and rng.random() < plan.inject_prob:
            total += 1
            out["injected"] += 1
        out["bc_total"], out["bc_in_pause"] = total, in_pause

        if frac < cfg.min_delivered:
            # fallback re-ask; a recovered item is answered in full
            ok = rng.random() < self._recover_prob(a5)
            audit.append(Audit(self.t, "timeout-fallback",
                               detail={"reason": "truncated", "delivered": frac, "recovered": bool(ok)}))
            if ok:
                out["delivered_frac"] = 1.0
            else:
                out["skipped"] = True
        return out

    @staticmethod
    def _recover_prob(a5: float) -> float:
        """Chance a fallback prompt re-engages the patient; rises with immediacy gain."""
        return 0.45 + 0.45 * (a5 - ACTION_LOW[4]) / (ACTION_HIGH[4] - ACTION_LOW[4])

    # -- end of episode --------------------------------------------------------
    def screen_inputs(self):
        """Imputed interpreted scores and latent truth for both instruments."""
        ans = self.answered
        phq = impute_scores(self.likert[:8], ans[:8], 0)
        pcl = impute_scores(self.likert[8:], ans[8:], 1)
        return phq, pcl, list(self.patient.phq8_latent), list(self.patient.pclc_latent)

    def episode_bonus(self, phq_cutpoint=None, pcl_cutpoint=None) -> dict:
        if not self.done:
            raise StateError("episode bonus is only defined once the episode is done")
        cfg = self.cfg
        phq, pcl, tphq, tpcl = self.screen_inputs()
        dacc, sens = screen_bonus_terms(phq, pcl, tphq, tpcl,
                                        phq_cutpoint or cfg.phq_cutpoint, pcl_cutpoint or cfg.pcl_cutpoint)
        rapport = self.rapport_sum / N_ITEMS
        return {"delta_acc": dacc, "sens": sens, "rapport": rapport,
                "bonus": legacy_reward(dacc, sens, rapport, cfg)}
