"""Training runs, aggregation, ablation/robustness suites and export.

A *cell* is one ``(RunConfig, seed)`` pair.  Cells are independent and
deterministic; :func:`run_cell` caches their results on disk keyed by the
resolved config, the seed and a hash of the package source, so suites can be
re-assembled without retraining.
"""

from __future__ import annotations

import ast
import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .agents.cem import CEMAgent, CEMConfig
from .agents.checkpoint import config_hash
from .agents.ppo import PPOAgent, PPOConfig, gae
from .agents.td3 import TD3Agent, TD3Config
from .cohort import generate_cohort, split_holdout
from .env import (METRIC_NAMES, RAPPORT_TERMS, EnvConfig, InterviewEnv, uniform_weights,
                  validate_weights, weights_without)
from .kernel import make_rng
from .questionnaire import N_ITEMS, ValidationError, instruments
from .stats import delta_first_last, lastn_mean, safe_stat

AGENT_KINDS = ("TD3", "PPO", "CEM")
TOGGLES = ("cf", "ua", "tr", "xf", "pr")
ABLATIONS = ("full", "-CF", "-UA", "-TR", "-XF", "-PR")
CORE_SERIES = ("reward", "coverage", "rapport", "balance", "pace")
DQ_SERIES = ("wait_s", "overlap_s", "clarify_pct", "cut_pct", "bc_pct", "latency_s")
SCREEN_SERIES = ("pred_phq", "pred_pcl", "true_phq", "true_pcl", "ep_rapport")
DROPOUT_GRID = (0.0, 0.2, 0.4)


class IOFault(OSError):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass
class RunConfig:
    agent: str = "TD3"
    episodes: int = 3000
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    cf: bool = True  # counterfactual consistency
    ua: bool = True  # uncertainty-aware turn manager
    tr: bool = True  # trust/rapport reward terms
    xf: bool = True  # reliability-gated cross-modal fusion
    pr: bool = True  # prosody features
    guardrails: bool = True
    dropout_p: float = 0.0
    holdout_fraction: float = 0.2
    phq_cutpoint: int = 10
    pcl_cutpoint: int = 44
    w: object = "uniform"  # "uniform", "dirichlet" or 10 explicit weights
    end_bonus: bool = True
    cohort_seed: int = 0
    cohort_size: int = 276
    window: int = 35
    last_n: int = 120
    eval_episodes: int = 120
    log_episodes: int = 25
    td3: dict = field(default_factory=dict)
    ppo: dict = field(default_factory=dict)
    cem: dict = field(default_factory=dict)
    env: dict = field(default_factory=dict)

    def validate(self) -> "RunConfig":
        if self.agent not in AGENT_KINDS:
            raise ValidationError(f"agent must be one of {AGENT_KINDS}, got {self.agent!r}")
        if int(self.episodes) < 1:
            raise ValidationError("episodes must be >= 1")
        if not self.seeds or any(int(s) < 0 for s in self.seeds):
            raise ValidationError("seeds must be a non-empty list of non-negative integers")
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ValidationError("dropout_p must lie in [0, 1]")
        if self.dropout_p > 0 and not self.pr:
            raise ValidationError("modality dropout cannot be combined with the prosody ablation")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ValidationError("holdout_fraction must lie in (0, 1)")
        if self.phq_cutpoint not in range(0, 25):
            raise ValidationError("phq_cutpoint must lie in [0, 24]")
        lo, hi = instruments()["PCLC"]["cutpoint_range"]
        if not lo <= self.pcl_cutpoint <= hi:
            raise ValidationError(f"pcl_cutpoint must lie in [{lo}, {hi}]")
        if not (isinstance(self.w, str) and self.w in ("uniform", "dirichlet")):
            if isinstance(self.w, str):
                raise ValidationError("w must be 'uniform', 'dirichlet' or a list of 10 weights")
            validate_weights(self.w)
        if self.cohort_size < 2 or self.window < 1 or self.last_n < 1 or self.eval_episodes < 1:
            raise ValidationError("cohort_size >= 2 and window, last_n, eval_episodes >= 1 required")
        for name, cls in (("td3", TD3Config), ("ppo", PPOConfig), ("cem", CEMConfig), ("env", EnvConfig)):
            known = {f.name for f in fields(cls)}
            extra = set(getattr(self, name)) - known
            if extra:
                raise ValidationError(f"unknown {name} override(s): {sorted(extra)}")
            try:
                self._build(name)
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"invalid {name} override: {exc}") from exc
        return self

    def _build(self, name):
        cls = {"td3": TD3Config, "ppo": PPOConfig, "cem": CEMConfig, "env": EnvConfig}[name]
        return cls(**getattr(self, name))

    def to_dict(self) -> dict:
        d = asdict(self)
        if not isinstance(d["w"], str):
            d["w"] = [float(v) for v in d["w"]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown config key(s): {sorted(extra)}")
        return cls(**d).validate()

    def cell_dict(self, seed: int) -> dict:
        """Everything that determines a single cell's results."""
        d = self.to_dict()
        d.pop("seeds")
        d["seed"] = int(seed)
        return d

    def env_config(self) -> EnvConfig:
        base = EnvConfig(**self.env)
        return replace(base, ua=self.ua, xf=self.xf, pr=self.pr, guardrails=self.guardrails,
                       dropout_p=self.dropout_p, phq_cutpoint=self.phq_cutpoint,
                       pcl_cutpoint=self.pcl_cutpoint, rho=base.rho if self.tr else 0.0)


def ablate(cfg: RunConfig, variant: str) -> RunConfig:
    if variant == "full":
        return replace(cfg)
    if variant not in ABLATIONS:
        raise ValidationError(f"unknown ablation {variant!r}")
    return replace(cfg, **{variant[1:].lower(): False})


def cell_hash(cfg: RunConfig, seed: int) -> str:
    return config_hash(cfg.cell_dict(seed))


# modules that only format, serialize or dispatch results; editing them keeps the cache valid
_REPORT_ONLY = ("report.py", "cli.py", "__main__.py", "checkpoint.py")


def _code_fingerprint(text: str) -> bytes:
    """AST dump without docstrings, so comment and formatting edits keep the hash."""
    tree = ast.parse(text)
    for node in ast.walk(tree):
        body = getattr(node, "body", None)
        if (isinstance(body, list) and body and isinstance(body[0], ast.Expr)
                and isinstance(body[0].value, ast.Constant) and isinstance(body[0].value.value, str)):
            node.body = body[1:] or [ast.Pass()]
    return ast.dump(tree, annotate_fields=False).encode()


def source_hash() -> str:
    """Hash of every module and data file that can change a cell's results."""
    root = Path(__file__).parent
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.suffix not in (".py", ".json") or "__pycache__" in p.parts:
            continue
        if p.name in _REPORT_ONLY:
            continue
        h.update(p.relative_to(root).as_posix().encode())
        h.update(_code_fingerprint(p.read_text("utf-8")) if p.suffix == ".py" else p.read_bytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# episodes
# --------------------------------------------------------------------------

@dataclass
class Cohort:
    train: list
    held: list


def make_cohort(cfg: RunConfig) -> Cohort:
    pop = generate_cohort(cfg.cohort_size, cfg.cohort_seed)
    train, held = split_holdout(pop, cfg.holdout_fraction, cfg.cohort_seed)
    return Cohort(train, held)


def episode_weights(cfg: RunConfig, rng) -> np.ndarray:
    if isinstance(cfg.w, str) and cfg.w == "dirichlet":
        w = rng.dirichlet(np.full(len(METRIC_NAMES), 5.0))
    elif isinstance(cfg.w, str):
        w = uniform_weights()
    else:
        w = np.asarray(cfg.w, dtype=float)
    if not cfg.tr:
        w = w.copy()
        for n in RAPPORT_TERMS:
            w[METRIC_NAMES.index(n)] = 0.0
        w = w / w.sum() if w.sum() > 0 else weights_without(RAPPORT_TERMS)
    return w


class Schedule:
    """Per-episode patient, preference vector and environment seed for one run."""

    def __init__(self, cfg: RunConfig, patients, seed: int, n: int, tag: str = "train"):
        rng = make_rng(seed, tag, "schedule")
        self.patients = [patients[int(i)] for i in rng.integers(0, len(patients), size=n)]
        wrng = make_rng(seed, tag, "weights")
        self.weights = [episode_weights(cfg, wrng) for _ in range(n)]
        self.env_seeds = [int(v) for v in make_rng(seed, tag, "env-seeds").integers(0, 2 ** 62, size=n)]

    def __len__(self):
        return len(self.patients)


class EpisodeRecorder:
    """Accumulates per-turn outcomes into one per-episode summary row."""

    def __init__(self, keep_turns: bool):
        self.keep = keep_turns
        self.metrics = []
        self.rewards = []
        self.infos = []
        self.audit = []
        self.turns = []
        self.actions = []

    def add(self, s, a, res):
        self.actions.append(np.asarray(a, dtype=float))
        self.metrics.append(res.metrics)
        self.rewards.append(res.reward)
        self.infos.append(res.info)
        recs = [r.as_dict() for r in res.audit]
        self.audit.extend(recs)
        if self.keep:
            self.turns.append({
                "turn": len(self.turns), "item": res.info["item"],
                "s": [float(v) for v in s], "a": [float(v) for v in a],
                "m": [float(v) for v in res.metrics], "r": float(res.reward),
                "likert": res.info["likert"], "confidence": res.info["confidence"],
                "skipped": res.info["skipped"], "uncertainty": res.info["uncertainty"],
                "latency": res.info["latency"], "overlap": res.info["overlap"], "audit": recs})

    def summary(self, env: InterviewEnv, cfg: RunConfig) -> dict:
        m = np.asarray(self.metrics)
        infos = self.infos
        row = {"reward": float(np.mean(self.rewards)), "coverage": float(m[-1, 0])}
        for j, name in enumerate(METRIC_NAMES):
            if name != "coverage":
                row[name] = float(m[:, j].mean())
        bc_total = sum(i["bc_total"] for i in infos)
        bc_in = sum(i["bc_in_pause"] for i in infos)
        row["wait_s"] = float(np.mean([i["wasted_wait"] for i in infos])) / 10.0
        row["overlap_s"] = float(np.mean([i["overlap"] for i in infos])) / 10.0
        row["clarify_pct"] = 100.0 * float(np.mean([i["clarify_unnecessary"] for i in infos]))
        row["cut_pct"] = 100.0 * float(np.mean([i["cut_consistent"] for i in infos]))
        row["bc_pct"] = 100.0 if bc_total == 0 else 100.0 * bc_in / bc_total
        row["latency_s"] = float(np.mean([i["latency"] for i in infos])) / 10.0
        phq, pcl, tphq, tpcl = env.screen_inputs()
        row.update(pred_phq=float(sum(phq)), pred_pcl=float(sum(pcl)),
                   true_phq=float(sum(tphq)), true_pcl=float(sum(tpcl)), ep_rapport=row["rapport"])
        row["bonus"] = env.episode_bonus()["bonus"]
        row["skips"] = float(sum(i["skipped"] for i in infos))
        row["injected_bc"] = float(sum(i["injected_bc"] for i in infos))
        row["overrides"] = float(sum(a["kind"] == "override" for a in self.audit))
        for j, v in enumerate(np.mean(self.actions, axis=0)):
            row[f"a{j + 1}"] = float(v)
        return row


# --------------------------------------------------------------------------
# runs
# --------------------------------------------------------------------------

@dataclass
class RunResult:
    config: dict
    seed: int
    series: dict  # name -> np.ndarray, one value per episode consumed
    cem_best: np.ndarray | None
    episode_log: list
    audit: list
    evals: dict
    agent_state: dict
    agent_config: dict
    audit_counts: dict

    def stat(self, name: str, kind: str = "lastn") -> float:
        x = self.series[name]
        cfg = self.config
        if kind == "lastn":
            return safe_stat(lastn_mean, x, cfg["last_n"])
        return safe_stat(delta_first_last, x, cfg["window"])


def _build_agent(cfg: RunConfig, seed: int, env: InterviewEnv):
    if cfg.agent == "TD3":
        tc = cfg._build("td3")
        if not cfg.cf:
            tc = replace(tc, lambda_cf=0.0, p_cf=0.0)
        return TD3Agent(tc, seed, fusion=env.fusion)
    if cfg.agent == "PPO":
        return PPOAgent(cfg._build("ppo"), seed)
    return CEMAgent(cfg._build("cem"), seed)


class _Collector:
    def __init__(self, cfg: RunConfig, n: int):
        self.rows = []
        self.log = []
        self.audit = []
        self.counts: dict[str, int] = {}
        self.keep_from = n - cfg.log_episodes

    def episode(self, ep: int) -> EpisodeRecorder:
        return EpisodeRecorder(ep >= self.keep_from)

    def finish(self, ep: int, rec: EpisodeRecorder, env, cfg, patient):
        self.rows.append(rec.summary(env, cfg))
        for a in rec.audit:
            self.counts[a["kind"]] = self.counts.get(a["kind"], 0) + 1
        if rec.keep:
            self.log.append({"episode": ep, "patient": patient.id, "turns": rec.turns})
            self.audit.extend({"episode": ep, **a} for a in rec.audit)

    def series(self) -> dict:
        keys = self.rows[0].keys() if self.rows else ()
        return {k: np.array([r[k] for r in self.rows]) for k in keys}


def _td3_episode(agent: TD3Agent, env, patient, w, env_seed, cfg, rec, rngs, explore=True, learn=True):
    s = env.reset(patient, w, env_seed)
    tc = agent.cfg
    while not env.done:
        turn = env.t
        a = agent.act(s, explore, rngs["act"])
        u = agent.uncertainty(s, a, turn) if cfg.ua else 0.0
        cf = None
        if learn and tc.p_cf > 0 and rngs["cf"].random() < tc.p_cf:
            cf = env.counterfactual_state(rngs["cf"])
        blocks, kappa = env.provenance
        s_prev = s
        res = env.step(a, u)
        r = res.reward
        if res.done and cfg.end_bonus:
            r += env.episode_bonus()["bonus"]
        rec.add(s_prev, a, res)
        if learn:
            if cf is None:
                agent.buffer.add(s_prev, a, r, res.state, res.done, blocks=blocks, kappa=kappa, turn=turn)
            else:
                agent.buffer.add(s_prev, a, r, res.state, res.done, s_cf=cf[0], blocks=blocks, kappa=kappa,
                                 blocks_cf=cf[1], kappa_cf=cf[2], turn=turn)
        s = res.state


def _ppo_episode(agent: PPOAgent, env, patient, w, env_seed, cfg, rec, rng, explore=True):
    s = env.reset(patient, w, env_seed)
    traj = {"s": [], "z": [], "logp": [], "r": [], "done": []}
    u = agent.uncertainty() if cfg.ua else 0.0
    while not env.done:
        a, z, logp = agent.act(s, explore, rng)
        res = env.step(a, u)
        r = res.reward
        if res.done and cfg.end_bonus:
            r += env.episode_bonus()["bonus"]
        rec.add(s, a, res)
        for k, v in (("s", s), ("z", z), ("logp", logp), ("r", r), ("done", res.done)):
            traj[k].append(v)
        s = res.state
    return traj


def _static_episode(action, env, patient, w, env_seed, cfg, rec, u):
    env.reset(patient, w, env_seed)
    total = 0.0
    s = env.state
    while not env.done:
        res = env.step(action, u)
        rec.add(s, action, res)
        total += res.reward
        s = res.state
    ret = total
    if cfg.end_bonus:
        ret += env.episode_bonus()["bonus"]
    return ret


def train_run(cfg: RunConfig, seed: int) -> RunResult:
    """One training cell: ``cfg.episodes`` episodes over the training patients."""
    cfg.validate()
    cohort = make_cohort(cfg)
    env = InterviewEnv(cfg.env_config())
    agent = _build_agent(cfg, seed, env)
    initial_state = {k: np.array(v, copy=True) for k, v in agent.state_dict().items()}
    n = int(cfg.episodes)
    sched = Schedule(cfg, cohort.train, seed, n)
    col = _Collector(cfg, n)
    cem_best = None

    if cfg.agent == "TD3":
        rngs = {"act": make_rng(seed, "explore"), "cf": make_rng(seed, "counterfactual")}
        tc = agent.cfg
        steps = 0
        for ep in range(n):
            rec = col.episode(ep)
            _td3_episode(agent, env, sched.patients[ep], sched.weights[ep], sched.env_seeds[ep], cfg, rec, rngs)
            steps += N_ITEMS
            col.finish(ep, rec, env, cfg, sched.patients[ep])
            if steps >= tc.update_every:
                steps = 0
                for _ in range(tc.updates_per_burst):
                    agent.update()
    elif cfg.agent == "PPO":
        pc = agent.cfg
        rng = make_rng(seed, "explore")
        per_rollout = max(1, math.ceil(pc.rollout / N_ITEMS))
        batch = []
        for ep in range(n):
            rec = col.episode(ep)
            batch.append(_ppo_episode(agent, env, sched.patients[ep], sched.weights[ep], sched.env_seeds[ep],
                                      cfg, rec, rng))
            col.finish(ep, rec, env, cfg, sched.patients[ep])
            if len(batch) == per_rollout:
                _ppo_learn(agent, batch)
                batch = []
    else:
        pop = agent.cfg.population
        best = []
        ep = 0

        def evaluate(cands):
            nonlocal ep
            out = []
            u = agent.uncertainty() if cfg.ua else 0.0
            for c in cands:
                rec = col.episode(ep)
                out.append(_static_episode(c, env, sched.patients[ep], sched.weights[ep], sched.env_seeds[ep],
                                           cfg, rec, u))
                col.finish(ep, rec, env, cfg, sched.patients[ep])
                ep += 1
            return out

        for _ in range(n // pop):
            b, _ = agent.step(evaluate)
            best.append(b)
        rest = n - ep
        if rest:
            evaluate([agent.act(None, True, agent.rng) for _ in range(rest)])
        cem_best = np.array(best)

    final_state = {k: np.array(v, copy=True) for k, v in agent.state_dict().items()}
    evals = run_evaluations(cfg, seed, cohort, initial_state, final_state)
    return RunResult(config=cfg.cell_dict(seed), seed=seed, series=col.series(), cem_best=cem_best,
                     episode_log=col.log, audit=col.audit, evals=evals, agent_state=final_state,
                     agent_config=agent.config_dict(), audit_counts=dict(sorted(col.counts.items())))


def _ppo_learn(agent: PPOAgent, batch):
    states, zs, logps, advs, rets, ts = [], [], [], [], [], []
    for tr in batch:
        s = np.asarray(tr["s"])
        turns = np.arange(len(s))
        v = np.concatenate([agent.values(s, turns), [0.0]])
        adv, ret = gae(tr["r"], v, tr["done"], agent.cfg.gamma, agent.cfg.gae_lambda)
        states.append(s)
        zs.append(np.asarray(tr["z"]))
        logps.append(np.asarray(tr["logp"]))
        advs.append(adv)
        rets.append(ret)
        ts.append(turns)
    return agent.update(np.concatenate(states), np.concatenate(zs), np.concatenate(logps),
                        np.concatenate(advs), np.concatenate(rets), np.concatenate(ts))


# --------------------------------------------------------------------------
# evaluation of snapshots
# --------------------------------------------------------------------------

def _agent_from_state(cfg: RunConfig, seed: int, env, state: dict):
    agent = _build_agent(cfg, seed, env)
    agent.load_state_dict(state)
    return agent


def evaluate_policy(cfg: RunConfig, seed: int, state: dict, patients, n_episodes: int, *,
                    behavior: bool, tag: str, dropout_p: float | None = None) -> dict:
    """Mean per-episode series for a frozen policy snapshot.

    ``behavior=True`` acts exactly like training (exploration noise, sampled
    PPO actions, sampled CEM candidates); otherwise the deterministic policy
    is used.  Schedules depend only on ``(seed, tag)`` so two snapshots
    evaluated with the same tag see identical patients and draws.
    """
    ecfg = cfg.env_config()
    if dropout_p is not None:
        ecfg = replace(ecfg, dropout_p=dropout_p)
    env = InterviewEnv(ecfg)
    agent = _agent_from_state(cfg, seed, env, state)
    sched = Schedule(cfg, patients, seed, n_episodes, tag)
    col = _Collector(replace(cfg, log_episodes=0), n_episodes)
    if cfg.agent == "TD3":
        rngs = {"act": make_rng(seed, tag, "explore"), "cf": make_rng(seed, tag, "cf")}
        for ep in range(n_episodes):
            rec = col.episode(ep)
            _td3_episode(agent, env, sched.patients[ep], sched.weights[ep], sched.env_seeds[ep], cfg, rec, rngs,
                         explore=behavior, learn=False)
            col.finish(ep, rec, env, cfg, sched.patients[ep])
    elif cfg.agent == "PPO":
        rng = make_rng(seed, tag, "explore")
        for ep in range(n_episodes):
            rec = col.episode(ep)
            _ppo_episode(agent, env, sched.patients[ep], sched.weights[ep], sched.env_seeds[ep], cfg, rec, rng,
                         explore=behavior)
            col.finish(ep, rec, env, cfg, sched.patients[ep])
    else:
        rng = make_rng(seed, tag, "explore")
        u = agent.uncertainty() if cfg.ua else 0.0
        for ep in range(n_episodes):
            rec = col.episode(ep)
            a = agent.act(None, behavior, rng)
            _static_episode(a, env, sched.patients[ep], sched.weights[ep], sched.env_seeds[ep], cfg, rec, u)
            col.finish(ep, rec, env, cfg, sched.patients[ep])
    return {k: float(np.mean(v)) for k, v in col.series().items()}


def run_evaluations(cfg: RunConfig, seed: int, cohort: Cohort, initial: dict, final: dict) -> dict:
    n = cfg.eval_episodes
    out = {}
    h0 = evaluate_policy(cfg, seed, initial, cohort.held, n, behavior=False, tag="holdout")
    h1 = evaluate_policy(cfg, seed, final, cohort.held, n, behavior=False, tag="holdout")
    out["holdout_initial"] = h0
    out["holdout_final"] = h1
    out["holdout_delta"] = {k: h1[k] - h0[k] for k in h1}
    for p in DROPOUT_GRID:
        out[f"dropout_{p:.1f}"] = evaluate_policy(cfg, seed, final, cohort.train, n, behavior=False,
                                                  tag="dropout", dropout_p=p)
    return out


# --------------------------------------------------------------------------
# cached cells
# --------------------------------------------------------------------------

def default_cache_dir() -> Path:
    return Path(os.environ.get("INTAKESIM_CACHE", Path.home() / ".cache" / "intakesim"))


def _cache_key(cfg: RunConfig, seed: int) -> str:
    return hashlib.sha256((cell_hash(cfg, seed) + source_hash()).encode()).hexdigest()[:24]


def _result_to_files(res: RunResult, d: Path) -> None:
    d.mkdir(parents=True, exist_ok=True)
    arrays = {f"series/{k}": v for k, v in res.series.items()}
    arrays.update({f"state/{k}": v for k, v in res.agent_state.items()})
    if res.cem_best is not None:
        arrays["cem_best"] = res.cem_best
    tmp = d / "result.npz.tmp"
    with tmp.open("wb") as fh:
        np.savez(fh, **arrays)
    meta = {"config": res.config, "seed": res.seed, "evals": res.evals, "agent_config": res.agent_config,
            "audit_counts": res.audit_counts}
    (d / "meta.json").write_text(json.dumps(meta, sort_keys=True), encoding="utf-8")
    (d / "log.json").write_text(json.dumps({"episode_log": res.episode_log, "audit": res.audit}), encoding="utf-8")
    tmp.replace(d / "result.npz")


def _result_from_files(d: Path) -> RunResult:
    meta = json.loads((d / "meta.json").read_text(encoding="utf-8"))
    logs = json.loads((d / "log.json").read_text(encoding="utf-8"))
    with np.load(d / "result.npz") as z:
        series = {k[7:]: z[k].copy() for k in z.files if k.startswith("series/")}
        state = {k[6:]: z[k].copy() for k in z.files if k.startswith("state/")}
        cem_best = z["cem_best"].copy() if "cem_best" in z.files else None
    return RunResult(config=meta["config"], seed=meta["seed"], series=series, cem_best=cem_best,
                     episode_log=logs["episode_log"], audit=logs["audit"], evals=meta["evals"],
                     agent_state=state, agent_config=meta["agent_config"], audit_counts=meta["audit_counts"])


def run_cell(cfg: RunConfig, seed: int, cache_dir=None, use_cache: bool = True) -> RunResult:
    if not use_cache:
        return train_run(cfg, seed)
    root = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    d = root / _cache_key(cfg, seed)
    if (d / "result.npz").exists():
        return _result_from_files(d)
    res = train_run(cfg, seed)
    try:
        _result_to_files(res, d)
    except OSError:
        pass  # a read-only cache only costs recomputation
    return res


def _cell_job(args):
    cfg_dict, seed, cache_dir, use_cache = args
    return run_cell(RunConfig.from_dict(cfg_dict), seed, cache_dir, use_cache)


def run_cells(cells, jobs: int = 1, cache_dir=None, use_cache: bool = True) -> list[RunResult]:
    """Run ``[(cfg, seed), ...]``; results come back in input order."""
    args = [(c.to_dict(), s, None if cache_dir is None else str(cache_dir), use_cache) for c, s in cells]
    if jobs <= 1 or len(args) <= 1:
        return [_cell_job(a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(_cell_job, args))
