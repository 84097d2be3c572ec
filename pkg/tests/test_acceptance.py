"""Acceptance suite: one test per criterion, each printing its measured values.

Criteria 4 to 7 need the full grid (3000 episodes, seeds 0-4) for TD3, PPO,
CEM and three TD3 ablations.  Cells come from the result cache when present
(``INTAKESIM_CACHE``); a cold cache means several CPU-hours of training.
``INTAKESIM_JOBS`` sets the number of worker processes for that case.
"""

import itertools
import os
import time

import numpy as np
import pytest

from intakesim.agents.cem import select_elites
from intakesim.agents.ppo import gae
from intakesim.agents.td3 import (SPAN, TD3Agent, TD3Config, actor_arch, actor_forward, critic_arch,
                                  critic_input, normalize, td3_target, td3_update)
from intakesim.env import ACTION_HIGH, ACTION_LOW, STATE_DIM
from intakesim.harness import AGENT_KINDS, RunConfig, run_cells, train_run
from intakesim.kernel import MLP, grad_check, make_rng, polyak_update
from intakesim.questionnaire import score_pclc, score_phq8
from intakesim.report import export_cell, export_table, robustness_suite, summarize, table3_rows

SEEDS = [0, 1, 2, 3, 4]
JOBS = int(os.environ.get("INTAKESIM_JOBS", "1"))


# -- 1. numeric kernel -----------------------------------------------------------

def _random_arch(rng, n_in, n_out, head):
    arch, width = [], n_in
    for _ in range(int(rng.integers(1, 4))):
        h = int(rng.integers(3, 12))
        arch.append(("dense", width, h))
        if rng.random() < 0.5:
            arch.append(("layernorm", h))
        arch.append(("silu",))
        width = h
    arch.append(("dense", width, n_out))
    if head:
        arch.append(("sigmoid",))
    return arch


def test_criterion_1_gradient_checks(criterion_note):
    rng = make_rng(0, "acceptance", "grad")
    start = time.perf_counter()
    archs = [actor_arch(12) + [("sigmoid",)], critic_arch(12, True), critic_arch(12, False)]
    for _ in range(20):
        archs.append(_random_arch(rng, STATE_DIM, 5, head=True))
        archs.append(_random_arch(rng, STATE_DIM + 6, 1, head=False))
    worst = 0.0
    for arch in archs:
        net = MLP(arch, rng)
        x = rng.normal(size=(6, arch[0][1]))
        target = rng.normal(size=(6, net(x).shape[1]))

        def loss(out, target=target):
            diff = out - target
            return float(np.sum(diff ** 2)), 2.0 * diff

        worst = max(worst, grad_check(net, loss, x))
    elapsed = time.perf_counter() - start
    criterion_note(1, f"{len(archs)} architectures, max rel err {worst:.2e}, {elapsed:.1f}s")
    assert worst < 1e-4 and elapsed < 60


# -- 2. scoring oracles ----------------------------------------------------------

def test_criterion_2_scoring_oracles(criterion_note):
    start = time.perf_counter()
    bands = ("minimal", "mild", "moderate", "moderately-severe", "severe")
    bad_phq = 0
    for resp in itertools.product(range(4), repeat=8):
        total = sum(resp)
        expect = (total, bands[sum(total >= c for c in (5, 10, 15, 20))], total >= 10)
        bad_phq += tuple(score_phq8(resp)) != expect
    rng = make_rng(1, "acceptance", "pcl")
    bad_pcl = 0
    for resp in rng.integers(1, 6, size=(10_000, 17)):
        b = sum(v >= 3 for v in resp[0:5]) >= 1
        c = sum(v >= 3 for v in resp[5:12]) >= 3
        d = sum(v >= 3 for v in resp[12:17]) >= 2
        bad_pcl += score_pclc(resp.tolist()).cluster_positive != (b and c and d)
    elapsed = time.perf_counter() - start
    criterion_note(2, f"PHQ-8 mismatches {bad_phq}/65536, PCL-C mismatches {bad_pcl}/10000, {elapsed:.1f}s")
    assert bad_phq == 0 and bad_pcl == 0 and elapsed < 30


# -- 3. algorithm oracles --------------------------------------------------------

def _brute_gae(r, v, d, gamma, lam):
    out = []
    for t in range(len(r)):
        total, coef = 0.0, 1.0
        for k in range(t, len(r)):
            total += coef * (r[k] + gamma * (1 - d[k]) * v[k + 1] - v[k])
            if d[k]:
                break
            coef *= gamma * lam
        out.append(total)
    return np.array(out)


def _batch(rng, n=8):
    return {"s": rng.normal(size=(n, STATE_DIM)), "a": rng.uniform(ACTION_LOW, ACTION_HIGH, size=(n, 5)),
            "r": rng.normal(size=n), "s2": rng.normal(size=(n, STATE_DIM)), "done": np.zeros(n),
            "t": rng.integers(0, 25, size=n).astype(float), "has_cf": np.zeros(n, bool),
            "s_cf": np.zeros((n, STATE_DIM))}


def test_criterion_3_algorithm_oracles(criterion_note):
    start = time.perf_counter()
    rng = make_rng(2, "acceptance", "algo")
    gae_err = 0.0
    for _ in range(1000):
        r, v = rng.normal(size=10), rng.normal(size=11)
        d = (rng.random(10) < 0.15).astype(float)
        gamma, lam = rng.uniform(0.8, 1.0), rng.uniform(0.0, 1.0)
        gae_err = max(gae_err, float(np.max(np.abs(gae(r, v, d, gamma, lam)[0] - _brute_gae(r, v, d, gamma, lam)))))

    elite_bad = 0
    for _ in range(1000):
        n = int(rng.integers(2, 100))
        k = int(rng.integers(1, n + 1))
        returns = np.round(rng.normal(size=n), 1)
        elite_bad += list(select_elites(returns, k)) != sorted(range(n), key=lambda i: (-returns[i], i))[:k]

    # scripted critics: constant outputs 1.0 and 0.8, so the target is r + gamma * 0.8
    agent = TD3Agent(TD3Config(hidden=16, batch=8, warmup=8), seed=0)
    scripted = []
    for value in (1.0, 0.8):
        p = agent.critic1.copy_params()
        last = max(int(k.split(".")[0]) for k in p)
        p[f"{last}.W"][:] = 0.0
        p[f"{last}.b"][:] = value
        scripted.append(p)
    b = _batch(rng)
    y = td3_target(b, agent.actor, agent.critic1, agent.actor_t, scripted[0], scripted[1], agent.cfg, rng)
    target_err = float(np.max(np.abs(y - (b["r"] + 0.985 * 0.8))))
    # with live critics the target never exceeds either critic's own bootstrap
    seed_rng, replay = make_rng(3), make_rng(3)
    y = td3_target(b, agent.actor, agent.critic1, agent.actor_t, agent.critic1_t, agent.critic2_t, agent.cfg,
                   seed_rng)
    a2 = actor_forward(agent.actor, b["s2"], agent.actor_t)
    eps = np.clip(replay.normal(0.0, 0.04, size=a2.shape), -0.08, 0.08) * SPAN
    sa = critic_input(b["s2"], normalize(np.clip(a2 + eps, ACTION_LOW, ACTION_HIGH)), b["t"] + 1, True)
    pessimistic = all(np.all(y <= b["r"] + 0.985 * agent.critic1(sa, p)[:, 0] + 1e-12)
                      for p in (agent.critic1_t, agent.critic2_t))

    cadence_ok = True
    for n in range(1, 9):
        td3_update(agent, _batch(rng))
        cadence_ok &= agent.critic_updates == n and agent.actor_updates == n // 2
    online = {"w": rng.normal(size=(3, 3))}
    tgt = {"w": rng.normal(size=(3, 3))}
    old = tgt["w"].copy()
    polyak_update(tgt, online, 0.005)
    polyak_ok = np.allclose(tgt["w"], 0.005 * online["w"] + 0.995 * old, atol=1e-15)
    polyak_update(tgt, online, 1.0)
    polyak_ok &= np.array_equal(tgt["w"], online["w"])

    elapsed = time.perf_counter() - start
    criterion_note(3, f"GAE max err {gae_err:.1e}, elite mismatches {elite_bad}/1000, target err {target_err:.1e}, "
                      f"pessimistic {pessimistic}, cadence {cadence_ok}, polyak {polyak_ok}, {elapsed:.1f}s")
    assert gae_err < 1e-10 and elite_bad == 0 and target_err < 1e-12
    assert pessimistic and cadence_ok and polyak_ok and elapsed < 60


# -- full grid ---------------------------------------------------------------------

VARIANTS = {"TD3": RunConfig(agent="TD3"), "PPO": RunConfig(agent="PPO"), "CEM": RunConfig(agent="CEM"),
            "-UA": RunConfig(agent="TD3", ua=False), "-TR": RunConfig(agent="TD3", tr=False),
            "-CF": RunConfig(agent="TD3", cf=False)}


class _Grid:
    """Loads (or trains) a variant's five seeds on first access."""

    def __init__(self):
        self._loaded = {}

    def __getitem__(self, name):
        if name not in self._loaded:
            self._loaded[name] = run_cells([(VARIANTS[name], s) for s in SEEDS], jobs=JOBS)
        return self._loaded[name]


@pytest.fixture(scope="module")
def grid():
    return _Grid()


def _lastn(results, key):
    return [r.stat(key, "lastn") for r in results]


def test_criterion_4_safety_endpoints(grid, criterion_note):
    full = grid["TD3"]
    overlap, cut, cov = _lastn(full, "overlap_s"), _lastn(full, "cut_pct"), _lastn(full, "coverage")
    # per-seed cost: a short timed run scaled to 3000 episodes plus evaluation
    cfg = RunConfig(agent="TD3", episodes=100, eval_episodes=1, window=5, last_n=10)
    t0 = time.perf_counter()
    train_run(cfg, 0)
    minutes = (time.perf_counter() - t0) * (3000 + 5 * 120) / 100 / 60
    criterion_note(4, f"overlap {np.mean(overlap):.2f}s (max {max(overlap):.3f}), cut {np.mean(cut):.2f}% "
                      f"(min {min(cut):.2f}), coverage {np.mean(cov):.3f} (min {min(cov):.3f}), "
                      f"~{minutes:.1f} min/seed")
    assert max(overlap) < 0.005
    assert min(cut) >= 99.95
    assert np.mean(cov) >= 0.95
    assert minutes <= 30


def _median_delta(results, key):
    return float(np.median([r.stat(key, "delta") for r in results]))


def test_criterion_5_learning_delta_ordering(grid, criterion_note):
    d = {m: {k: _median_delta(grid[m], k) for k in ("reward", "coverage", "rapport")} for m in AGENT_KINDS}
    criterion_note(5, "median dReward " + ", ".join(f"{m} {d[m]['reward']:+.4f}" for m in AGENT_KINDS)
                   + "; dCoverage " + ", ".join(f"{m} {d[m]['coverage']:+.4f}" for m in AGENT_KINDS)
                   + "; dRapport " + ", ".join(f"{m} {d[m]['rapport']:+.4f}" for m in AGENT_KINDS))
    assert d["TD3"]["reward"] > d["PPO"]["reward"] > d["CEM"]["reward"]
    assert all(d[m]["reward"] >= 0 for m in AGENT_KINDS)
    for k in ("coverage", "rapport"):
        assert d["TD3"][k] == max(d[m][k] for m in AGENT_KINDS)


def test_criterion_6_ablation_directions(grid, criterion_note):
    s = {v: summarize(grid[v], v) for v in ("TD3", "-UA", "-TR", "-CF")}
    full = s["TD3"]
    ua_overlap = s["-UA"]["overlap_s"]["mean"] - full["overlap_s"]["mean"]
    ua_cut = s["-UA"]["cut_pct"]["mean"] - full["cut_pct"]["mean"]
    tr_rap = s["-TR"]["rapport"]["mean"] - full["rapport"]["mean"]
    tr_cov = s["-TR"]["coverage"]["mean"] - full["coverage"]["mean"]
    cf_std = (full["rapport"]["std"], s["-CF"]["rapport"]["std"])
    criterion_note(6, f"-UA overlap {ua_overlap:+.3f}s cut {ua_cut:+.2f}pp; -TR rapport {tr_rap:+.4f} "
                      f"coverage {tr_cov:+.4f}; rapport seed std full {cf_std[0]:.4f} vs -CF {cf_std[1]:.4f}")
    assert ua_overlap > 0 and ua_cut < 0
    assert tr_rap < 0 and abs(tr_cov) < 0.02
    assert cf_std[1] > cf_std[0]


def test_criterion_7_robustness(grid, criterion_note):
    rep = robustness_suite({m: grid[m] for m in AGENT_KINDS})
    at02 = rep["dropout"]["TD3"]["0.2"]
    orders = {tuple(row["order"]) for row in rep["cutpoints"]}
    criterion_note(7, f"p=0.2 overlap {at02['overlap_s']:.3f}s cut {at02['cut_pct']:.2f}%; held-out order "
                      f"{'>'.join(rep['holdout_order'])}; cutpoint orders {sorted('>'.join(o) for o in orders)}")
    assert at02["overlap_s"] < 0.005 and at02["cut_pct"] >= 99.0
    assert rep["holdout_order"] == list(AGENT_KINDS)
    assert orders == {tuple(AGENT_KINDS)}


# -- 8. reproducibility ----------------------------------------------------------

def test_criterion_8_byte_identical_exports(tmp_path, criterion_note):
    cfg = RunConfig(agent="TD3", episodes=40, seeds=[3], window=5, last_n=10, eval_episodes=4,
                    td3={"hidden": 32, "batch": 32, "warmup": 100})
    files = ("series.csv", "curves.csv", "episodes.jsonl", "audit.jsonl", "evals.json", "config.json",
             "checkpoint.npz", "table3.csv")
    for tag in ("a", "b"):
        res = run_cells([(cfg, 3)], use_cache=False)
        export_cell(res[0], tmp_path / tag)
        export_table(table3_rows([summarize(res, "TD3")]), tmp_path / tag / "table3.csv")
    same = [n for n in files if (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()]
    criterion_note(8, f"{len(same)}/{len(files)} exported files byte-identical")
    assert len(same) == len(files)
