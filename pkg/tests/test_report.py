import json

import numpy as np
import pytest

from intakesim.agents.checkpoint import load_checkpoint
from intakesim.harness import IOFault, RunConfig, train_run
from intakesim.report import (PCL_GRID, PHQ_GRID, TABLE3_COLUMNS, _bonus_terms, ablation_suite, cell_name,
                              csv_text, export_cell, export_table, method_order, robustness_suite,
                              screen_augmented_delta, summarize, table3_rows)


def tiny(agent, **kw):
    base = dict(agent=agent, episodes=8, seeds=[0, 1], window=2, last_n=4, eval_episodes=2, log_episodes=2,
                td3={"hidden": 16, "batch": 16, "warmup": 30}, ppo={"hidden": 16}, cem={"population": 4})
    base.update(kw)
    return RunConfig(**base).validate()


@pytest.fixture(scope="module")
def runs():
    return {m: [train_run(tiny(m), s) for s in (0, 1)] for m in ("TD3", "PPO", "CEM")}


def test_summary_uses_median_over_seeds(runs):
    rs = runs["PPO"]
    s = summarize(rs, "PPO")
    assert s["seeds"] == [0, 1]
    last = sorted(r.stat("reward") for r in rs)
    assert s["reward"]["median"] == pytest.approx(np.mean(last))
    assert s["reward"]["min"] == last[0]
    row = table3_rows([s])[0]
    assert set(row) == set(TABLE3_COLUMNS)
    assert row["d_coverage"] == s["d_coverage"]["median"]


def test_table3_csv_header_and_empty_report(tmp_path):
    export_table([], tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text() == ",".join(TABLE3_COLUMNS) + "\n"


def test_csv_formatting():
    text = csv_text([{"a": 0.1, "b": True, "c": ["TD3", "PPO"], "d": 3}], ("a", "b", "c", "d", "e"))
    assert text == "a,b,c,d,e\n0.1,1,TD3>PPO,3,\n"


def test_bonus_terms_oracle():
    # both screens right, both positive
    assert _bonus_terms(12, 50, 11, 46, 10, 44) == (0.5, 1.0)
    # depression missed, PTSD false alarm
    assert _bonus_terms(3, 50, 11, 20, 10, 44) == (-0.5, 0.0)
    # nothing positive: sensitivity defaults to one
    assert _bonus_terms(1, 20, 2, 21, 10, 44) == (0.5, 1.0)
    # one of two positives caught
    assert _bonus_terms(12, 30, 14, 48, 10, 44) == (0.0, 0.5)


def test_screen_augmented_delta_matches_manual(runs):
    r = runs["TD3"][0]
    s = r.series
    bonus = np.array([sum(_bonus_terms(s["pred_phq"][i], s["pred_pcl"][i], s["true_phq"][i], s["true_pcl"][i],
                                       10, 44)) + s["ep_rapport"][i] for i in range(8)])
    x = s["reward"] + bonus / 25
    assert screen_augmented_delta(r, 10, 44) == pytest.approx(x[-2:].mean() - x[:2].mean(), abs=1e-12)


def test_method_order():
    assert method_order({"CEM": 0.01, "TD3": 0.05, "PPO": 0.02}) == ["TD3", "PPO", "CEM"]


def test_robustness_suite_structure(runs):
    rep = robustness_suite(runs)
    assert set(rep["dropout"]) == {"TD3", "PPO", "CEM"}
    assert set(rep["dropout"]["TD3"]) == {"0.0", "0.2", "0.4"}
    assert len(rep["cutpoints"]) == len(PHQ_GRID) * len(PCL_GRID)
    for row in rep["cutpoints"]:
        assert sorted(row["order"]) == ["CEM", "PPO", "TD3"]
        assert [row[m] for m in row["order"]] == sorted((row[m] for m in row["order"]), reverse=True)
    assert rep["holdout_order"] == method_order(rep["holdout"])


def test_ablation_suite_covers_variants(tmp_path):
    rep = ablation_suite(tiny("CEM", seeds=[0]), cache_dir=tmp_path, variants=("full", "-UA"))
    assert set(rep) == {"full", "-UA"}
    assert rep["full"]["summary"]["policy"] == "full"
    assert set(rep["-UA"]["decision_quality"]) >= {"wait_s", "overlap_s", "cut_pct", "bc_pct"}


def test_export_cell_files_and_reexport_identical(runs, tmp_path):
    r = runs["CEM"][0]
    a = export_cell(r, tmp_path / "a")
    b = export_cell(r, tmp_path / "b")
    names = sorted(p.name for p in a.iterdir())
    assert names == ["audit.jsonl", "cem_iterations.csv", "checkpoint.npz", "config.json", "curves.csv",
                     "episodes.jsonl", "evals.json", "series.csv"]
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes(), n
    series = (a / "series.csv").read_text().splitlines()
    assert len(series) == 9 and series[0].startswith("episode,")
    assert len((a / "episodes.jsonl").read_text().splitlines()) == 2
    cfg = json.loads((a / "config.json").read_text())
    assert cfg["config"]["agent"] == "CEM" and len(cfg["config_hash"]) == 64
    kind, state, _ = load_checkpoint(a / "checkpoint.npz")
    assert kind == "CEM"
    for k, v in r.agent_state.items():
        assert np.array_equal(state[k], v)


def test_export_to_unwritable_path_raises(runs, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(IOFault):
        export_cell(runs["PPO"][0], blocker / "sub")
    with pytest.raises(IOFault):
        export_table([], blocker / "t.csv")


def test_cell_names(runs):
    assert cell_name(runs["TD3"][1]) == "TD3_full_seed1"
    r = train_run(tiny("CEM", ua=False, tr=False), 0)
    assert cell_name(r) == "CEM_-UA-TR_seed0"
