"""Reports over finished cells: summaries, ablation and robustness suites, export.

Nothing here changes what a training cell computes, so edits to this module
do not invalidate cached cell results.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .agents.checkpoint import config_hash, save_checkpoint
from .harness import (ABLATIONS, CORE_SERIES, DQ_SERIES, DROPOUT_GRID, TOGGLES, IOFault, RunConfig,
                      RunResult, ablate, run_cells)
from .questionnaire import N_ITEMS
from .stats import delta_first_last, rolling_mean, safe_stat, spread

TABLE3_COLUMNS = ("policy", "reward", "d_reward", "coverage", "d_coverage", "rapport", "d_rapport",
                  "balance", "d_balance", "pace", "d_pace")
DQ_COLUMNS = ("policy", "wait_s", "overlap_s", "clarify_pct", "cut_pct", "bc_pct")
PHQ_GRID = (5, 10, 15, 20)
PCL_GRID = tuple(range(44, 51))

# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

def summarize(results: list[RunResult], name: str) -> dict:
    """LastN means, deltas and across-seed spreads for one policy/variant."""
    out = {"policy": name, "seeds": [r.seed for r in results]}
    for k in CORE_SERIES + DQ_SERIES + ("wasted_wait_score", "latency_score", "overlap_score",
                                         "clarify_score", "cut_consistency", "bc_precision"):
        last = [r.stat(k, "lastn") for r in results]
        delta = [r.stat(k, "delta") for r in results]
        out[k] = spread(last)
        out["d_" + k] = spread(delta)
    return out


def decision_quality(results: list[RunResult]) -> dict:
    """LastN means of the raw decision-quality quantities, averaged over seeds."""
    return {k: float(np.mean([r.stat(k) for r in results])) for k in DQ_SERIES}


def table3_rows(summaries: list[dict], stat: str = "median") -> list[dict]:
    rows = []
    for s in summaries:
        row = {"policy": s["policy"]}
        for k in CORE_SERIES:
            row[k] = s[k][stat]
            row["d_" + k] = s["d_" + k][stat]
        rows.append(row)
    return rows


def ablation_suite(base: RunConfig, jobs: int = 1, cache_dir=None, variants=ABLATIONS) -> dict:
    cells = [(ablate(base, v), s) for v in variants for s in base.seeds]
    results = run_cells(cells, jobs, cache_dir)
    k = len(base.seeds)
    report = {}
    for i, v in enumerate(variants):
        rs = results[i * k:(i + 1) * k]
        report[v] = {"summary": summarize(rs, v), "decision_quality": decision_quality(rs)}
    return report


def screen_augmented_delta(res: RunResult, phq_cut: int, pcl_cut: int) -> float:
    """First/last window delta of reward plus the end-of-episode screen bonus spread over the turns."""
    s = res.series
    bonus = np.empty(len(s["reward"]))
    for i in range(len(bonus)):
        dacc, sens = _bonus_terms(s["pred_phq"][i], s["pred_pcl"][i], s["true_phq"][i], s["true_pcl"][i],
                                  phq_cut, pcl_cut)
        bonus[i] = dacc + sens + s["ep_rapport"][i]
    return safe_stat(delta_first_last, s["reward"] + bonus / N_ITEMS, res.config["window"])


def _bonus_terms(pred_phq, pred_pcl, true_phq, true_pcl, phq_cut, pcl_cut):
    pred = (pred_phq >= phq_cut, pred_pcl >= pcl_cut)
    true = (true_phq >= phq_cut, true_pcl >= pcl_cut)
    acc = np.mean([p == t for p, t in zip(pred, true)])
    hits = [p for p, t in zip(pred, true) if t]
    return float(acc - 0.5), (float(np.mean(hits)) if hits else 1.0)


def method_order(values: dict) -> list[str]:
    return sorted(values, key=lambda k: -values[k])


def robustness_suite(results_by_method: dict[str, list[RunResult]]) -> dict:
    """Dropout endpoints, held-out ordering and cutpoint-sweep ordering."""
    rep = {"dropout": {}, "holdout": {}, "cutpoints": []}
    for m, rs in results_by_method.items():
        rep["dropout"][m] = {f"{p:.1f}": {k: float(np.mean([r.evals[f"dropout_{p:.1f}"][k] for r in rs]))
                                          for k in ("reward", "overlap_s", "cut_pct", "coverage", "rapport")}
                             for p in DROPOUT_GRID}
        rep["holdout"][m] = float(np.median([r.evals["holdout_delta"]["reward"] for r in rs]))
    rep["holdout_order"] = method_order(rep["holdout"])
    for pc in PHQ_GRID:
        for cc in PCL_GRID:
            d = {m: float(np.median([screen_augmented_delta(r, pc, cc) for r in rs]))
                 for m, rs in results_by_method.items()}
            rep["cutpoints"].append({"phq_cutpoint": pc, "pcl_cutpoint": cc, **d, "order": method_order(d)})
    return rep


# --------------------------------------------------------------------------
# export
# --------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (list, tuple)):
        return ">".join(str(x) for x in v)
    return str(v)


def csv_text(rows: list[dict], columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    return buf.getvalue()


def write_text(path, text: str) -> None:
    try:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IOFault(f"cannot write {path}: {exc}") from exc


def export_table(rows: list[dict], path, columns=TABLE3_COLUMNS) -> None:
    write_text(path, csv_text(rows, columns))


def series_rows(res: RunResult) -> tuple[list[dict], list[str]]:
    names = list(res.series)
    n = len(res.series[names[0]]) if names else 0
    rows = [{"episode": i, **{k: res.series[k][i] for k in names}} for i in range(n)]
    return rows, ["episode"] + names


def export_cell(res: RunResult, out_dir) -> Path:
    """Config snapshot, per-episode series, curves, episode log, audit trail and checkpoint."""
    d = Path(out_dir)
    rows, cols = series_rows(res)
    write_text(d / "config.json", json.dumps({"config": res.config, "agent_config": res.agent_config,
                                              "config_hash": config_hash(res.config)}, sort_keys=True, indent=1))
    write_text(d / "series.csv", csv_text(rows, cols))
    curve_rows = []
    for k in CORE_SERIES:
        if k in res.series:
            sm = rolling_mean(res.series[k], res.config["window"])
            curve_rows += [{"metric": k, "episode": i, "value": v} for i, v in enumerate(sm)]
    write_text(d / "curves.csv", csv_text(curve_rows, ("metric", "episode", "value")))
    if res.cem_best is not None:
        write_text(d / "cem_iterations.csv",
                   csv_text([{"iteration": i, "best_return": v} for i, v in enumerate(res.cem_best)],
                            ("iteration", "best_return")))
    write_text(d / "episodes.jsonl", "".join(json.dumps(e, sort_keys=True) + "\n" for e in res.episode_log))
    write_text(d / "audit.jsonl", "".join(json.dumps(a, sort_keys=True) + "\n" for a in res.audit))
    write_text(d / "evals.json", json.dumps(res.evals, sort_keys=True, indent=1))
    try:
        save_checkpoint(d / "checkpoint.npz", res.config["agent"], res.agent_state, res.agent_config)
    except OSError as exc:
        raise IOFault(f"cannot write checkpoint in {d}: {exc}") from exc
    return d


def cell_name(res: RunResult) -> str:
    c = res.config
    off = [t.upper() for t in TOGGLES if not c[t]]
    tag = "full" if not off else "-" + "-".join(off)
    return f"{c['agent']}_{tag}_seed{res.seed}"
