"""``intakesim`` command line: cohort, train, eval, ablate, sweep, inspect.

Config files are JSON objects holding any :class:`RunConfig` field plus an
optional ``"out"`` directory.  Flags given on the command line override the
file.  Exit codes: 0 success, 2 usage, 3 config validation, 4 I/O,
5 numeric fault.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import harness as H
from . import report as R
from .agents.checkpoint import config_hash, load_checkpoint
from .cohort import generate_cohort, label_summary, save_cohort
from .kernel import NumericFault
from .questionnaire import ValidationError

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4, 5
OUT_ENV = "INTAKESIM_OUT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def default_out() -> Path:
    return Path(os.environ.get(OUT_ENV, "intakesim-out"))


# --------------------------------------------------------------------------
# config resolution
# --------------------------------------------------------------------------

def load_config(path, args=None) -> tuple[H.RunConfig, Path]:
    """Read a JSON config, apply flag overrides, validate, return (config, out dir)."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except OSError as exc:
        raise H.IOFault(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ValidationError(f"{path} must hold a JSON object")
    out = raw.pop("out", None)
    if args is not None:
        for key in ("agent", "episodes"):
            v = getattr(args, key, None)
            if v is not None:
                raw[key] = v
        if getattr(args, "seeds", None):
            raw["seeds"] = args.seeds
        if getattr(args, "out", None):
            out = args.out
    cfg = H.RunConfig.from_dict(raw)
    return cfg, Path(out) if out else default_out()


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers: {text!r}") from exc


def _emit(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_cohort(args) -> int:
    if args.n < 1:
        raise UsageError("cohort size must be >= 1")
    cohort = generate_cohort(args.n, args.seed)
    out = Path(args.out) if args.out else default_out() / f"cohort_n{args.n}_seed{args.seed}.jsonl"
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        save_cohort(cohort, out, seed=args.seed)
    except OSError as exc:
        raise H.IOFault(f"cannot write {out}: {exc}") from exc
    _emit({"cohort": str(out), **label_summary(cohort)})
    return EXIT_OK


def _train_cells(cfg: H.RunConfig, jobs: int, use_cache: bool):
    return H.run_cells([(cfg, s) for s in cfg.seeds], jobs=jobs, use_cache=use_cache)


def cmd_train(args) -> int:
    cfg, out = load_config(args.config, args)
    results = _train_cells(cfg, args.jobs, not args.no_cache)
    run_dir = out / f"train_{cfg.agent}"
    for r in results:
        R.export_cell(r, run_dir / R.cell_name(r))
    summary = R.summarize(results, cfg.agent)
    R.export_table(R.table3_rows([summary]), run_dir / "table3.csv")
    R.write_text(run_dir / "summary.json", json.dumps(summary, sort_keys=True, indent=1))
    R.write_text(run_dir / "run_config.json",
                 json.dumps({"config": cfg.to_dict(), "config_hash": config_hash(cfg.to_dict())},
                            sort_keys=True, indent=1))
    print(f"run directory: {run_dir}")
    print(R.csv_text(R.table3_rows([summary]), R.TABLE3_COLUMNS), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    """Evaluate an exported cell (its checkpoint) on held-out patients and under modality dropout."""
    cell = Path(args.run)
    ckpt = cell / "checkpoint.npz"
    conf = cell / "config.json"
    if not ckpt.exists() or not conf.exists():
        raise H.IOFault(f"{cell} has no checkpoint.npz/config.json")
    try:
        _, state, _ = load_checkpoint(ckpt)
    except ValueError as exc:
        raise H.IOFault(str(exc)) from exc
    snap = json.loads(conf.read_text(encoding="utf-8"))["config"]
    seed = int(snap.pop("seed"))
    cfg = H.RunConfig.from_dict({**snap, "seeds": [seed]})
    if args.episodes:
        cfg = replace(cfg, eval_episodes=args.episodes)
    cohort = H.make_cohort(cfg)
    report = {"held_out": H.evaluate_policy(cfg, seed, state, cohort.held, cfg.eval_episodes,
                                            behavior=False, tag="cli-holdout")}
    for p in H.DROPOUT_GRID:
        report[f"dropout_{p:.1f}"] = H.evaluate_policy(cfg, seed, state, cohort.train, cfg.eval_episodes,
                                                       behavior=False, tag="cli-dropout", dropout_p=p)
    keys = ("reward", "coverage", "rapport", "overlap_s", "cut_pct")
    small = {k: {m: v[m] for m in keys} for k, v in report.items()}
    R.write_text(cell / "cli_eval.json", json.dumps(report, sort_keys=True, indent=1))
    _emit(small)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg, out = load_config(args.config, args)
    report = R.ablation_suite(cfg, jobs=args.jobs)
    rows = []
    for v, rep in report.items():
        s = rep["summary"]
        rows.append({"variant": v, **{k: s[k]["mean"] for k in ("reward", "coverage", "rapport", "pace")},
                     "rapport_seed_std": s["rapport"]["std"], **rep["decision_quality"]})
    cols = ("variant", "reward", "coverage", "rapport", "pace", "rapport_seed_std") + H.DQ_SERIES
    R.export_table(rows, out / f"ablation_{cfg.agent}.csv", cols)
    R.write_text(out / f"ablation_{cfg.agent}.json", json.dumps(report, sort_keys=True, indent=1))
    print(R.csv_text(rows, cols), end="")
    return EXIT_OK


def _method_results(cfg: H.RunConfig, jobs: int):
    cells = [(replace(cfg, agent=m), s) for m in H.AGENT_KINDS for s in cfg.seeds]
    res = H.run_cells(cells, jobs=jobs)
    k = len(cfg.seeds)
    return {m: res[i * k:(i + 1) * k] for i, m in enumerate(H.AGENT_KINDS)}


def cmd_sweep(args) -> int:
    if args.phq != "all" and not args.phq.isdigit():
        raise UsageError("--phq must be an integer or 'all'")
    cfg, out = load_config(args.config, args)
    by_method = _method_results(cfg, args.jobs)
    rep = R.robustness_suite(by_method)
    if args.kind == "cutpoints":
        phq = R.PHQ_GRID if args.phq == "all" else (int(args.phq),)
        rows = [r for r in rep["cutpoints"] if r["phq_cutpoint"] in phq]
        cols = ("phq_cutpoint", "pcl_cutpoint") + H.AGENT_KINDS + ("order",)
    else:
        rows = [{"method": m, "dropout_p": p, **vals}
                for m, levels in rep["dropout"].items() for p, vals in levels.items()]
        cols = ("method", "dropout_p", "reward", "coverage", "rapport", "overlap_s", "cut_pct")
    R.export_table(rows, out / f"sweep_{args.kind}.csv", cols)
    R.write_text(out / "robustness.json", json.dumps(rep, sort_keys=True, indent=1))
    print(R.csv_text(rows, cols), end="")
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = Path(args.log)
    if path.is_dir():
        path = path / "episodes.jsonl"
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise H.IOFault(f"cannot read {path}: {exc}") from exc
    episodes = [json.loads(x) for x in lines if x.strip()]
    if args.episode is not None:
        episodes = [e for e in episodes if e["episode"] == args.episode]
    overlap_events = overrides = 0
    for e in episodes:
        print(f"episode {e['episode']}  patient {e['patient']}")
        for t in e["turns"]:
            a = " ".join(f"{v:.2f}" for v in t["a"])
            flag = " SKIP" if t["skipped"] else ""
            conf = "-" if t["confidence"] is None else f"{t['confidence']:.2f}"
            print(f"  t{t['turn']:02d} {t['item']:<10s} a=[{a}] r={t['r']:.3f} "
                  f"likert={t['likert']} conf={conf} lat={t['latency'] / 10:.2f}s "
                  f"ovl={t['overlap'] / 10:.2f}s{flag}")
            if t["overlap"] > 0:
                overlap_events += 1
            for ev in t["audit"]:
                if ev["kind"] == "override":
                    overrides += 1
                if ev["kind"] != "backchannel-injected" or args.verbose:
                    print(f"      audit {ev['kind']}: proposed={ev['proposed']} applied={ev['applied']} "
                          f"{json.dumps(ev['detail'], sort_keys=True)}")
    print(f"{len(episodes)} episode(s); {overrides} override(s); {overlap_events} overlap event(s)")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="intakesim", description="Simulated intake interviews and interview-timing controllers.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    c = sub.add_parser("cohort", help="generate and save a synthetic cohort")
    c.add_argument("--n", type=int, default=276)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", help=f"output file (default under ${OUT_ENV})")
    c.set_defaults(func=cmd_cohort)

    def runlike(name, fn, help_):
        q = sub.add_parser(name, help=help_)
        q.add_argument("config", help="JSON config file")
        q.add_argument("--agent", choices=H.AGENT_KINDS)
        q.add_argument("--episodes", type=int)
        q.add_argument("--seeds", type=_seeds)
        q.add_argument("--out")
        q.add_argument("--jobs", type=int, default=1)
        q.set_defaults(func=fn)
        return q

    t = runlike("train", cmd_train, "train one method over every seed")
    t.add_argument("--no-cache", action="store_true", help="ignore and do not fill the result cache")
    runlike("ablate", cmd_ablate, "full stack plus the five single-component removals")
    s = runlike("sweep", cmd_sweep, "method ranking across cutpoints or modality dropout")
    s.add_argument("kind", choices=("cutpoints", "dropout"), nargs="?", default="cutpoints")
    s.add_argument("--phq", default="10", help="PHQ-8 cutpoint for the cutpoint table, or 'all'")

    e = sub.add_parser("eval", help="evaluate an exported cell's checkpoint")
    e.add_argument("run", help="cell directory written by train")
    e.add_argument("--episodes", type=int)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="pretty-print an episode log with its audit events")
    i.add_argument("log", help="episodes.jsonl or a cell directory")
    i.add_argument("--episode", type=int)
    i.add_argument("--verbose", action="store_true", help="also list injected backchannels")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValidationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (H.IOFault, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericFault, FloatingPointError) as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
