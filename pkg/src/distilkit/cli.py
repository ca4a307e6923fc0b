"""Command-line entry point: ``distilkit {distill,plan,params,analyze,combine}``.

Failures print one line ``<category>: <message>`` to stderr and exit with
status 2.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import planner
from .config import RunConfig, load_config
from .data import corpus_from_text, generate_corpus
from .errors import DistilError
from .hooks import DistanceSpec
from .methods import CATALOG, EXTRA, combine, get_descriptor, without_features
from .model import PRESETS, REPORTED_PARAMS, count_params, get_spec
from .orchestrator import PipelineRun, accuracy, run_pipeline, validation_metric
from .telemetry import TelemetrySink, correlation_report, dump_record, normalize_series, read_records


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- distill -----------------------------------------------------------------------------------------
def _corpus(cfg: RunConfig):
    d = cfg.data
    vocab = cfg.student.vocab
    if d.text_file is not None:
        try:
            lines = Path(d.text_file).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise DistilError(f"cannot read text corpus: {exc}") from None
        return corpus_from_text(lines, vocab, d.seq_len, d.num_labels, d.seed)
    return generate_corpus(d.seed, d.size, vocab, d.seq_len, d.num_labels)


def distill_one(cfg: RunConfig, seed: int, out: Path, corpus=None) -> dict:
    """Run the configured pipeline for one seed and return its summary row."""
    corpus = corpus if corpus is not None else _corpus(cfg)
    seed_dir = out / f"seed-{seed}"
    sink = TelemetrySink(seed_dir / "telemetry.jsonl")
    run = PipelineRun(cfg.descriptor, cfg.student, cfg.teachers, corpus,
                      [replace(s, seed=seed) for s in cfg.stages], cfg.assistants,
                      checkpoint_dir=seed_dir / "checkpoints", telemetry=sink, seed=seed,
                      init_source=cfg.init_source, teacher_iterations=cfg.teacher_iterations,
                      teacher_cache=out / "teachers")
    result = run_pipeline(run)
    last = result.stages[-1]
    ppl, _ = validation_metric(result.student, corpus, "task")
    return {"seed": seed, "accuracy": accuracy(result.student, corpus), "perplexity": ppl,
            "final_loss": float(last.losses[-1]) if last.losses else float("nan"),
            "iterations": sum(r.iterations for r in result.stages)}


def summarize(rows: list[dict]) -> dict:
    """Mean and population standard deviation of every numeric column over seeds."""
    out = {}
    for key in ("accuracy", "perplexity", "final_loss"):
        v = np.array([r[key] for r in rows], dtype=np.float64)
        out[key] = {"mean": float(v.mean()), "std": float(v.std())}
    return out


def cmd_distill(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seeds = [args.seed]
    out = Path(args.out) if args.out else cfg.output
    corpus = _corpus(cfg)
    rows = [distill_one(cfg, s, out, corpus) for s in cfg.seeds]
    summary = {"method": cfg.descriptor.name, "student": cfg.student.name,
               "teachers": [t.name for t in cfg.teachers], "seeds": rows, "summary": summarize(rows)}
    _write_json(out / "summary.json", summary)
    _write_json(out / "config.resolved.json", cfg.to_dict())
    for r in rows:
        print(f"seed {r['seed']}: accuracy={r['accuracy']:.4f} perplexity={r['perplexity']:.4f} "
              f"final_loss={r['final_loss']:.4f}")
    s = summary["summary"]
    print(f"mean over {len(rows)} seed(s): accuracy={s['accuracy']['mean']:.4f}±{s['accuracy']['std']:.4f} "
          f"perplexity={s['perplexity']['mean']:.4f}±{s['perplexity']['std']:.4f}")
    print(f"wrote {out}")
    return 0


# -- plan ----------------------------------------------------------------------------------------------
def cmd_plan(args) -> int:
    teachers = args.teacher or ["110M"]
    students = args.student or ["66M"]
    budget = args.budget_gib * planner.GIB
    if args.recommend:
        rec = planner.recommend(teachers, students, budget, args.devices)
        rows = [planner.report_row(e, g, f) for g, f, e in rec.trace]
        labels = [f.label() for _, f, _ in rec.trace]
        print(planner.format_table(rows, labels))
        if rec.exhausted:
            print("no feasible configuration")
        else:
            print(f"recommended: MP={rec.grid.MP} DP={rec.grid.DP} {rec.flags.label()}")
        doc = {"trace": rows, "recommended": None if rec.exhausted else rows[-1]}
    elif args.measured:
        rows, labels = [], []
        for r in planner.MEASURED_ROWS:
            est = planner.estimate_row(r)
            row = planner.report_row(est, r.grid(), r.flags())
            row.update(measured_MA=r.MA, measured_overflow=r.overflow)
            rows.append(row)
            labels.append(f"{r.teacher}=>{r.student}")
        print(planner.format_table(rows, labels))
        doc = {"rows": rows, "calibration": vars(planner.CALIBRATION)}
    else:
        strategy = "previous" if args.previous else "teacher_student_parallel"
        grid = planner.DeviceGrid(args.mp, args.dp, budget, args.devices)
        flags = planner.StrategyFlags(strategy, args.zero or args.offload, args.offload, args.grads)
        est = planner.estimate_memory(teachers, students, grid, flags)
        row = planner.report_row(est, grid, flags)
        print(planner.format_table([row], [f"{'+'.join(teachers)}=>{'+'.join(students)}"]))
        print(f"feasible={'true' if est.feasible else 'false'}")
        doc = {"rows": [row]}
    if args.json:
        _write_json(Path(args.json), doc)
    return 0


# -- params ------------------------------------------------------------------------------------------
def cmd_params(args) -> int:
    names = args.spec or list(REPORTED_PARAMS)
    width = max(len(n) for n in names)
    for n in names:
        s = get_spec(n)
        print(f"{n:<{width}}  d={s.dim:<6} L={s.layers:<3} heads={s.heads:<3} {count_params(s):>17,}")
    return 0


# -- analyze -------------------------------------------------------------------------------------------
def cmd_analyze(args) -> int:
    records = read_records(args.telemetry)
    if args.stage:
        records = [r for r in records if r.stage == args.stage]
    report = correlation_report(records, args.against)
    print(report.format_table())
    losses = normalize_series([r.loss for r in records])
    print("normalized loss: " + " ".join(f"{v:.4f}" for v in losses))
    if args.json:
        _write_json(Path(args.json), {"correlation": report.to_dict(),
                                      "iterations": [r.iteration for r in records],
                                      "normalized_loss": losses})
    if args.roundtrip:
        Path(args.roundtrip).write_text("".join(dump_record(r) + "\n" for r in records), encoding="utf-8")
    return 0


# -- combine -----------------------------------------------------------------------------------------
def _override(text: str) -> tuple[str, DistanceSpec]:
    feature, sep, kind = text.partition("=")
    if not sep:
        raise DistilError(f"override {text!r} must look like FEATURE=KIND")
    kind, _, temp = kind.partition("@")
    return feature, DistanceSpec(kind, temperature=float(temp) if temp else 1.0)


def cmd_combine(args) -> int:
    descs = []
    for item in args.methods:
        minus = item.split("-")
        d = get_descriptor(minus[0])
        if len(minus) > 1:
            d = without_features(d, minus[1:])
        descs.append(d)
    overrides = dict(_override(o) for o in args.override)
    merged = combine(descs, overrides=overrides)
    if args.name:
        merged = replace(merged, name=args.name)
    text = merged.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return 0


# -- entry ------------------------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="distilkit", description="Configurable knowledge distillation toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("distill", help="run a distillation config over its seeds")
    d.add_argument("--config", required=True)
    d.add_argument("--seed", type=int, help="run only this seed")
    d.add_argument("--out", help="output directory (GKD_OUT and the config's 'output' otherwise)")
    d.set_defaults(func=cmd_distill)

    pl = sub.add_parser("plan", help="memory and time estimate for a parallel layout")
    pl.add_argument("--teacher", action="append", help="teacher spec (repeatable)")
    pl.add_argument("--student", action="append", help="student spec (repeatable)")
    pl.add_argument("--mp", type=int, default=1)
    pl.add_argument("--dp", type=int, default=1)
    pl.add_argument("--zero", action="store_true")
    pl.add_argument("--offload", action="store_true")
    pl.add_argument("--grads", action="store_true", help="also partition/offload gradients")
    pl.add_argument("--previous", action="store_true", help="replicate models on every device")
    pl.add_argument("--budget-gib", type=float, default=40.0)
    pl.add_argument("--devices", type=int, default=planner.MAX_DEVICES)
    pl.add_argument("--recommend", action="store_true", help="search the escalation order")
    pl.add_argument("--measured", action="store_true", help="estimate every measured reference row")
    pl.add_argument("--json", help="also write machine-readable rows here")
    pl.set_defaults(func=cmd_plan)

    pa = sub.add_parser("params", help="parameter counts of named specs")
    pa.add_argument("--spec", action="append", help=f"spec name; known: {', '.join(PRESETS)}")
    pa.set_defaults(func=cmd_params)

    an = sub.add_parser("analyze", help="correlate recorded feature distances with loss")
    an.add_argument("telemetry")
    an.add_argument("--against", default="loss", choices=("loss", "task_metric"))
    an.add_argument("--stage", help="only records whose stage tag equals this")
    an.add_argument("--json")
    an.add_argument("--roundtrip", help="re-serialize the parsed records to this file")
    an.set_defaults(func=cmd_analyze)

    co = sub.add_parser("combine", help="merge catalog methods into one descriptor")
    co.add_argument("methods", nargs="+", help=f"method names, '-Feature' drops a feature "
                    f"(e.g. TinyBERT-Att); known: {', '.join([*CATALOG, *EXTRA])}")
    co.add_argument("--override", action="append", default=[], help="FEATURE=KIND[@T] distance override")
    co.add_argument("--name", default=None)
    co.add_argument("--out")
    co.set_defaults(func=cmd_combine)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DistilError as exc:
        msg = " ".join(str(exc).split())
        print(f"{exc.category}: {msg}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io-error: {' '.join(str(exc).split())}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
