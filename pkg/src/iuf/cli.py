"""Command line entry points: ``iuf train``, ``iuf eval`` and ``iuf report``.

Exit codes: 0 on success, 2 for configuration or input problems, 3 when
training aborts on a non-finite loss.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import COMPONENTS, RunConfig, ablate, ablation_label, parse_config_text
from .data import parse_protocol
from .evaluation import ScoreMatrix, evaluate_step, summarize
from .exceptions import ConfigurationError, IngestionError, NumericError
from .persistence import load_estimator
from .trainer import inventory, load_objects, read_metrics_csv, run_incremental, write_metrics_csv

logger = logging.getLogger("iuf")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    """Bad invocation that is not tied to a single config key."""


def _parse_overrides(pairs):
    text = "\n".join(pairs or [])
    return parse_config_text(text)


def build_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = _parse_overrides(args.set)
    if args.protocol is not None:
        overrides["protocol"] = args.protocol
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    cfg = cfg.with_overrides(overrides)
    for name in filter(None, (s.strip() for s in (args.ablate or "").split(","))):
        cfg = ablate(cfg, name)
    return cfg


def resolve_out_dir(cfg: RunConfig) -> Path:
    if cfg["out"]:
        return Path(cfg["out"])
    root = Path(os.environ.get("IUF_OUT", "runs"))
    label = ablation_label(cfg).replace("w/o ", "no-").replace(" + ", "_").lower()
    return root / f"{cfg['protocol']}_{label}_seed{cfg['seed']}_{cfg.config_hash()[:8]}"


def cmd_train(args) -> int:
    cfg = build_config(args)
    out_dir = resolve_out_dir(cfg)
    result = run_incremental(cfg, out_dir)
    for rec in result.records:
        print(f"step {rec.step}: objects {rec.objects} update={rec.update_mode} "
              f"loss={rec.losses['loss']:.4f} ({rec.wall_time:.1f}s)")
    _print_table([(ablation_label(cfg), result.summary)])
    print(f"run directory: {out_dir}")
    return EXIT_OK


def _run_config(run_dir: Path) -> RunConfig:
    snap = run_dir / "config.snapshot"
    if not snap.is_file():
        raise UsageError(f"{run_dir} is not a run directory (no config.snapshot)")
    return RunConfig.from_file(snap)


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    cfg = _run_config(run_dir)
    ck = run_dir / f"step_{args.step}" / "checkpoint"
    if not (ck / "manifest.json").is_file():
        raise UsageError(f"no checkpoint for step {args.step} under {run_dir}")
    objects = load_objects(cfg)
    plan = parse_protocol(cfg["protocol"], len(objects))
    if not 1 <= args.step <= len(plan.steps):
        raise UsageError(f"step {args.step} outside 1..{len(plan.steps)}")
    estimator = load_estimator(ck, run_dir / f"step_{args.step}" / "basis")
    seen = plan.seen_after(args.step - 1)
    heat_dir = run_dir / "heatmaps" if cfg["eval.heatmaps"] else None
    cells = evaluate_step(estimator, seen, {o: d.test for o, d in objects.items()}, heat_dir,
                          {o: d.name for o, d in objects.items()})

    metrics = run_dir / "metrics.csv"
    scores = read_metrics_csv(metrics) if metrics.is_file() else ScoreMatrix()
    if args.step <= scores.n_steps:
        scores.set_row(args.step - 1, cells)
    elif args.step == scores.n_steps + 1:
        scores.add_row(seen, cells)
    else:
        raise UsageError(f"metrics.csv has {scores.n_steps} steps; evaluate earlier steps first")
    write_metrics_csv(metrics, scores)
    _refresh_manifest(run_dir)
    for obj in seen:
        cell = cells[obj]
        shown = "n/a" if cell is None else f"pixel {cell[0]:.4f}  image {cell[1]:.4f}"
        print(f"step {args.step} object {obj}: {shown}")
    return EXIT_OK


def _refresh_manifest(run_dir: Path):
    path = run_dir / "manifest.json"
    if path.is_file():
        manifest = json.loads(path.read_text())
        manifest["files"] = inventory(run_dir)
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _fmt(v):
    return "-" if v is None else f"{100 * v:.1f}"


def _print_table(rows):
    head = f"{'run':<32} {'pixel ACC':>10} {'pixel FM':>9} {'image ACC':>10} {'image FM':>9}"
    print(head)
    print("-" * len(head))
    for label, s in rows:
        print(f"{label:<32} {_fmt(s['pixel_acc']):>10} {_fmt(s['pixel_fm']):>9} "
              f"{_fmt(s['image_acc']):>10} {_fmt(s['image_fm']):>9}")


def cmd_report(args) -> int:
    if not args.runs:
        raise UsageError("no run directories given")
    entries = []
    for r in args.runs:
        run_dir = Path(r)
        cfg = _run_config(run_dir)
        metrics = run_dir / "metrics.csv"
        if not metrics.is_file():
            raise UsageError(f"{run_dir} has no metrics.csv")
        entries.append((run_dir, cfg, summarize(read_metrics_csv(metrics))))
    protocols = {cfg["protocol"] for _, cfg, _ in entries}
    if len(protocols) > 1:
        raise UsageError(f"runs use different protocols: {sorted(protocols)}")
    protocol = protocols.pop()
    print(f"protocol {protocol}  (values x100; ACC higher is better, FM lower is better)")
    _print_table([(f"{ablation_label(cfg)} [seed {cfg['seed']}]", s) for _, cfg, s in entries])
    summary = {
        "protocol": protocol,
        "runs": [
            {"run": str(d), "label": ablation_label(cfg), "seed": cfg["seed"],
             "components": cfg.components(), "config_hash": cfg.config_hash(), **s}
            for d, cfg, s in entries
        ],
    }
    Path(args.json).parent.mkdir(parents=True, exist_ok=True)
    Path(args.json).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"summary written to {args.json}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="iuf", description="Object-incremental defect inspection runs.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-step progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run an incremental protocol")
    p.add_argument("--config", help="key=value config file (defaults apply when omitted)")
    p.add_argument("--protocol", help='e.g. "3-1", "10-5", "3x5", "10-1x5"')
    p.add_argument("--seed", type=int)
    p.add_argument("--ablate", help=f"comma list of components to switch off: {','.join(COMPONENTS)}")
    p.add_argument("--out", help="run directory (default: $IUF_OUT/<derived name>)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="re-evaluate one step of a finished run")
    p.add_argument("--run", required=True)
    p.add_argument("--step", type=int, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="ACC/FM table across runs")
    p.add_argument("runs", nargs="*")
    p.add_argument("--json", default="iuf_summary.json", help="where to write the summary")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        key = f" [key: {exc.key}]" if getattr(exc, "key", None) else ""
        print(f"configuration error{key}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (UsageError, IngestionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
