"""Object-incremental training runs and their on-disk layout.

Run directory::

    config.snapshot
    step_<n>/checkpoint/   step_<n>/basis/
    metrics.csv            step,object_id,pixel_auroc,image_auroc
    losses.csv             per-epoch loss components
    report.json            score matrix, ACC/FM summary, step records
    heatmaps/<object>/<image>.png
    manifest.json          run manifest with the file inventory
"""
from __future__ import annotations

import csv
import datetime as _dt
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from ._seeding import derive_seeds
from .config import RunConfig, ablation_label
from .data import NORMAL, ObjectData, default_object_specs, generate_dataset, load_mvtec_layout, parse_protocol, stack_samples
from .estimator import IUFDetector
from .evaluation import ScoreMatrix, evaluate_step, summarize
from .exceptions import ConfigurationError
from .persistence import save_basis, save_estimator

logger = logging.getLogger(__name__)

METRICS_HEADER = ("step", "object_id", "pixel_auroc", "image_auroc")


@dataclass
class StepRecord:
    step: int
    objects: List[int]
    losses: Dict[str, float]
    update_mode: str
    checkpoint: Optional[str] = None
    basis: Optional[str] = None
    wall_time: float = 0.0


@dataclass
class RunResult:
    records: List[StepRecord]
    scores: ScoreMatrix
    summary: Dict[str, Optional[float]]
    estimator: IUFDetector = field(repr=False)
    out_dir: Optional[Path] = None


class TrainingPool:
    """Hands out normal training samples per step and logs which objects were read."""

    def __init__(self, objects: Dict[int, ObjectData]):
        self._objects = objects
        self.access_log: List[tuple] = []

    def normal_samples(self, object_ids: Sequence[int], step=None):
        samples = []
        for o in object_ids:
            self.access_log.append((step, o))
            samples.extend(s for s in self._objects[o].train if s.label == NORMAL)
        return samples


def load_objects(cfg: RunConfig) -> Dict[int, ObjectData]:
    if cfg["data.source"] == "mvtec":
        return load_mvtec_layout(cfg["data.mvtec_root"], cfg["data.image_size"])
    seed = derive_seeds(cfg["seed"])["data"]
    specs = default_object_specs(cfg["data.n_objects"], seed=seed)
    return {
        s.object_id: generate_dataset(s, cfg["data.n_train"], cfg["data.n_test_normal"],
                                      cfg["data.n_test_defective"], cfg["data.image_size"])
        for s in specs
    }


def _fmt(v):
    return "" if v is None else repr(float(v))


def metrics_rows(scores: ScoreMatrix):
    rows = []
    for b in range(scores.n_steps):
        for obj in scores.pixel[b]:
            rows.append((str(b + 1), str(obj), _fmt(scores.pixel[b][obj]), _fmt(scores.image[b][obj])))
    return rows


def write_metrics_csv(path, scores: ScoreMatrix):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    w.writerows(metrics_rows(scores))
    Path(path).write_text(buf.getvalue())


def read_metrics_csv(path) -> ScoreMatrix:
    scores = ScoreMatrix()
    rows: Dict[int, Dict[int, object]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for r in reader:
            cell = None if r["pixel_auroc"] == "" else (float(r["pixel_auroc"]), float(r["image_auroc"]))
            rows.setdefault(int(r["step"]), {})[int(r["object_id"])] = cell
    for b in sorted(rows):
        scores.add_row(tuple(rows[b]), rows[b])
    return scores


def write_report(path, cfg: RunConfig, scores: ScoreMatrix, records: Sequence[StepRecord]):
    report = {
        "protocol": cfg["protocol"],
        "seed": cfg["seed"],
        "config_hash": cfg.config_hash(),
        "components": cfg.components(),
        "label": ablation_label(cfg),
        "score_matrix": {
            level: [{str(o): v for o, v in row.items()} for row in scores.level(level)]
            for level in ("pixel", "image")
        },
        "summary": summarize(scores),
        "steps": [asdict(r) for r in records],
    }
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def inventory(out_dir):
    out_dir = Path(out_dir)
    return sorted(str(p.relative_to(out_dir)) for p in out_dir.rglob("*") if p.is_file())


def write_manifest(out_dir, cfg: RunConfig, started, finished, extra=None):
    out_dir = Path(out_dir)
    path = out_dir / "manifest.json"
    path.touch()
    manifest = {
        "artifact_version": __version__,
        "config_hash": cfg.config_hash(),
        "seed": cfg["seed"],
        "derived_seeds": derive_seeds(cfg["seed"]),
        "protocol": cfg["protocol"],
        "components": cfg.components(),
        "label": ablation_label(cfg),
        "started": started,
        "finished": finished,
        "files": inventory(out_dir),
    }
    manifest.update(extra or {})
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def run_incremental(cfg: RunConfig, out_dir=None, objects=None, pool=None) -> RunResult:
    """Train the configured protocol step by step, evaluating all seen objects after each step.

    ``objects`` overrides dataset loading (handy for tests); ``out_dir=None``
    keeps everything in memory.
    """
    started = _now()
    objects = objects if objects is not None else load_objects(cfg)
    plan = parse_protocol(cfg["protocol"], len(objects))
    if sorted(objects) != list(range(len(objects))):
        raise ConfigurationError("object ids must be 0..N-1", key="data")
    pool = pool or TrainingPool(objects)
    test_data = {o: d.test for o, d in objects.items()}
    names = {o: d.name for o, d in objects.items()}
    estimator = IUFDetector(**cfg.estimator_params())
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.snapshot").write_text(cfg.to_text())

    scores = ScoreMatrix()
    records: List[StepRecord] = []
    loss_rows = []
    for b, step_objects in enumerate(plan.steps):
        step = b + 1
        t0 = time.perf_counter()
        X, y, _, _ = stack_samples(pool.normal_samples(step_objects, step=step))
        estimator.partial_fit(X, y)
        step_history = [h for h in estimator.history_ if h["step"] == step]
        loss_rows.extend(step_history)
        heat_dir = out_dir / "heatmaps" if (out_dir is not None and cfg["eval.heatmaps"]) else None
        cells = evaluate_step(estimator, plan.seen_after(b), test_data, heat_dir, names)
        scores.add_row(plan.seen_after(b), cells)
        final = {k: v for k, v in step_history[-1].items() if k in ("loss", "l1", "ce", "scl")}
        record = StepRecord(step, list(step_objects), final, step_history[-1]["update_mode"])
        if out_dir is not None:
            ck = out_dir / f"step_{step}" / "checkpoint"
            bs = out_dir / f"step_{step}" / "basis"
            save_estimator(estimator, ck, cfg.config_hash())
            save_basis(estimator.basis_, bs, step, cfg.config_hash())
            record.checkpoint, record.basis = str(ck.relative_to(out_dir)), str(bs.relative_to(out_dir))
        record.wall_time = time.perf_counter() - t0
        records.append(record)
        logger.info("step %d done in %.1fs: %s", step, record.wall_time, cells)

    summary = summarize(scores)
    if out_dir is not None:
        write_metrics_csv(out_dir / "metrics.csv", scores)
        _write_losses(out_dir / "losses.csv", loss_rows)
        write_report(out_dir / "report.json", cfg, scores, records)
        write_manifest(out_dir, cfg, started, _now())
    return RunResult(records, scores, summary, estimator, out_dir)


def _write_losses(path, rows):
    keys = ("step", "epoch", "update_mode", "loss", "l1", "ce", "scl", "scl_skipped")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys)
    for r in rows:
        w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in keys])
    Path(path).write_text(buf.getvalue())
