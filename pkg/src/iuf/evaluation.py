"""AUROC, continual-learning summary metrics (ACC / FM) and heatmap export."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .exceptions import ContractViolation, UndefinedMetricError

LEVELS = ("pixel", "image")


def auroc(scores, labels):
    """Probability that a random positive outscores a random negative (ties count 1/2)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ContractViolation("scores and labels must have the same length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative samples")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _exact(x):
    return Fraction(repr(float(x)))


@dataclass
class ScoreMatrix:
    """``A[b][i]`` for each step ``b`` and every object ``i`` seen by then.

    A cell is ``None`` when the object had no defective test images.
    """
    steps: List[tuple] = field(default_factory=list)
    pixel: List[Dict[int, Optional[float]]] = field(default_factory=list)
    image: List[Dict[int, Optional[float]]] = field(default_factory=list)

    @property
    def n_steps(self):
        return len(self.steps)

    def add_row(self, step_objects, cells):
        """``cells`` maps object id -> (pixel_auroc, image_auroc) or None."""
        self.steps.append(tuple(step_objects))
        self.pixel.append({o: (None if c is None else c[0]) for o, c in cells.items()})
        self.image.append({o: (None if c is None else c[1]) for o, c in cells.items()})

    def set_row(self, b, cells):
        self.pixel[b] = {o: (None if c is None else c[0]) for o, c in cells.items()}
        self.image[b] = {o: (None if c is None else c[1]) for o, c in cells.items()}

    def level(self, level):
        if level not in LEVELS:
            raise ValueError(f"level must be one of {LEVELS}")
        return self.pixel if level == "pixel" else self.image

    def final_row(self, level):
        return self.level(level)[-1]


def acc(final_row):
    """Mean of the final-step AUROCs; exact rational arithmetic over the inputs."""
    values = list(final_row.values()) if isinstance(final_row, dict) else list(final_row)
    if not values:
        raise UndefinedMetricError("ACC of an empty row")
    if any(v is None for v in values):
        raise ContractViolation("ACC needs a complete final row")
    return float(sum(_exact(v) for v in values) / len(values))


def fm(scores: ScoreMatrix, level="image"):
    """Mean over earlier objects of (best earlier AUROC - final AUROC).

    Objects introduced at the final step are excluded. Negative values mean
    the model improved on old objects.
    """
    rows = scores.level(level)
    if len(rows) < 2:
        raise UndefinedMetricError("forgetting needs at least two steps")
    final = rows[-1]
    drops = []
    for obj, last in final.items():
        if last is None:
            continue
        history = [r[obj] for r in rows[:-1] if r.get(obj) is not None]
        if not history:
            continue
        drops.append(max(_exact(h) - _exact(last) for h in history))
    if not drops:
        raise UndefinedMetricError("no object was evaluated both before and at the final step")
    return float(sum(drops) / len(drops))


def summarize(scores: ScoreMatrix):
    """ACC and FM at pixel and image level; FM is None for single-step runs."""
    out = {}
    for level in LEVELS:
        row = {o: v for o, v in scores.final_row(level).items() if v is not None}
        out[f"{level}_acc"] = acc(row) if row else None
        try:
            out[f"{level}_fm"] = fm(scores, level)
        except UndefinedMetricError:
            out[f"{level}_fm"] = None
    return out


def evaluate_object(estimator, samples):
    """(pixel AUROC, image AUROC, pixel maps) for one object's test samples."""
    X = np.stack([s.image for s in samples])
    labels = np.array([s.label for s in samples])
    masks = np.stack([s.mask for s in samples])
    maps = estimator.anomaly_maps(X)
    image_scores = maps.reshape(len(maps), -1).max(axis=1)
    if labels.min() == labels.max():
        return None, maps
    return (auroc(maps.ravel(), masks.ravel()), auroc(image_scores, labels)), maps


def evaluate_step(estimator, seen_objects: Sequence[int], test_data, heatmap_dir=None, names=None):
    """One ScoreMatrix row over ``seen_objects``.

    ``test_data`` maps object id -> list of test Samples. Objects lacking
    defective (or normal) test images get a ``None`` cell and a warning.
    """
    cells = {}
    for obj in seen_objects:
        samples = test_data[obj]
        result, maps = evaluate_object(estimator, samples)
        if result is None:
            warnings.warn(f"object {obj} has a single-label test split; AUROC cell left empty")
        cells[obj] = result
        if heatmap_dir is not None:
            obj_name = names[obj] if names else str(obj)
            for s, m in zip(samples, maps):
                export_heatmap(m, Path(heatmap_dir) / obj_name / f"{s.name}.png")
    return cells


def _blue_to_red_lut(n=256):
    anchors = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
    colors = np.array([[0, 0, 255], [0, 255, 255], [0, 255, 0], [255, 255, 0], [255, 0, 0]], dtype=np.float64)
    x = np.linspace(0.0, 1.0, n)
    lut = np.stack([np.interp(x, anchors, colors[:, c]) for c in range(3)], axis=1)
    return np.round(lut).astype(np.uint8)


HEATMAP_LUT = _blue_to_red_lut()


def heatmap_rgb(pixel_scores):
    scores = np.asarray(pixel_scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ContractViolation("heatmap scores must be finite")
    lo, hi = scores.min(), scores.max()
    if hi > lo:
        norm = (scores - lo) / (hi - lo)
    else:
        norm = np.zeros_like(scores)
    idx = np.clip(np.round(norm * (len(HEATMAP_LUT) - 1)), 0, len(HEATMAP_LUT) - 1).astype(np.int64)
    return HEATMAP_LUT[idx]


def export_heatmap(pixel_scores, path):
    """Write min-max normalised scores as an 8-bit RGB PNG (blue low, red high)."""
    from PIL import Image

    rgb = heatmap_rgb(pixel_scores)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(rgb, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"failed to write heatmap {path}: {exc}") from exc
    return path
