"""Synthetic textured objects with injected defects, MVTec-style ingestion and
incremental protocol parsing.

Every generated image is a pure function of ``(ObjectSpec, image index)``; the
random stream for an image is seeded from ``(spec.seed, spec.object_id, role,
index)`` so samples can be produced in any order, or concurrently.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .exceptions import ConfigurationError, IngestionError, ProtocolError

GENERATOR_KINDS = ("stripes", "checker", "blobs", "gradient", "rings", "noise_texture")
DEFECT_KINDS = ("scratch", "blotch", "noise_patch")

NORMAL, DEFECTIVE = 0, 1

MIN_DEFECT_FRACTION = 0.002
MAX_DEFECT_FRACTION = 0.10

# role tags for per-image seed derivation
_TRAIN, _TEST_NORMAL, _TEST_DEFECT_BASE, _DEFECT = 0, 1, 2, 3


@dataclass(frozen=True)
class ObjectSpec:
    object_id: int
    generator_kind: str
    # (frequency, orientation in radians, palette seed)
    texture_params: Tuple[float, float, float] = (4.0, 0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        if self.generator_kind not in GENERATOR_KINDS:
            raise ConfigurationError(
                f"unknown generator_kind {self.generator_kind!r}; "
                f"expected one of {GENERATOR_KINDS}",
                key="generator_kind",
            )
        if len(self.texture_params) != 3:
            raise ConfigurationError("texture_params must be (frequency, orientation, palette_seed)")
        if self.texture_params[0] <= 0:
            raise ConfigurationError("texture frequency must be positive")


@dataclass
class Sample:
    image: np.ndarray  # (C, H, W) float32 in [0, 1]
    object_id: int
    label: int  # NORMAL or DEFECTIVE
    mask: np.ndarray  # (H, W) uint8
    name: str = ""

    def __post_init__(self):
        if self.label not in (NORMAL, DEFECTIVE):
            raise ValueError(f"label must be 0 (normal) or 1 (defective), got {self.label}")
        if self.mask.shape != self.image.shape[1:]:
            raise ValueError("mask shape must match image spatial shape")
        has_defect = bool(self.mask.any())
        if self.label == NORMAL and has_defect:
            raise ValueError("normal sample with a nonzero defect mask")
        if has_defect and self.label != DEFECTIVE:
            raise ValueError("nonzero mask requires a defective label")


@dataclass
class ObjectData:
    object_id: int
    name: str
    train: List[Sample] = field(default_factory=list)
    test: List[Sample] = field(default_factory=list)


@dataclass(frozen=True)
class StepPlan:
    steps: Tuple[Tuple[int, ...], ...]
    total_objects: int

    def __post_init__(self):
        seen = set()
        for s in self.steps:
            if not s:
                raise ProtocolError("every protocol step needs at least one object")
            if seen.intersection(s):
                raise ProtocolError("protocol steps must be disjoint")
            seen.update(s)
        if len(seen) != self.total_objects:
            raise ProtocolError(
                f"protocol covers {len(seen)} objects, expected {self.total_objects}"
            )

    def __len__(self):
        return len(self.steps)

    def seen_after(self, step_index):
        """Object ids introduced at or before the 0-based ``step_index``."""
        return tuple(o for s in self.steps[: step_index + 1] for o in s)


_DEFAULT_FREQ = {"stripes": 5.0, "checker": 4.0, "blobs": 4.0, "gradient": 1.0, "rings": 6.0,
                 "noise_texture": 3.0}


# the smooth "gradient" kind is the hardest to learn and sits last so that small
# protocols start with well-separated textures
CATALOGUE_ORDER = ("stripes", "checker", "rings", "noise_texture", "blobs", "gradient")


def default_object_specs(n_objects=6, seed=0, kinds=CATALOGUE_ORDER):
    """Desk-scale object catalogue, one generator kind per object (cycled)."""
    specs = []
    for i in range(n_objects):
        kind = kinds[i % len(kinds)]
        orient = (0.35 * i) % np.pi
        specs.append(ObjectSpec(i, kind, (_DEFAULT_FREQ[kind], orient, float(1000 + i)), seed))
    return specs


def _image_rng(spec, role, index):
    return np.random.default_rng([int(spec.seed) & 0xFFFFFFFFFFFFFFFF, spec.object_id, role, index])


def _palette(palette_seed):
    rng = np.random.default_rng(int(palette_seed))
    while True:
        c0 = rng.uniform(0.1, 0.9, size=3)
        c1 = rng.uniform(0.1, 0.9, size=3)
        if np.abs(c0 - c1).sum() > 0.6:
            return c0, c1


def _pattern(kind, freq, theta, size, rng):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    two_pi = 2.0 * np.pi
    if kind == "stripes":
        th = theta + rng.uniform(-0.05, 0.05)
        phase = rng.uniform(0, two_pi)
        p = 0.5 + 0.5 * np.sin(two_pi * freq * (xx * np.cos(th) + yy * np.sin(th)) / size + phase)
    elif kind == "checker":
        px, py = rng.uniform(0, two_pi, size=2)
        s = np.sin(two_pi * freq * xx / size + px) * np.sin(two_pi * freq * yy / size + py)
        p = 0.5 + 0.5 * np.tanh(4.0 * s)
    elif kind == "blobs":
        spacing = size / freq
        r = spacing / 5.0
        ox, oy = rng.uniform(0, spacing, size=2)
        p = np.zeros((size, size))
        for cy in np.arange(oy - spacing, size + spacing, spacing):
            for cx in np.arange(ox - spacing, size + spacing, spacing):
                jx, jy = rng.normal(0.0, 0.5, size=2)
                p += np.exp(-((xx - cx - jx) ** 2 + (yy - cy - jy) ** 2) / (2 * r * r))
        p = np.clip(p, 0.0, 1.0)
    elif kind == "gradient":
        th = theta + rng.uniform(-0.1, 0.1)
        ramp = (xx * np.cos(th) + yy * np.sin(th)) / size
        ramp = ramp - ramp.min()
        p = ramp / max(ramp.max(), 1e-12)
        p = np.clip(0.9 * p + rng.uniform(0.0, 0.1), 0.0, 1.0)
    elif kind == "rings":
        cx, cy = size / 2 + rng.uniform(-3, 3, size=2)
        rad = np.hypot(xx - cx, yy - cy)
        p = 0.5 + 0.5 * np.sin(two_pi * freq * rad / size + rng.uniform(0, two_pi))
    elif kind == "noise_texture":
        field_ = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=size / (4.0 * freq), mode="wrap")
        field_ = (field_ - field_.mean()) / max(field_.std(), 1e-12)
        p = 0.5 + 0.5 * np.tanh(field_)
    else:  # pragma: no cover - guarded by ObjectSpec
        raise ConfigurationError(f"unknown generator_kind {kind!r}")
    return p


def render_object(spec, role, index, image_size=64):
    rng = _image_rng(spec, role, index)
    freq, theta, palette_seed = spec.texture_params
    p = _pattern(spec.generator_kind, freq, theta, image_size, rng)
    c0, c1 = _palette(palette_seed)
    img = c0[:, None, None] * (1.0 - p)[None] + c1[:, None, None] * p[None]
    img = img + rng.normal(0.0, 0.015, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _stamp_polyline(points, width, size):
    mask = np.zeros((size, size), dtype=bool)
    lo = (width - 1) // 2
    for (r0, c0), (r1, c1) in zip(points[:-1], points[1:]):
        n = int(np.ceil(4 * max(abs(r1 - r0), abs(c1 - c0)))) + 1
        for t in np.linspace(0.0, 1.0, n):
            r = int(round(r0 + t * (r1 - r0))) - lo
            c = int(round(c0 + t * (c1 - c0))) - lo
            mask[max(r, 0): max(r + width, 0), max(c, 0): max(c + width, 0)] = True
    return mask


def _defect_mask(kind, size, rng):
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "scratch":
        width = int(rng.integers(1, 4))
        n_seg = int(rng.integers(1, 4))
        pts = [rng.uniform(6, size - 6, size=2)]
        heading = rng.uniform(0, 2 * np.pi)
        for _ in range(n_seg):
            heading += rng.uniform(-0.8, 0.8)
            length = rng.uniform(6, 18)
            nxt = pts[-1] + length * np.array([np.sin(heading), np.cos(heading)])
            pts.append(np.clip(nxt, 1, size - 2))
        return _stamp_polyline(pts, width, size)
    if kind == "blotch":
        cy, cx = rng.uniform(6, size - 6, size=2)
        a, b = rng.uniform(2.0, 6.0, size=2)
        phi = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(phi) + dy * np.sin(phi)
        v = -dx * np.sin(phi) + dy * np.cos(phi)
        wobble = 1.0 + 0.2 * np.sin(3 * np.arctan2(v, u) + rng.uniform(0, 2 * np.pi))
        return (u / a) ** 2 + (v / b) ** 2 <= wobble
    if kind == "noise_patch":
        h, w = rng.integers(3, 11, size=2)
        r0 = int(rng.integers(0, size - h + 1))
        c0 = int(rng.integers(0, size - w + 1))
        mask = np.zeros((size, size), dtype=bool)
        mask[r0: r0 + h, c0: c0 + w] = True
        return mask
    raise ConfigurationError(f"unknown defect_kind {kind!r}; expected one of {DEFECT_KINDS}")


def inject_defect(image, rng_seed, defect_kind):
    """Paint a small defect onto ``image``.

    Returns ``(defective_image, mask)``. Pixels outside the mask are copied
    unchanged; every pixel inside it moves by at least 0.25 in each channel,
    away from its current value so the result stays in [0, 1].
    """
    image = np.asarray(image, dtype=np.float32)
    size_h, size_w = image.shape[-2:]
    if size_h != size_w:
        raise ValueError("inject_defect expects square images")
    n_pix = size_h * size_w
    lo, hi = MIN_DEFECT_FRACTION * n_pix, MAX_DEFECT_FRACTION * n_pix
    rng = np.random.default_rng(int(rng_seed) & 0xFFFFFFFFFFFFFFFF)
    while True:
        mask = _defect_mask(defect_kind, size_h, rng)
        area = int(mask.sum())
        if lo <= area <= hi:
            break
    n_ch = image.shape[0]
    if defect_kind == "scratch":
        amp = np.full((n_ch, 1, 1), rng.uniform(0.3, 0.5))
    elif defect_kind == "blotch":
        amp = rng.uniform(0.25, 0.5, size=(n_ch, 1, 1))
    else:
        amp = rng.uniform(0.25, 0.5, size=image.shape)
    amp = np.broadcast_to(amp, image.shape).astype(np.float32)
    moved = np.where(image > 0.5, image - amp, image + amp)
    out = image.copy()
    out[:, mask] = np.clip(moved[:, mask], 0.0, 1.0)
    return out, mask.astype(np.uint8)


def generate_dataset(spec, n_train, n_test_normal, n_test_defective, image_size=64):
    """Normal training images plus a labelled test split for one object."""
    for name, n in (("n_train", n_train), ("n_test_normal", n_test_normal),
                    ("n_test_defective", n_test_defective)):
        if int(n) < 1:
            raise ConfigurationError(f"{name} must be >= 1, got {n}", key=name)
    zeros = np.zeros((image_size, image_size), dtype=np.uint8)
    data = ObjectData(spec.object_id, f"{spec.generator_kind}_{spec.object_id}")
    for i in range(n_train):
        data.train.append(Sample(render_object(spec, _TRAIN, i, image_size), spec.object_id,
                                 NORMAL, zeros.copy(), f"train_{i:03d}"))
    for i in range(n_test_normal):
        data.test.append(Sample(render_object(spec, _TEST_NORMAL, i, image_size), spec.object_id,
                                NORMAL, zeros.copy(), f"good_{i:03d}"))
    for i in range(n_test_defective):
        base = render_object(spec, _TEST_DEFECT_BASE, i, image_size)
        seq = np.random.SeedSequence([int(spec.seed) & 0xFFFFFFFFFFFFFFFF, spec.object_id, _DEFECT, i])
        kind_rng = np.random.default_rng(seq)
        kind = DEFECT_KINDS[int(kind_rng.integers(len(DEFECT_KINDS)))]
        img, mask = inject_defect(base, int(kind_rng.integers(2**63)), kind)
        data.test.append(Sample(img, spec.object_id, DEFECTIVE, mask, f"{kind}_{i:03d}"))
    return data


def stack_samples(samples: Sequence[Sample]):
    """Return ``(X, object_ids, labels, masks)`` arrays for a list of samples."""
    X = np.stack([s.image for s in samples]).astype(np.float32)
    ids = np.array([s.object_id for s in samples], dtype=np.int64)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    masks = np.stack([s.mask for s in samples]).astype(np.uint8)
    return X, ids, labels, masks


_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


def _list_images(directory):
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)


def _read_image(path, image_size):
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB").resize((image_size, image_size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def _read_mask(path, image_size):
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("L").resize((image_size, image_size), Image.NEAREST)
        arr = np.asarray(im)
    return (arr >= 128).astype(np.uint8)


def load_mvtec_layout(root_path, image_size=64) -> Dict[int, ObjectData]:
    """Read an MVTec-AD style tree into ``{object_id: ObjectData}``.

    Object ids follow the sorted directory names. Defective test images need a
    matching ``ground_truth/<defect>/<stem>_mask.*`` file with at least one
    foreground pixel.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} is not a directory")
    objects = sorted(p for p in root.iterdir() if p.is_dir())
    if not objects:
        raise IngestionError(f"no object directories under {root}")
    out = {}
    for object_id, obj_dir in enumerate(objects):
        data = ObjectData(object_id, obj_dir.name)
        zeros = np.zeros((image_size, image_size), dtype=np.uint8)
        good_dir = obj_dir / "train" / "good"
        train_files = _list_images(good_dir) if good_dir.is_dir() else []
        if not train_files:
            raise IngestionError(f"object directory {obj_dir} has no train/good images")
        for f in train_files:
            data.train.append(Sample(_read_image(f, image_size), object_id, NORMAL, zeros.copy(), f.stem))
        test_root = obj_dir / "test"
        if test_root.is_dir():
            for defect_dir in sorted(p for p in test_root.iterdir() if p.is_dir()):
                for f in _list_images(defect_dir):
                    name = f"{defect_dir.name}_{f.stem}"
                    img = _read_image(f, image_size)
                    if defect_dir.name == "good":
                        data.test.append(Sample(img, object_id, NORMAL, zeros.copy(), name))
                        continue
                    gt_dir = obj_dir / "ground_truth" / defect_dir.name
                    candidates = sorted(gt_dir.glob(f"{f.stem}_mask.*")) if gt_dir.is_dir() else []
                    if not candidates:
                        raise IngestionError(f"missing ground-truth mask for defective test image {f}")
                    mask = _read_mask(candidates[0], image_size)
                    if not mask.any():
                        raise IngestionError(
                            f"ground-truth mask {candidates[0]} is empty for defective image {f}"
                        )
                    data.test.append(Sample(img, object_id, DEFECTIVE, mask, name))
        out[object_id] = data
    return out


_PROTOCOL_RE = re.compile(r"^\s*(\d+)\s*(?:-\s*(\d+))?\s*(?:[x×X*]\s*(\d+))?\s*$")


def parse_protocol(spec_string, total_objects) -> StepPlan:
    """Parse ``a``, ``a-b``, ``axs`` or ``a-bxs`` (``×`` also accepted).

    Objects are assigned to steps in ascending id order.
    """
    m = _PROTOCOL_RE.match(str(spec_string))
    if not m:
        raise ProtocolError(f"cannot parse protocol {spec_string!r}", key="protocol")
    a, b, s = (int(g) if g is not None else None for g in m.groups())
    if any(v is not None and v < 1 for v in (a, b, s)):
        raise ProtocolError(f"protocol {spec_string!r} has non-positive counts", key="protocol")
    if b is None and s is None:
        sizes = [a]
    elif s is None:
        sizes = [a, b]
    elif b is None:
        sizes = [a] * s
    else:
        sizes = [a] + [b] * s
    if sum(sizes) != total_objects:
        raise ProtocolError(
            f"protocol {spec_string!r} needs {sum(sizes)} objects but {total_objects} were provided",
            key="protocol",
        )
    steps, start = [], 0
    for n in sizes:
        steps.append(tuple(range(start, start + n)))
        start += n
    return StepPlan(tuple(steps), total_objects)
