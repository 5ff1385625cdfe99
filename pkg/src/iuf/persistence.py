"""Checkpoints and semantic bases as a JSON manifest plus one float32 blob.

Layout of a saved directory::

    manifest.json   format version, config hash, step, per-tensor name/shape/offset
    params.bin      all tensors, little-endian float32, concatenated in manifest order
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


def save_tensors(directory, tensors, *, kind, step, config_hash="", meta=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(directory / "params.bin", "wb") as fh:
        for name, t in tensors.items():
            arr = (t.detach().cpu().numpy() if torch.is_tensor(t) else np.asarray(t)).astype(_DTYPE)
            fh.write(np.ascontiguousarray(arr).tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
            offset += arr.size
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config_hash": config_hash,
        "step": int(step),
        "dtype": "float32-le",
        "tensors": entries,
        "meta": meta or {},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return [directory / "manifest.json", directory / "params.bin"]


def load_tensors(directory):
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no manifest in {directory}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format_version')}")
    flat = np.fromfile(directory / "params.bin", dtype=_DTYPE)
    tensors = {}
    for e in manifest["tensors"]:
        chunk = flat[e["offset"]: e["offset"] + e["count"]].reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(chunk.astype(np.float32))
    return tensors, manifest


def save_estimator(estimator, directory, config_hash=""):
    meta = {
        "params": estimator.get_params(),
        "n_steps": estimator.n_steps_,
        "seen_objects": list(estimator.seen_objects_),
        "threshold": estimator.threshold_,
    }
    return save_tensors(directory, estimator.network_.state_dict(), kind="checkpoint",
                        step=estimator.n_steps_, config_hash=config_hash, meta=meta)


def load_estimator(directory, basis_directory=None):
    from .estimator import IUFDetector

    tensors, manifest = load_tensors(directory)
    meta = manifest["meta"]
    est = IUFDetector(**meta["params"])
    est._reset()
    est.network_.load_state_dict(tensors)
    est.network_.eval()
    est.n_steps_ = meta["n_steps"]
    est.seen_objects_ = list(meta["seen_objects"])
    est.threshold_ = meta["threshold"]
    if basis_directory is not None and Path(basis_directory, "manifest.json").is_file():
        est.basis_ = load_basis(basis_directory)
    return est


def save_basis(basis, directory, step, config_hash=""):
    tensors = {"Vt": basis.Vt, "S": basis.S}
    tensors.update({f"theta_old.{k}": v for k, v in basis.theta_old.items()})
    return save_tensors(directory, tensors, kind="basis", step=step, config_hash=config_hash)


def load_basis(directory):
    from .optim import SemanticBasis

    tensors, _ = load_tensors(directory)
    theta_old = {k[len("theta_old."):]: v for k, v in tensors.items() if k.startswith("theta_old.")}
    return SemanticBasis(tensors["Vt"].double().numpy(), tensors["S"].double().numpy(), theta_old)
