import json

import numpy as np
import pytest
import torch

from iuf.optim import capture_basis
from iuf.persistence import load_basis, load_tensors, save_basis, save_tensors


def test_tensor_round_trip(tmp_path):
    tensors = {"a": torch.randn(3, 4), "b": torch.arange(5.0), "c": torch.tensor(2.5)}
    save_tensors(tmp_path, tensors, kind="checkpoint", step=2, config_hash="abc", meta={"x": 1})
    back, manifest = load_tensors(tmp_path)
    assert list(back) == ["a", "b", "c"]
    for k in tensors:
        assert torch.equal(back[k], tensors[k])
    assert manifest["step"] == 2 and manifest["config_hash"] == "abc" and manifest["meta"] == {"x": 1}


def test_blob_is_little_endian_float32(tmp_path):
    save_tensors(tmp_path, {"w": torch.tensor([1.0, -2.0])}, kind="checkpoint", step=1)
    assert (tmp_path / "params.bin").read_bytes() == np.array([1.0, -2.0], dtype="<f4").tobytes()


def test_missing_and_unknown_format(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_tensors(tmp_path)
    save_tensors(tmp_path, {"w": torch.zeros(1)}, kind="checkpoint", step=1)
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["format_version"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(ValueError):
        load_tensors(tmp_path)


def test_basis_round_trip(tmp_path):
    rows = np.random.default_rng(0).normal(size=(10, 6))
    p = torch.nn.Parameter(torch.randn(6, 3))
    basis = capture_basis([rows], theta_old={"layer.weight": p})
    save_basis(basis, tmp_path, step=1, config_hash="h")
    back = load_basis(tmp_path)
    assert np.allclose(back.Vt, basis.Vt, atol=1e-6)
    assert np.allclose(back.S, basis.S, rtol=1e-6)
    assert torch.equal(back.theta_old["layer.weight"], p.detach())
