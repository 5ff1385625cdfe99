"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The two end-to-end criteria train real models at the default scale and take a
few minutes on one CPU core.
"""
import math
import time
from contextlib import contextmanager

import numpy as np
import pytest
import torch

from iuf.config import RunConfig, ablate
from iuf.evaluation import ScoreMatrix, acc, auroc, fm
from iuf.losses import LossWeights, semantic_compression_loss, spatial_aggregate, svd_decompose, total_loss
from iuf.model import oasa_attention
from iuf.optim import SemanticBasis, UpdateConfig, reinforced_step, vanilla_step
from iuf.trainer import load_objects, run_incremental

# Step-1 image AUROC floor for a single object, from scripts/calibrate_detection.py
# with seeds 100-104; the test itself runs seed 0, which was not used for calibration.
DETECTION_CALIBRATION = {100: 1.0, 101: 1.0, 102: 1.0, 103: 1.0, 104: 1.0}
DETECTION_THRESHOLD = 0.95

D = torch.float64


@contextmanager
def criterion(capsys, number, title):
    info = {}
    status = "FAIL"
    try:
        yield info
        status = "PASS"
    finally:
        detail = ", ".join(f"{k}={v}" for k, v in info.items())
        with capsys.disabled():
            print(f"\n[{status}] criterion {number}: {title}" + (f" ({detail})" if detail else ""))


def _attention_instances(n=100, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        L, d = int(rng.integers(1, 17)), int(rng.integers(1, 33))
        yield tuple(rng.normal(size=(L, d)) for _ in range(3))


def _reference_attention(q, k, v):
    scores = q @ k.T / math.sqrt(q.shape[1])
    scores -= scores.max(axis=1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=1, keepdims=True)
    return w @ v


def test_c1_gate_identity_reduces_to_attention(capsys):
    with criterion(capsys, 1, "unit gate equals standard attention") as info:
        t0 = time.perf_counter()
        worst = 0.0
        for q, k, v in _attention_instances():
            out = oasa_attention(torch.ones(q.shape, dtype=D), *(torch.from_numpy(a) for a in (q, k, v)))
            worst = max(worst, float(np.abs(out.numpy() - _reference_attention(q, k, v)).max()))
        elapsed = time.perf_counter() - t0
        info.update(max_abs_diff=f"{worst:.2e}", seconds=f"{elapsed:.3f}")
        assert worst < 1e-6
        assert elapsed < 1.0


def test_c2_attention_rows_sum_to_one(capsys):
    with criterion(capsys, 2, "attention rows sum to 1") as info:
        rng = np.random.default_rng(1)
        worst = 0.0
        for q, k, v in _attention_instances():
            gate = torch.from_numpy(rng.uniform(0, 2, size=q.shape))
            _, w = oasa_attention(gate, *(torch.from_numpy(a) for a in (q, k, v)), return_weights=True)
            worst = max(worst, float((w.sum(-1) - 1).abs().max()))
        info.update(max_row_error=f"{worst:.2e}")
        assert worst < 1e-6


def _central_difference(f, x, eps=1e-6):
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + eps
        up = f(x).item()
        flat[i] = old - eps
        down = f(x).item()
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return g


def test_c3_loss_gradients_match_finite_differences(capsys):
    with criterion(capsys, 3, "compression and total loss gradients vs central differences") as info:
        t0 = time.perf_counter()
        rng = np.random.default_rng(3)
        weights = LossWeights(lambda0=1.0, lambda1=0.5, lambda2=0.3)
        t = weights.tail_start(4)
        worst, done = 0.0, 0
        while done < 20:
            agg = rng.normal(size=(4, 8))
            s = np.linalg.svd(agg, compute_uv=False)
            if np.min(-np.diff(s)) <= 1e-2:
                continue
            latent = torch.from_numpy(agg.reshape(4, 8, 1, 1).copy())
            x_hat = torch.from_numpy(rng.normal(size=(4, 5, 3)))
            target = torch.from_numpy(rng.normal(size=(4, 5, 3)))
            logits = torch.from_numpy(rng.normal(size=(4, 6)))
            labels = torch.from_numpy(rng.integers(0, 6, 4))

            def scl(lat):
                return semantic_compression_loss(torch.linalg.svdvals(spatial_aggregate(lat)), t)

            def full(lat):
                return total_loss(x_hat, target, logits, labels, lat, weights)[0]

            for f in (scl, full):
                leaf = latent.clone().requires_grad_(True)
                f(leaf).backward()
                fd = _central_difference(f, latent.clone())
                worst = max(worst, float((leaf.grad - fd).norm() / fd.norm()))
            done += 1
        elapsed = time.perf_counter() - t0
        info.update(max_rel_err=f"{worst:.2e}", seconds=f"{elapsed:.2f}")
        assert worst < 1e-3
        assert elapsed < 10.0


def test_c4_svd_properties(capsys):
    with criterion(capsys, 4, "SVD orthonormality, ordering and reconstruction") as info:
        t0 = time.perf_counter()
        rng = np.random.default_rng(4)
        worst_orth = worst_rec = 0.0
        for _ in range(1000):
            b, c = int(rng.integers(1, 17)), int(rng.integers(1, 65))
            m = rng.normal(size=(b, c)) * 10.0 ** rng.uniform(-3, 3)
            u, s, vt = svd_decompose(m)
            worst_orth = max(worst_orth, np.abs(u.T @ u - np.eye(b)).max(), np.abs(vt @ vt.T - np.eye(c)).max())
            assert np.all(s >= 0) and np.all(np.diff(s) <= 0)
            sigma = np.zeros((b, c))
            sigma[: len(s), : len(s)] = np.diag(s)
            worst_rec = max(worst_rec, np.abs(u @ sigma @ vt - m).max() / np.linalg.norm(m))
        elapsed = time.perf_counter() - t0
        info.update(orth_err=f"{worst_orth:.1e}", rel_recon_err=f"{worst_rec:.1e}", seconds=f"{elapsed:.2f}")
        assert worst_orth < 1e-6
        assert worst_rec < 1e-6
        assert elapsed < 30.0


def _random_orthogonal(rng, n):
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))


def test_c5_update_rule_reductions(capsys):
    with criterion(capsys, 5, "update rule reduces to descent and protects the top direction") as info:
        rng = np.random.default_rng(5)
        worst_vanilla = worst_protect = 0.0
        for _ in range(100):
            c, w = int(rng.integers(1, 17)), int(rng.integers(1, 17))
            theta, grad = rng.normal(size=(c, w)), rng.normal(size=(c, w))
            lr = float(rng.uniform(1e-3, 1.0))
            cfg = UpdateConfig(lr=lr, beta=0.0)
            out = reinforced_step(theta, grad, SemanticBasis(np.eye(c), np.ones(c)), cfg, multipliers=np.ones(c))
            worst_vanilla = max(worst_vanilla, np.abs(out - vanilla_step(theta, grad, lr)).max())

            vt = _random_orthogonal(rng, c)
            m = rng.uniform(0, 1, c)
            m[0] = 0.0
            delta = reinforced_step(theta, grad, SemanticBasis(vt, np.sort(rng.uniform(0, 5, c))[::-1]), cfg,
                                    multipliers=m) - theta
            worst_protect = max(worst_protect, np.abs(vt[0] @ delta).max())
        info.update(vanilla_diff=f"{worst_vanilla:.1e}", top_component=f"{worst_protect:.1e}")
        assert worst_vanilla < 1e-7
        assert worst_protect < 1e-7


def _pairwise(scores, labels):
    pos, neg = scores[labels == 1], scores[labels == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_c6_auroc_matches_pairwise_oracle(capsys):
    with criterion(capsys, 6, "AUROC equals the pairwise oracle") as info:
        rng = np.random.default_rng(6)
        worst = 0.0
        for i in range(200):
            n = int(rng.integers(2, 80))
            labels = rng.integers(0, 2, n)
            labels[:2] = (0, 1)
            if i % 2:
                scores = rng.integers(0, 5, n).astype(float)
            else:
                scores = np.round(rng.normal(size=n), 1)
            worst = max(worst, abs(auroc(scores, labels) - _pairwise(scores, labels)))
        info.update(max_abs_diff=f"{worst:.1e}")
        assert worst < 1e-12


def test_c7_acc_and_fm_hand_cases(capsys):
    with criterion(capsys, 7, "ACC/FM hand cases and negative FM") as info:
        assert acc([0.8, 0.85]) == 0.825
        two = ScoreMatrix()
        two.add_row((0,), {0: (0.9, 0.9)})
        two.add_row((1,), {0: (0.8, 0.8), 1: (0.7, 0.7)})
        assert fm(two) == 0.1
        better = ScoreMatrix()
        better.add_row((0,), {0: (0.8, 0.8)})
        better.add_row((1,), {0: (0.82, 0.82), 1: (0.9, 0.9)})
        negative = fm(better)
        info.update(acc=acc([0.8, 0.85]), fm=fm(two), negative_fm=round(negative, 6))
        assert negative < 0


@pytest.fixture(scope="module")
def forgetting_runs():
    t0 = time.perf_counter()
    rows = []
    for seed in range(5):
        base = RunConfig({"protocol": "3-1", "seed": seed, "data.n_objects": 4, "train.epochs": 30,
                          "eval.heatmaps": False})
        naive = ablate(ablate(ablate(base, "oasa"), "scl"), "us")
        objects = load_objects(base)
        full_run = run_incremental(base, objects=objects)
        naive_run = run_incremental(naive, objects=objects)
        old = full_run.scores.steps[0]
        rows.append({
            "seed": seed,
            "full_fm": full_run.summary["image_fm"],
            "naive_fm": naive_run.summary["image_fm"],
            "full_old_pixel": float(np.mean([full_run.scores.pixel[1][o] for o in old])),
            "naive_old_pixel": float(np.mean([naive_run.scores.pixel[1][o] for o in old])),
        })
    return rows, time.perf_counter() - t0


def test_c8_full_method_forgets_less_than_fine_tuning(capsys, forgetting_runs):
    rows, elapsed = forgetting_runs
    with criterion(capsys, 8, "full method forgets less than naive fine-tuning") as info:
        wins = sum(r["full_fm"] < r["naive_fm"] for r in rows)
        full_old = np.mean([r["full_old_pixel"] for r in rows])
        naive_old = np.mean([r["naive_old_pixel"] for r in rows])
        info.update(
            image_fm_full=[round(r["full_fm"], 4) for r in rows],
            image_fm_naive=[round(r["naive_fm"], 4) for r in rows],
            wins=f"{wins}/5",
            old_pixel_auroc=f"{full_old:.4f} vs {naive_old:.4f}",
            minutes=f"{elapsed / 60:.1f}",
        )
        assert wins >= 4
        assert full_old > naive_old
        assert elapsed < 15 * 60


def test_c9_step_one_detection(capsys):
    with criterion(capsys, 9, f"single-object step-1 image AUROC >= {DETECTION_THRESHOLD}") as info:
        cfg = RunConfig({"protocol": "1", "data.n_objects": 1, "seed": 0, "eval.heatmaps": False})
        result = run_incremental(cfg, objects=load_objects(cfg))
        value = result.scores.image[0][0]
        info.update(image_auroc=round(value, 4), calibrated_min=min(DETECTION_CALIBRATION.values()))
        assert value >= DETECTION_THRESHOLD


def test_c10_metrics_bytes_are_deterministic(capsys, tmp_path):
    with criterion(capsys, 10, "same config and seed give identical metrics.csv bytes") as info:
        cfg = RunConfig({"protocol": "3-1", "seed": 11, "eval.heatmaps": False})
        run_incremental(cfg, tmp_path / "a")
        run_incremental(cfg, tmp_path / "b")
        a = (tmp_path / "a" / "metrics.csv").read_bytes()
        b = (tmp_path / "b" / "metrics.csv").read_bytes()
        info.update(bytes=len(a))
        assert a == b
