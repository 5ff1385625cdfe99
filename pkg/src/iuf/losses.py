"""Training objectives: reconstruction, classification and semantic compression."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

from .exceptions import ConfigurationError, ContractViolation, NumericError

logger = logging.getLogger(__name__)

# tail-spectrum gap below which the compression term is skipped for a batch
SCL_GAP_TOL = 1e-8


class SvdResult(NamedTuple):
    U: np.ndarray
    S: np.ndarray
    Vt: np.ndarray


@dataclass
class LossWeights:
    lambda0: float = 1.0
    lambda1: float = 0.5
    lambda2: float = 0.01
    scl_keep_ratio: float = 0.25
    # explicit 1-based tail start; overrides scl_keep_ratio when set
    scl_tail_start: int | None = None

    def __post_init__(self):
        for name in ("lambda0", "lambda1", "lambda2"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be nonnegative", key=f"loss.{name}")
        if not 0.0 <= self.scl_keep_ratio <= 1.0:
            raise ConfigurationError("scl_keep_ratio must lie in [0, 1]", key="loss.scl_keep_ratio")

    def tail_start(self, k):
        if self.scl_tail_start is not None:
            return int(self.scl_tail_start)
        return min(int(np.floor(k * self.scl_keep_ratio)) + 1, k)


def l1_reconstruction(x_hat, x_target):
    if x_hat.shape != x_target.shape:
        raise ContractViolation(f"shape mismatch {tuple(x_hat.shape)} vs {tuple(x_target.shape)}")
    return (x_hat - x_target).abs().mean()


def cross_entropy(logits, label):
    """``-log softmax(logits)[label]``, averaged over a batch when 2-D."""
    logits = torch.as_tensor(logits)
    label = torch.as_tensor(label, dtype=torch.long)
    if logits.dim() == 1:
        logits, label = logits[None], label.reshape(1)
    if label.numel() and (label.min() < 0 or label.max() >= logits.shape[-1]):
        raise ContractViolation(f"label out of range for {logits.shape[-1]} classes")
    return F.cross_entropy(logits, label)


def spatial_aggregate(latent):
    """Mean over the spatial axes: ``(B, C, H, W) -> (B, C)``."""
    if latent.shape[-1] * latent.shape[-2] < 1:
        raise ContractViolation("latent grid must have at least one cell")
    return latent.mean(dim=(-2, -1))


def svd_decompose(m_hat) -> SvdResult:
    """Full SVD of a ``(B, C)`` aggregate with orthogonal ``U`` (BxB) and ``Vt`` (CxC)."""
    m = np.asarray(m_hat.detach().cpu() if torch.is_tensor(m_hat) else m_hat, dtype=np.float64)
    if m.ndim != 2:
        raise ContractViolation(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError("svd_decompose received non-finite entries")
    u, s, vt = np.linalg.svd(m, full_matrices=True)
    return SvdResult(u, s, vt)


def semantic_compression_loss(singular_values, t):
    """Sum of the singular values from 1-based rank ``t`` to ``k``."""
    k = singular_values.shape[-1]
    if not 1 <= int(t) <= k:
        raise ConfigurationError(f"tail start t={t} outside [1, {k}]", key="loss.scl_tail_start")
    return singular_values[..., int(t) - 1:].sum(-1)


def _tail_is_degenerate(s, t):
    window = s[max(t - 2, 0):].detach()
    if window.numel() < 2:
        return False
    return bool((window[:-1] - window[1:]).min() < SCL_GAP_TOL)


def total_loss(x_hat, x_target, logits, label, latent, w: LossWeights):
    """Weighted sum ``l0*L1 + l1*CE + l2*SCL`` and a float breakdown for logging.

    The compression term is skipped (and flagged in the breakdown) when the
    tail spectrum is degenerate, where singular-value gradients are ambiguous.
    """
    rec = l1_reconstruction(x_hat, x_target)
    ce = cross_entropy(logits, label) if w.lambda1 > 0 else rec.new_zeros(())
    scl = rec.new_zeros(())
    skipped = False
    if w.lambda2 > 0:
        s = torch.linalg.svdvals(spatial_aggregate(latent))
        t = w.tail_start(s.shape[-1])
        if _tail_is_degenerate(s, t):
            skipped = True
            logger.debug("skipping compression term: degenerate tail spectrum")
        else:
            scl = semantic_compression_loss(s, t)
    loss = w.lambda0 * rec + w.lambda1 * ce + w.lambda2 * scl
    parts = {
        "loss": float(loss.detach()),
        "l1": float(rec.detach()),
        "ce": float(ce.detach()),
        "scl": float(scl.detach()),
        "scl_skipped": skipped,
    }
    return loss, parts
