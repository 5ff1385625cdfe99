"""Weight updates that protect the channel subspace used by earlier objects.

Each step keeps a snapshot of the previous weights and an orthonormal channel
basis of the latent space, ordered by importance. Updates to the latent-channel
parameters are rotated into that basis, scaled per rank with a clamped log
schedule so the dominant old directions stay frozen, and rotated back.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Optional

import numpy as np
import torch

from .exceptions import ConfigurationError, ContractViolation

logger = logging.getLogger(__name__)

RETAIN_MODES = ("pull", "literal")
_DEFAULT_BETA = {"pull": 0.05, "literal": 1e-4}


@dataclass
class SemanticBasis:
    Vt: np.ndarray  # (C, C), rows are channel directions by descending importance
    S: np.ndarray  # (C,), descending, zero padded
    theta_old: Dict[str, torch.Tensor] = field(default_factory=dict)

    def __post_init__(self):
        self.Vt = np.asarray(self.Vt, dtype=np.float64)
        self.S = np.asarray(self.S, dtype=np.float64)
        c = self.Vt.shape[0]
        if self.Vt.shape != (c, c) or self.S.shape != (c,):
            raise ContractViolation(f"basis shapes {self.Vt.shape}, {self.S.shape} are inconsistent")

    @property
    def channels(self):
        return self.Vt.shape[0]


@dataclass
class UpdateConfig:
    lr: float = 0.05
    beta: Optional[float] = None
    kappa: float = 0.5
    retain_mode: str = "pull"
    projected_params: Optional[Callable[[str, torch.Tensor], bool]] = None

    def __post_init__(self):
        if self.retain_mode not in RETAIN_MODES:
            raise ConfigurationError(f"retain_mode must be one of {RETAIN_MODES}", key="optim.retain_mode")
        if self.beta is None:
            self.beta = _DEFAULT_BETA[self.retain_mode]
        if self.lr <= 0:
            raise ConfigurationError("learning rate must be positive", key="optim.lr")
        if self.kappa <= 0:
            raise ConfigurationError("suppression gain kappa must be positive", key="optim.kappa")
        if self.beta < 0:
            raise ConfigurationError("retention beta must be nonnegative", key="optim.beta")


def vanilla_step(theta, grad, lr):
    return theta - lr * grad


def suppression_multipliers(kappa, n_channels):
    """``clamp(kappa * ln(r), 0, 1)`` for ranks ``r = 1..n_channels``."""
    if kappa <= 0:
        raise ConfigurationError("kappa must be positive", key="optim.kappa")
    ranks = np.arange(1, n_channels + 1, dtype=np.float64)
    return np.clip(kappa * np.log(ranks), 0.0, 1.0)


def _as_matrix(x, channels):
    if x.shape[0] != channels:
        raise ContractViolation(f"leading dimension {x.shape[0]} != basis channels {channels}")
    return x.reshape(channels, -1)


def project_update(delta, basis):
    """Rotate an update with latent channels on its leading axis into the basis."""
    vt = _basis_like(basis.Vt, delta)
    return (vt @ _as_matrix(delta, basis.channels)).reshape(delta.shape)


def _basis_like(arr, ref):
    if torch.is_tensor(ref):
        return torch.as_tensor(arr, dtype=ref.dtype, device=ref.device)
    return np.asarray(arr, dtype=np.result_type(np.asarray(ref).dtype, np.float32))


def suppressed_update(delta, basis, multipliers):
    """Project, scale channel ranks by ``multipliers`` and project back."""
    vt = _basis_like(basis.Vt, delta)
    m = _basis_like(multipliers, delta).reshape(-1, 1)
    d2 = _as_matrix(delta, basis.channels)
    return (vt.T @ (m * (vt @ d2))).reshape(delta.shape)


def reinforced_step(theta, grad, basis, cfg: UpdateConfig, theta_old=None, projected=True,
                    multipliers=None):
    """One reinforced update of a single parameter tensor.

    ``theta_old`` defaults to ``basis.theta_old`` lookup by the caller; when
    ``projected`` is False the channel stage is skipped and only descent plus
    retention apply.
    """
    if basis is None:
        raise ContractViolation("reinforced_step needs a semantic basis captured at a previous step")
    delta = -cfg.lr * grad
    if projected:
        if multipliers is None:
            multipliers = suppression_multipliers(cfg.kappa, basis.channels)
        delta = suppressed_update(delta, basis, multipliers)
    out = theta + delta
    if theta_old is not None and cfg.beta:
        if cfg.retain_mode == "pull":
            out = out + cfg.beta * (theta_old - theta)
        else:
            out = out + cfg.beta * theta_old
    return out


def capture_basis(latent_rows: Iterable, n_channels=None, prev: Optional[SemanticBasis] = None,
                  theta_old=None) -> SemanticBasis:
    """Channel basis of the aggregated latents of the step that just finished.

    With ``prev``, its ``diag(S) @ Vt`` is stacked on top of the new rows so the
    earlier steps keep their weight without their data.
    """
    rows = [np.asarray(r.detach().cpu() if torch.is_tensor(r) else r, dtype=np.float64) for r in latent_rows]
    rows = [r.reshape(-1, r.shape[-1]) for r in rows if r.size]
    if n_channels is None:
        if rows:
            n_channels = rows[0].shape[-1]
        elif prev is not None:
            n_channels = prev.channels
        else:
            raise ContractViolation("capture_basis needs rows or a channel count")
    stack = np.concatenate(rows, axis=0) if rows else np.zeros((0, n_channels))
    if prev is not None:
        if prev.channels != n_channels:
            raise ContractViolation("previous basis has a different channel count")
        stack = np.concatenate([prev.S[:, None] * prev.Vt, stack], axis=0)
    if stack.shape[0] < n_channels:
        logger.info("basis captured from %d rows < %d channels; rank deficient", stack.shape[0], n_channels)
    if stack.shape[0] == 0:
        vt, s = np.eye(n_channels), np.zeros(0)
    else:
        _, s, vt = np.linalg.svd(stack, full_matrices=True)
    s_full = np.zeros(n_channels)
    s_full[: s.shape[0]] = s
    snapshot = {}
    if theta_old is not None:
        snapshot = {k: v.detach().clone() for k, v in dict(theta_old).items()}
    return SemanticBasis(vt, s_full, snapshot)


def default_projection_predicate(latent_channels):
    """Latent-channel parameters on the bottleneck/decoder path."""

    def predicate(name, param):
        on_path = name.startswith(("reconstructor.bottleneck", "reconstructor.expand", "reconstructor.decoder"))
        return on_path and param.dim() >= 1 and param.shape[0] == latent_channels

    return predicate


class ReinforcedUpdater:
    """Applies the update rule to every trainable parameter of a module in place.

    Without a basis (first step) or with ``enabled=False`` it falls back to
    plain gradient descent; ``enabled=False`` also drops retention.
    """

    def __init__(self, module, cfg: UpdateConfig, basis: Optional[SemanticBasis] = None, enabled=True):
        self.module = module
        self.cfg = cfg
        self.basis = basis
        self.enabled = enabled
        latent = getattr(module, "latent_channels", None)
        self.predicate = cfg.projected_params or default_projection_predicate(latent)
        self._multipliers = None
        if basis is not None:
            self._multipliers = suppression_multipliers(cfg.kappa, basis.channels)
        self.mode = "reinforced" if (basis is not None and enabled) else "vanilla"

    def projected_names(self):
        return [n for n, p in self.module.named_parameters() if p.requires_grad and self.predicate(n, p)]

    @torch.no_grad()
    def step(self):
        for name, p in self.module.named_parameters():
            if not p.requires_grad or p.grad is None:
                continue
            if self.mode == "vanilla":
                p.copy_(vanilla_step(p, p.grad, self.cfg.lr))
                continue
            old = self.basis.theta_old.get(name)
            p.copy_(reinforced_step(p, p.grad, self.basis, self.cfg, theta_old=old,
                                    projected=self.predicate(name, p), multipliers=self._multipliers))

    def zero_grad(self):
        for p in self.module.parameters():
            p.grad = None
