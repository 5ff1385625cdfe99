"""Object-incremental anomaly detector with an sklearn-compatible surface.

``fit`` trains the first step from scratch; each later ``partial_fit`` call is
one incremental step on new objects, without access to earlier data.
"""
from __future__ import annotations

import logging
import time

import numpy as np
import torch
from sklearn.base import BaseEstimator, OutlierMixin
from sklearn.utils.validation import check_is_fitted

from ._seeding import derive_seeds
from ._validation import check_images, check_object_ids
from .exceptions import NonFiniteLossError
from .losses import LossWeights, spatial_aggregate, total_loss
from .model import IUFNetwork, anomaly_map
from .optim import ReinforcedUpdater, SemanticBasis, UpdateConfig, capture_basis

logger = logging.getLogger(__name__)


class IUFDetector(OutlierMixin, BaseEstimator):
    """Reconstruction-based defect detector trained one group of objects at a time.

    Parameters
    ----------
    image_size, patch_size : int
        Run resolution and patch size of the frozen feature extractor.
    model_dim, latent_channels, n_heads : int
        Transformer width, bottleneck channels and attention heads.
    n_max_objects : int
        Size of the classification head, fixed across steps.
    target : {"features", "pixels"}
        What the reconstructor reproduces.
    lambda0, lambda1, lambda2 : float
        Weights of the L1, cross-entropy and compression terms.
    scl_keep_ratio : float
        Fraction of the spectrum left unpenalised by the compression term.
    learning_rate, retention, suppression_gain, retain_mode
        Update-rule settings; ``retention=None`` picks the mode's default.
    use_oasa, use_scl, use_us : bool
        Ablation switches for gated attention, the compression loss and the
        reinforced update strategy.
    smoothing_sigma : float
        Gaussian smoothing of the anomaly grid, in feature-grid cells.
    contamination : float
        Fraction of training images above the ``predict`` threshold.
    """

    def __init__(self, image_size=64, patch_size=8, feature_dim=None, model_dim=128, latent_channels=64,
                 n_heads=4, n_max_objects=16, target="features", lambda0=1.0, lambda1=0.5, lambda2=0.01,
                 scl_keep_ratio=0.25, learning_rate=0.15, retention=None, suppression_gain=0.5,
                 retain_mode="pull", epochs=30, batch_size=8, use_oasa=True, use_scl=True, use_us=True,
                 smoothing_sigma=1.0, contamination=0.05, random_state=0, verbose=0):
        self.image_size = image_size
        self.patch_size = patch_size
        self.feature_dim = feature_dim
        self.model_dim = model_dim
        self.latent_channels = latent_channels
        self.n_heads = n_heads
        self.n_max_objects = n_max_objects
        self.target = target
        self.lambda0 = lambda0
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.scl_keep_ratio = scl_keep_ratio
        self.learning_rate = learning_rate
        self.retention = retention
        self.suppression_gain = suppression_gain
        self.retain_mode = retain_mode
        self.epochs = epochs
        self.batch_size = batch_size
        self.use_oasa = use_oasa
        self.use_scl = use_scl
        self.use_us = use_us
        self.smoothing_sigma = smoothing_sigma
        self.contamination = contamination
        self.random_state = random_state
        self.verbose = verbose

    # -- configuration -------------------------------------------------
    def loss_weights(self):
        return LossWeights(self.lambda0, self.lambda1, self.lambda2 if self.use_scl else 0.0,
                           self.scl_keep_ratio)

    def update_config(self):
        return UpdateConfig(lr=self.learning_rate, beta=self.retention, kappa=self.suppression_gain,
                            retain_mode=self.retain_mode)

    def _seeds(self):
        return derive_seeds(self.random_state or 0)

    def _init_network(self):
        seeds = self._seeds()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seeds["init"])
            net = IUFNetwork(self.image_size, 3, self.patch_size, self.feature_dim, self.model_dim,
                             self.latent_channels, self.n_heads, self.n_max_objects, self.target,
                             embed_seed=seeds["embed"])
        net.embed.requires_grad_(False)
        return net

    def _reset(self):
        self.network_ = self._init_network()
        self.basis_ = None
        self.n_steps_ = 0
        self.seen_objects_ = []
        self.history_ = []
        self.threshold_ = None

    # -- training ------------------------------------------------------
    def fit(self, X, y):
        """Train the first step on normal images ``X`` of objects ``y``."""
        self._reset()
        return self._train_step(X, y)

    def partial_fit(self, X, y):
        """Run one more incremental step; the first call behaves like ``fit``."""
        if not hasattr(self, "network_"):
            self._reset()
        return self._train_step(X, y)

    def _train_step(self, X, y):
        X = check_images(X, image_size=self.image_size, channels=3)
        y = check_object_ids(y, len(X), self.n_max_objects)
        step = self.n_steps_ + 1
        net = self.network_
        weights = self.loss_weights()
        cfg = self.update_config()
        basis = self.basis_ if (self.use_us and step > 1) else None
        # without a basis (first step, or strategy ablated) this is plain descent, no retention
        updater = ReinforcedUpdater(net, cfg, basis, enabled=self.use_us)
        logger.info("step %d: %s updates on objects %s", step, updater.mode, sorted(set(y.tolist())))

        rng = np.random.default_rng([self._seeds()["shuffle"], step])
        X_t = torch.from_numpy(X)
        y_t = torch.from_numpy(y)
        n = len(X)
        net.train()
        t0 = time.perf_counter()
        it = 0
        for epoch in range(self.epochs):
            perm = rng.permutation(n)
            sums = {}
            n_batches = 0
            for start in range(0, n, self.batch_size):
                idx = torch.from_numpy(perm[start:start + self.batch_size])
                out = net(X_t[idx], use_gates=self.use_oasa)
                loss, parts = total_loss(out["x_hat"], out["target"], out["logits"], y_t[idx], out["latent"],
                                         weights)
                it += 1
                if not torch.isfinite(loss):
                    raise NonFiniteLossError(step, it, parts)
                updater.zero_grad()
                loss.backward()
                updater.step()
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + float(v)
                n_batches += 1
            record = {k: v / n_batches for k, v in sums.items()}
            record.update(step=step, epoch=epoch + 1, update_mode=updater.mode)
            self.history_.append(record)
            if self.verbose:
                logger.info("step %d epoch %d loss %.5f l1 %.5f ce %.4f scl %.4f", step, epoch + 1,
                            record["loss"], record["l1"], record["ce"], record["scl"])
        updater.zero_grad()
        net.eval()

        self.last_step_seconds_ = time.perf_counter() - t0
        self.n_steps_ = step
        for o in sorted(set(y.tolist())):
            if o not in self.seen_objects_:
                self.seen_objects_.append(o)
        self.basis_ = self._capture_basis(X_t)
        train_scores = self.decision_function(X)
        thr = float(np.quantile(train_scores, 1.0 - self.contamination))
        self.threshold_ = thr if self.threshold_ is None else max(self.threshold_, thr)
        return self

    def _capture_basis(self, X_t):
        rows = [spatial_aggregate(self._forward(X_t[i:i + 64])["latent"]) for i in range(0, len(X_t), 64)]
        snapshot = {k: v for k, v in self.network_.named_parameters()}
        return capture_basis(rows, self.latent_channels, prev=self.basis_, theta_old=snapshot)

    # -- inference -----------------------------------------------------
    @torch.no_grad()
    def _forward(self, X_t):
        return self.network_(X_t, use_gates=self.use_oasa)

    def _batched(self, X, batch=64):
        check_is_fitted(self, "network_")
        X = check_images(X, image_size=self.image_size, channels=3)
        X_t = torch.from_numpy(X)
        for i in range(0, len(X_t), batch):
            yield self._forward(X_t[i:i + batch])

    def anomaly_maps(self, X):
        """Pixel-level anomaly maps, shape ``(n, image_size, image_size)``."""
        maps = []
        for out in self._batched(X):
            tgt = self.network_.tokens_to_maps(out["target"]).numpy()
            rec = self.network_.tokens_to_maps(out["x_hat"]).numpy()
            for t, r in zip(tgt, rec):
                maps.append(anomaly_map(t, r, (self.image_size, self.image_size), self.smoothing_sigma)[0])
        return np.stack(maps)

    def decision_function(self, X):
        """Image-level anomaly score (max of the pixel map); larger is more anomalous."""
        maps = self.anomaly_maps(X)
        return maps.reshape(len(maps), -1).max(axis=1)

    def score_samples(self, X):
        """Negated anomaly score, following sklearn's "higher is more normal"."""
        return -self.decision_function(X)

    def predict(self, X):
        """1 for defective, 0 for normal."""
        return (self.decision_function(X) > self.threshold_).astype(np.int64)

    def predict_object(self, X):
        logits, _ = self.discriminate(X)
        return logits.argmax(axis=1)

    def discriminate(self, X):
        """Class logits ``(n, n_max_objects)`` and per-layer gates, each ``(n, L, d)``."""
        check_is_fitted(self, "network_")
        X = check_images(X, image_size=self.image_size, channels=3)
        with torch.no_grad():
            logits, gates = self.network_.discriminate(torch.from_numpy(X))
        return logits.numpy(), [g.numpy() for g in gates]

    def transform(self, X):
        """Spatially averaged latent, ``(n, latent_channels)``."""
        return np.concatenate([spatial_aggregate(o["latent"]).numpy() for o in self._batched(X)])

    def reconstruct(self, X):
        """``(target, reconstruction, latent)`` as arrays."""
        outs = list(self._batched(X))
        return tuple(np.concatenate([o[k].numpy() for o in outs]) for k in ("target", "x_hat", "latent"))
