"""Discriminator, object-aware attention and the reconstruction transformer."""
from __future__ import annotations

import math
from typing import List, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch import nn

from .exceptions import ContractViolation

# gates are 1 + GATE_SPAN * tanh(h); keeping the span below 1 keeps them strictly
# inside (0, 2) even where float32 tanh saturates
GATE_SPAN = 1.0 - 1e-3


def oasa_attention(gate, q, k, v, return_weights=False):
    """Scaled dot-product attention whose query is gated elementwise.

    ``softmax((gate * q) @ k^T / sqrt(d_k)) @ v`` over the last two axes;
    ``gate`` must broadcast against ``q``. With ``gate == 1`` this is plain
    attention.
    """
    d_k = q.shape[-1]
    if d_k == 0:
        raise ContractViolation("attention needs a nonzero key/query width")
    if k.shape[-1] != d_k:
        raise ContractViolation(f"query width {d_k} != key width {k.shape[-1]}")
    scores = torch.matmul(gate * q, k.transpose(-2, -1)) / math.sqrt(d_k)
    weights = torch.softmax(scores, dim=-1)
    out = torch.matmul(weights, v)
    if return_weights:
        return out, weights
    return out


class FrozenPatchEmbedding(nn.Module):
    """Seed-fixed, non-trainable patch features used as the reconstruction target.

    Stands in for a pretrained backbone: non-overlapping ``patch_size`` patches
    go through a random orthogonal projection and a tanh. With
    ``target="pixels"`` the raw patch vectors are returned instead.
    """

    def __init__(self, in_channels=3, patch_size=8, feature_dim=None, target="features",
                 gain=2.0, seed=0):
        super().__init__()
        if target not in ("features", "pixels"):
            raise ValueError(f"target must be 'features' or 'pixels', got {target!r}")
        self.patch_size = patch_size
        self.target = target
        self.gain = gain
        patch_dim = in_channels * patch_size * patch_size
        self.feature_dim = patch_dim if (feature_dim is None or target == "pixels") else feature_dim
        g = torch.Generator().manual_seed(int(seed))
        a = torch.randn(max(patch_dim, self.feature_dim), max(patch_dim, self.feature_dim), generator=g,
                        dtype=torch.float64)
        qmat, _ = torch.linalg.qr(a)
        self.register_buffer("weight", qmat[: self.feature_dim, :patch_dim].to(torch.float32).contiguous())

    def forward(self, x):
        p = self.patch_size
        patches = F.unfold(x, kernel_size=p, stride=p).transpose(1, 2)  # (B, L, C*p*p)
        if self.target == "pixels":
            return patches
        return torch.tanh(self.gain * (patches - 0.5) @ self.weight.t())


class Discriminator(nn.Module):
    """Small conv classifier; each block's output is tapped to gate one attention layer.

    Gate heads are zero-initialised so every gate equals 1 before training.
    """

    def __init__(self, n_classes=16, in_channels=3, widths=(16, 32, 64, 64), model_dim=128,
                 grid_shape=(8, 8)):
        super().__init__()
        self.grid_shape = tuple(grid_shape)
        blocks = []
        c_in = in_channels
        for w in widths:
            blocks.append(nn.Sequential(
                nn.Conv2d(c_in, w, 3, stride=2, padding=1),
                nn.GroupNorm(4, w),
                nn.GELU(),
            ))
            c_in = w
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Linear(c_in, n_classes)
        self.gate_heads = nn.ModuleList(nn.Conv2d(w, model_dim, 1) for w in widths)
        for gh in self.gate_heads:
            nn.init.zeros_(gh.weight)
            nn.init.zeros_(gh.bias)

    @property
    def n_taps(self):
        return len(self.blocks)

    def forward(self, x) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        gates = []
        h = x
        for block, gate_head in zip(self.blocks, self.gate_heads):
            h = block(h)
            tap = F.adaptive_avg_pool2d(h, self.grid_shape)
            g = 1.0 + GATE_SPAN * torch.tanh(gate_head(tap))  # (B, d, H', W')
            gates.append(g.flatten(2).transpose(1, 2))  # (B, L, d)
        logits = self.head(h.mean(dim=(2, 3)))
        return logits, gates


class GatedSelfAttention(nn.Module):
    def __init__(self, dim, n_heads):
        super().__init__()
        if dim % n_heads:
            raise ValueError(f"model dim {dim} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, gate):
        b, n, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = gate * q

        def heads(t):
            return t.reshape(b, n, self.n_heads, d // self.n_heads).transpose(1, 2)

        ones = torch.ones((), dtype=x.dtype)
        out = oasa_attention(ones, heads(q), heads(k), heads(v))
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class OASABlock(nn.Module):
    def __init__(self, dim, n_heads, mlp_ratio=2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = GatedSelfAttention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x, gate):
        x = x + self.attn(self.norm1(x), gate)
        return x + self.mlp(self.norm2(x))


class Reconstructor(nn.Module):
    """Encoder blocks -> channel bottleneck -> decoder blocks, OASA in every block.

    ``bottleneck.weight`` and ``expand`` both carry the latent channels on
    their leading axis, which is what the channel-projected update acts on.
    """

    def __init__(self, feature_dim, n_tokens, model_dim=128, latent_channels=64, n_heads=4,
                 n_encoder=2, n_decoder=2, mlp_ratio=2):
        super().__init__()
        self.latent_channels = latent_channels
        self.input_proj = nn.Linear(feature_dim, model_dim)
        self.pos_enc = nn.Parameter(0.02 * torch.randn(n_tokens, model_dim))
        self.encoder = nn.ModuleList(OASABlock(model_dim, n_heads, mlp_ratio) for _ in range(n_encoder))
        self.bottleneck = nn.Linear(model_dim, latent_channels)
        self.expand = nn.Parameter(torch.empty(latent_channels, model_dim))
        nn.init.kaiming_uniform_(self.expand.t(), a=math.sqrt(5))
        self.expand_bias = nn.Parameter(torch.zeros(model_dim))
        self.pos_dec = nn.Parameter(0.02 * torch.randn(n_tokens, model_dim))
        self.decoder = nn.ModuleList(OASABlock(model_dim, n_heads, mlp_ratio) for _ in range(n_decoder))
        self.out_norm = nn.LayerNorm(model_dim)
        self.output = nn.Linear(model_dim, feature_dim)

    @property
    def n_gated(self):
        return len(self.encoder) + len(self.decoder)

    def forward(self, tokens, gates: Sequence[torch.Tensor]):
        if len(gates) != self.n_gated:
            raise ContractViolation(f"expected {self.n_gated} gate layers, got {len(gates)}")
        h = self.input_proj(tokens) + self.pos_enc
        for block, g in zip(self.encoder, gates[: len(self.encoder)]):
            h = block(h, g)
        latent = self.bottleneck(h)  # (B, L, C_lat)
        h = latent @ self.expand + self.expand_bias + self.pos_dec
        for block, g in zip(self.decoder, gates[len(self.encoder):]):
            h = block(h, g)
        return self.output(self.out_norm(h)), latent


class IUFNetwork(nn.Module):
    """Frozen feature extractor + discriminator + gated reconstructor."""

    def __init__(self, image_size=64, in_channels=3, patch_size=8, feature_dim=None, model_dim=128,
                 latent_channels=64, n_heads=4, n_max_objects=16, target="features", embed_seed=0):
        super().__init__()
        if image_size % patch_size:
            raise ValueError("image_size must be a multiple of patch_size")
        self.grid_shape = (image_size // patch_size, image_size // patch_size)
        self.embed = FrozenPatchEmbedding(in_channels, patch_size, feature_dim, target, seed=embed_seed)
        n_tokens = self.grid_shape[0] * self.grid_shape[1]
        self.discriminator = Discriminator(n_max_objects, in_channels, model_dim=model_dim,
                                           grid_shape=self.grid_shape)
        self.reconstructor = Reconstructor(self.embed.feature_dim, n_tokens, model_dim, latent_channels,
                                           n_heads)
        if self.discriminator.n_taps != self.reconstructor.n_gated:
            raise ValueError("discriminator taps must match the number of gated layers")

    @property
    def latent_channels(self):
        return self.reconstructor.latent_channels

    def discriminate(self, x):
        return self.discriminator(x)

    def forward(self, x, use_gates=True):
        target = self.embed(x)
        logits, gates = self.discriminator(x)
        if not use_gates:
            gates = [torch.ones_like(g) for g in gates]
        x_hat, latent = self.reconstructor(target, gates)
        b, n_tok, c = latent.shape
        latent = latent.transpose(1, 2).reshape(b, c, *self.grid_shape)
        return {"target": target, "x_hat": x_hat, "latent": latent, "logits": logits, "gates": gates}

    def tokens_to_maps(self, tokens):
        """(B, L, F) -> (B, F, H', W')."""
        return tokens.transpose(1, 2).reshape(tokens.shape[0], tokens.shape[2], *self.grid_shape)


def _upsample_linear(grid, out_shape):
    """Bilinear resize with corner alignment; every grid value is hit exactly
    when the output size minus one is a multiple of the grid size minus one."""
    h, w = grid.shape
    oh, ow = out_shape
    ys = np.linspace(0.0, h - 1, oh)
    xs = np.linspace(0.0, w - 1, ow)
    rows = np.stack([np.interp(xs, np.arange(w), grid[i]) for i in range(h)])
    return np.stack([np.interp(ys, np.arange(h), rows[:, j]) for j in range(ow)], axis=1)


def anomaly_map(x_target, x_hat, out_shape=None, sigma=1.0):
    """Per-location anomaly scores from a channel-first reconstruction.

    Squared error summed over channels, Gaussian-smoothed on the feature grid,
    then bilinearly resized to ``out_shape``. Returns
    ``(pixel_scores, image_score)`` with ``image_score = pixel_scores.max()``.
    """
    x_target = np.asarray(x_target, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x_target.shape != x_hat.shape:
        raise ContractViolation(f"shape mismatch {x_target.shape} vs {x_hat.shape}")
    err = ((x_hat - x_target) ** 2).sum(axis=0) if x_target.ndim == 3 else (x_hat - x_target) ** 2
    if sigma > 0:
        err = ndimage.gaussian_filter(err, sigma=sigma, mode="nearest")
    if out_shape is not None and tuple(out_shape) != err.shape:
        err = _upsample_linear(err, out_shape)
    return err, float(err.max())
