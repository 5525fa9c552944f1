"""Hyper tokenizer: turns a spectral image into attribute tokens.

Pipeline: strided CNN stem -> local (windowed) attention over the spatial grid
and global attention over channel maps -> grid / wavelength position
embeddings -> learned queries cross-attend to both feature sets -> FFN.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn

from .numerics import (Attention, cell_mask, interpolate_linear, sincos_embed_1d, sincos_embed_2d,
                       windowed_attention)
from .profiles import TokenizerProfile


@dataclass
class SemanticFeatures:
    z_spa: torch.Tensor  # (B, S, C)
    z_spe: torch.Tensor  # (B, C, S)


@dataclass
class AttributeTokens:
    t_att: torch.Tensor  # (B, L, 2r)

    @property
    def r(self) -> int:
        return self.t_att.shape[-1] // 2

    @property
    def t_spa(self) -> torch.Tensor:
        return self.t_att[..., : self.r]

    @property
    def t_spe(self) -> torch.Tensor:
        return self.t_att[..., self.r:]


def spectral_pos_embed(wavelengths: Sequence[float], rows: int, dim: int,
                       dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Sine-cosine embedding of band wavelengths, resampled to ``rows`` rows."""
    if len(wavelengths) < 2:
        raise ValueError("need at least two bands to build a spectral embedding")
    emb = sincos_embed_1d(wavelengths, dim, dtype)
    return interpolate_linear(emb, rows, axis=0)


def spatial_pos_embed(side: int, dim: int, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    return sincos_embed_2d(side, dim, dtype)


class ConvStem(nn.Module):
    def __init__(self, in_ch: int, widths: Sequence[int], kernel: int = 3):
        super().__init__()
        layers = []
        for w in widths:
            layers += [nn.Conv2d(in_ch, w, kernel, stride=2, padding=kernel // 2),
                       nn.BatchNorm2d(w), nn.GELU()]
            in_ch = w
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class HyperT(nn.Module):
    def __init__(self, profile: TokenizerProfile, wavelengths: Sequence[float]):
        super().__init__()
        p = profile.validate()
        if len(wavelengths) != p.bands:
            raise ValueError(f"{len(wavelengths)} wavelengths for {p.bands} bands")
        if any(b <= a for a, b in zip(wavelengths, wavelengths[1:])):
            raise ValueError("wavelengths must be strictly increasing")
        self.profile = p
        C, S, r = p.channels, p.positions, p.r

        self.stem = ConvStem(p.bands, p.cnn_widths, p.cnn_kernel)
        self.norm_spa = nn.LayerNorm(C)
        self.local_attn = Attention(C, p.heads)
        self.norm_spe = nn.LayerNorm(S)
        self.global_attn = Attention(S, p.heads)

        self.queries = nn.Parameter(torch.randn(p.tokens, 2 * r) * 0.02)
        self.spa_cross = Attention(r, p.heads, kv_dim=C)
        self.spe_align = nn.Linear(S, r)
        self.spe_cross = Attention(r, p.heads)
        self.ffn = nn.Sequential(nn.Linear(2 * r, 8 * r), nn.GELU(), nn.Linear(8 * r, 2 * r))

        self.wavelengths = tuple(float(w) for w in wavelengths)
        self.register_buffer("pe_spa", spatial_pos_embed(p.grid, C, torch.float32), persistent=False)
        self.register_buffer("pe_spe", spectral_pos_embed(wavelengths, C, S, torch.float32),
                             persistent=False)
        # each spatial query reads only its own cell of the feature grid
        self.register_buffer("spa_allowed", cell_mask(p.grid, p.token_side), persistent=False)

    def downsample(self, image: torch.Tensor) -> torch.Tensor:
        """(B, H, W, d) channels-last image -> (B, s, s, C) feature grid."""
        p = self.profile
        if image.shape[-1] != p.bands or image.shape[1] != p.image_size or image.shape[2] != p.image_size:
            raise ValueError(f"image shape {tuple(image.shape)} does not match the tokenizer profile")
        return self.stem(image.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)

    def perceive(self, grid: torch.Tensor) -> SemanticFeatures:
        b, s, _, c = grid.shape
        z_spa = grid + windowed_attention(self.local_attn, self.norm_spa(grid), self.profile.window)
        z_spa = z_spa.reshape(b, s * s, c)
        chan = grid.reshape(b, s * s, c).transpose(1, 2)          # (B, C, S)
        z_spe = chan + self.global_attn(self.norm_spe(chan))
        return SemanticFeatures(z_spa=z_spa, z_spe=z_spe)

    def match(self, sem: SemanticFeatures, pe_spa: Optional[torch.Tensor] = None,
              pe_spe: Optional[torch.Tensor] = None) -> AttributeTokens:
        pe_spa = self.pe_spa if pe_spa is None else pe_spa
        pe_spe = self.pe_spe if pe_spe is None else pe_spe
        b = sem.z_spa.shape[0]
        r = self.profile.r
        q = self.queries.unsqueeze(0).expand(b, -1, -1)
        spa = self.spa_cross(q[..., :r], sem.z_spa + pe_spa, self.spa_allowed)
        spe_kv = self.spe_align(sem.z_spe + pe_spe)
        spe = self.spe_cross(q[..., r:], spe_kv)
        return AttributeTokens(self.ffn(torch.cat([spa, spe], dim=-1)))

    def attention_maps(self):
        return {name: m.last_weights for name, m in
                (("local", self.local_attn), ("global", self.global_attn),
                 ("spa_cross", self.spa_cross), ("spe_cross", self.spe_cross))}

    def forward(self, image: torch.Tensor):
        sem = self.perceive(self.downsample(image))
        return self.match(sem), sem
