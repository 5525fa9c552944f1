"""ViT-style encoder/decoder with adapter hooks, token masking and a
segmentation head.

The transformer core stands in for a pretrained remote-sensing foundation
model: it is randomly initialised (std 0.02) and kept frozen. Adapters are
attached per block; with zero-initialised scales the blocks compute exactly
what they computed before the adapters were attached.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .aomoa import AoMoA, inject
from .are_adapter import AreAdapter
from .hypert import SemanticFeatures
from .numerics import attend, sincos_embed_2d
from .profiles import BackboneProfile


def _init_vit(module: nn.Module):
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class LowRankLinear(nn.Module):
    """Frozen linear map plus a trainable rank-r delta B @ A."""

    def __init__(self, base: nn.Linear, rank: int):
        super().__init__()
        self.base = base
        self.rank = rank
        self.lora_a = nn.Parameter(torch.randn(rank, base.in_features) / math.sqrt(base.in_features))
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank))

    def forward(self, x):
        return self.base(x) + (x @ self.lora_a.t()) @ self.lora_b.t()


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        out, _ = attend(q, k, v, self.heads)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block; ``aomoa`` (if set) is added to the FFN output."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, dim * mlp_ratio)
        self.aomoa: Optional[AoMoA] = None

    def forward(self, x, generator=None, adapters: bool = True):
        x = x + self.attn(self.norm1(x))
        u = self.norm2(x)
        f = self.mlp(u)
        if adapters and self.aomoa is not None:
            f = inject(f, self.aomoa(u, generator=generator))
        return x + f


def mask_tokens(tokens: torch.Tensor, ratio: float, generator: Optional[torch.Generator] = None):
    """Uniformly hide floor(ratio * L) tokens per sample.

    Returns (visible tokens, kept indices, boolean mask with True = hidden).
    """
    if not 0 < ratio < 1:
        raise ValueError(f"mask ratio {ratio} outside (0, 1)")
    b, n, d = tokens.shape
    n_mask = int(math.floor(ratio * n))
    if n - n_mask < 1:
        raise ValueError("mask ratio leaves no visible tokens")
    noise = torch.rand(b, n, generator=generator)
    order = torch.argsort(noise, dim=1)
    keep = torch.sort(order[:, : n - n_mask], dim=1).values
    mask = torch.ones(b, n, dtype=torch.bool)
    mask.scatter_(1, keep, False)
    visible = torch.gather(tokens, 1, keep.unsqueeze(-1).expand(-1, -1, d))
    return visible, keep, mask


@dataclass
class Encoded:
    final: torch.Tensor
    sites: List[torch.Tensor] = field(default_factory=list)


class Encoder(nn.Module):
    def __init__(self, profile: BackboneProfile, tokens: int, with_aomoa: bool = True):
        super().__init__()
        self.profile = profile
        self.blocks = nn.ModuleList(Block(profile.width, profile.heads, profile.mlp_ratio)
                                    for _ in range(profile.depth))
        self.norm = nn.LayerNorm(profile.width, eps=1e-6)
        _init_vit(self)
        side = math.isqrt(tokens)
        self.register_buffer("pos_embed", sincos_embed_2d(side, profile.width, torch.float32),
                             persistent=False)
        if with_aomoa:
            for s in profile.sites:
                self.blocks[s - 1].aomoa = AoMoA(profile.width, profile.num_adapters, profile.top_k)
        self.are: Optional[nn.ModuleDict] = None

    def attach_are(self, channels: int, positions: int, tokens: int):
        self.are = nn.ModuleDict({str(s): AreAdapter(self.profile.width, channels, positions, tokens)
                                  for s in self.profile.sites})

    def encode(self, tokens: torch.Tensor, stage: int, sem: Optional[SemanticFeatures] = None,
               keep: Optional[torch.Tensor] = None, generator=None, adapters: bool = True) -> Encoded:
        """Run the blocks on (B, L, D) tokens.

        In stage 1 ``keep`` selects the visible tokens (after position
        embedding). In stages 2-3 the Are-adapter runs after each adapter site
        and needs the tokenizer's semantic features.
        """
        if stage not in (1, 2, 3):
            raise ValueError(f"invalid stage {stage}")
        use_are = adapters and self.are is not None and stage >= 2
        if use_are and sem is None:
            raise ValueError("semantic features are required for the Are-adapter in stages 2-3")
        x = tokens + self.pos_embed
        if keep is not None:
            x = torch.gather(x, 1, keep.unsqueeze(-1).expand(-1, -1, x.shape[-1]))
        out = Encoded(final=x)
        for i, blk in enumerate(self.blocks, start=1):
            x = blk(x, generator=generator, adapters=adapters)
            if i in self.profile.sites:
                if use_are:
                    x = self.are[str(i)](x, sem)
                out.sites.append(x)
        out.final = x
        return out


class Decoder(nn.Module):
    """MAE-style decoder predicting one pixel patch per token."""

    def __init__(self, profile: BackboneProfile, tokens: int, patch_values: int, with_aomoa: bool = True):
        super().__init__()
        self.profile = profile
        w = profile.decoder_width
        self.embed = nn.Linear(profile.width, w)
        self.blocks = nn.ModuleList(Block(w, profile.decoder_heads, profile.mlp_ratio)
                                    for _ in range(profile.decoder_depth))
        self.norm = nn.LayerNorm(w, eps=1e-6)
        self.pred = nn.Linear(w, patch_values)
        _init_vit(self)
        self.mask_token = nn.Parameter(torch.randn(w) * 0.02)
        self.register_buffer("pos_embed", sincos_embed_2d(math.isqrt(tokens), w, torch.float32),
                             persistent=False)
        if with_aomoa:
            for s in profile.decoder_sites:
                self.blocks[s - 1].aomoa = AoMoA(w, profile.num_adapters, profile.top_k)

    def forward(self, visible: torch.Tensor, keep: torch.Tensor, tokens: int, generator=None,
                adapters: bool = True):
        b = visible.shape[0]
        v = self.embed(visible)
        x = self.mask_token.to(v.dtype).expand(b, tokens, -1).clone()
        x = x.scatter(1, keep.unsqueeze(-1).expand(-1, -1, x.shape[-1]), v)
        x = x + self.pos_embed
        for blk in self.blocks:
            x = blk(x, generator=generator, adapters=adapters)
        return self.pred(self.norm(x))


class PatchEmbed(nn.Module):
    """Plain patch projection used by the frozen-backbone and low-rank baselines."""

    def __init__(self, bands: int, patch: int, width: int):
        super().__init__()
        self.proj = nn.Conv2d(bands, width, patch, stride=patch)

    def forward(self, image):
        return self.proj(image.permute(0, 3, 1, 2)).flatten(2).transpose(1, 2)


class SegHead(nn.Module):
    """Sum-fusion pyramid: per-site 1x1 conv, sum, 3x3 conv + ReLU, 1x1 classifier."""

    def __init__(self, width: int, n_sites: int, head_width: int, classes: int):
        super().__init__()
        if classes < 2:
            raise ValueError("need at least two classes")
        self.lateral = nn.ModuleList(nn.Conv2d(width, head_width, 1) for _ in range(n_sites))
        self.fuse = nn.Conv2d(head_width, head_width, 3, padding=1)
        self.act = nn.ReLU()
        self.cls = nn.Conv2d(head_width, classes, 1)

    def forward(self, sites: Sequence[torch.Tensor], out_size: int) -> torch.Tensor:
        """sites: list of (B, L, D) -> logits (B, classes, H, W)."""
        side = math.isqrt(sites[0].shape[1])
        fused = 0
        for feat, lat in zip(sites, self.lateral):
            grid = feat.transpose(1, 2).reshape(feat.shape[0], -1, side, side)
            y = lat(grid)
            if y.shape[-1] != side:
                y = F.interpolate(y, size=(side, side), mode="bilinear", align_corners=False)
            fused = fused + y
        y = self.cls(self.act(self.fuse(fused)))
        return F.interpolate(y, size=(out_size, out_size), mode="bilinear", align_corners=False)


def patchify(images: torch.Tensor, patch: int) -> torch.Tensor:
    """(B, H, W, d) -> (B, L, patch*patch*d), tokens in row-major grid order."""
    b, h, w, d = images.shape
    x = images.reshape(b, h // patch, patch, w // patch, patch, d)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, (h // patch) * (w // patch), patch * patch * d)


def masked_patch_loss(pred: torch.Tensor, images: torch.Tensor, mask: torch.Tensor, patch: int,
                      eps: float = 1e-6) -> torch.Tensor:
    """Mean squared error on hidden patches against per-patch normalised targets."""
    n = mask.sum()
    if int(n) == 0:
        raise ValueError("empty mask set: reconstruction loss is undefined")
    target = patchify(images, patch)
    mean = target.mean(dim=-1, keepdim=True)
    var = target.var(dim=-1, keepdim=True)
    target = (target - mean) / (var + eps).sqrt()
    per_patch = ((pred - target) ** 2).mean(dim=-1)
    return (per_patch * mask).sum() / n
