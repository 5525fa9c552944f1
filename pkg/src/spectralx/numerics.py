"""Tensor primitives shared by the tokenizer, adapters and backbone.

Everything here is a thin layer over torch; the functions exist either because
torch lacks the exact semantics we need (tie-breaking, sentinel masking,
uniform-grid interpolation) or to keep one name per operation across modules.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F


class NonFiniteError(FloatingPointError):
    """Raised when a forward value contains NaN or Inf."""


def neg_sentinel(dtype: torch.dtype) -> float:
    # most negative finite value; a real -inf would give inf - inf = nan downstream
    return torch.finfo(dtype).min


def check_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return x


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"inner dimensions disagree: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    # torch subtracts the axis max internally
    return torch.softmax(x, dim=axis)


def top_k_mask(x: torch.Tensor, k: int) -> torch.Tensor:
    """Keep the k largest entries of each row (last axis), replace the rest.

    Ties are resolved in favour of the lowest index. Dropped entries get the
    most negative finite value of the dtype so a following softmax gives them
    exactly zero weight.
    """
    n = x.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for axis of length {n}")
    if k == n:
        return x
    # stable descending sort keeps lower indices first among equal values
    order = torch.sort(x.detach(), dim=-1, descending=True, stable=True).indices
    keep = torch.zeros_like(x, dtype=torch.bool)
    keep.scatter_(-1, order[..., :k], True)
    return x.masked_fill(~keep, neg_sentinel(x.dtype))


def sincos_embed_1d(positions, dim: int, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Interleaved sine/cosine embedding, one row per position.

    Row p is [sin(p w_0), cos(p w_0), sin(p w_1), cos(p w_1), ...] with
    w_i = 10000^(-2i/dim).
    """
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    pos = torch.as_tensor(positions, dtype=torch.float64, device="cpu").reshape(-1)
    if not torch.isfinite(pos).all():
        raise ValueError("positions must be finite")
    i = torch.arange(dim // 2, dtype=torch.float64, device="cpu")
    freq = 10000.0 ** (-2.0 * i / dim)
    ang = pos[:, None] * freq[None, :]
    out = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1).reshape(len(pos), dim)
    return out.to(dtype)


def sincos_embed_2d(side: int, dim: int, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """2-D grid embedding of shape (side*side, dim), row-major over (y, x).

    The first half of the channels encodes x, the second half y.
    """
    if side < 1:
        raise ValueError("grid side must be >= 1")
    if dim % 2:
        raise ValueError(f"embedding dim must be divisible by 2, got {dim}")
    half = dim // 2
    if half % 2:
        raise ValueError(f"each half of the embedding must be even, got dim={dim}")
    ys, xs = torch.meshgrid(torch.arange(side, device="cpu"), torch.arange(side, device="cpu"),
                            indexing="ij")
    ex = sincos_embed_1d(xs.reshape(-1), half, dtype)
    ey = sincos_embed_1d(ys.reshape(-1), half, dtype)
    return torch.cat([ex, ey], dim=1)


def interpolate_linear(x: torch.Tensor, new_len: int, axis: int = 0) -> torch.Tensor:
    """Linear resampling along ``axis`` on a uniform grid with fixed endpoints."""
    if new_len < 1:
        raise ValueError("new_len must be >= 1")
    old_len = x.shape[axis]
    if new_len == old_len:
        return x
    if old_len < 2:
        raise ValueError("source axis needs at least two samples")
    x = x.movedim(axis, 0)
    pos = torch.linspace(0.0, old_len - 1, new_len, dtype=torch.float64, device=x.device)
    lo = pos.floor().long().clamp(max=old_len - 2)
    frac = (pos - lo).to(x.dtype)
    frac = frac.reshape(-1, *([1] * (x.dim() - 1)))
    out = x[lo] * (1 - frac) + x[lo + 1] * frac
    return out.movedim(0, axis)


def gaussian_sample(shape, generator: Optional[torch.Generator], dtype=torch.float64) -> torch.Tensor:
    return torch.randn(shape, generator=generator, dtype=dtype)


def scaled_dot_scores(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    return (q @ k.transpose(-2, -1)) / math.sqrt(q.shape[-1])


def attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int,
           allowed: Optional[torch.Tensor] = None):
    """Multi-head scaled dot-product attention on already projected inputs.

    q: (..., Nq, D), k/v: (..., Nk, D). ``allowed`` is an optional (Nq, Nk)
    boolean mask. Returns (output, weights) where weights has shape
    (..., heads, Nq, Nk).
    """
    d = q.shape[-1]
    if d % heads:
        raise ValueError(f"dim {d} not divisible by {heads} heads")
    dh = d // heads

    def split(t):
        return t.reshape(*t.shape[:-1], heads, dh).transpose(-3, -2)

    qh, kh, vh = split(q), split(k), split(v)
    scores = scaled_dot_scores(qh, kh)
    if allowed is not None:
        scores = scores.masked_fill(~allowed, neg_sentinel(scores.dtype))
    w = softmax(scores, axis=-1)
    out = (w @ vh).transpose(-3, -2).reshape(*q.shape[:-1], d)
    return out, w


class Attention(nn.Module):
    """Self or cross attention with separate q/k/v/out projections."""

    def __init__(self, dim: int, heads: int, kv_dim: Optional[int] = None, out_dim: Optional[int] = None):
        super().__init__()
        kv_dim = dim if kv_dim is None else kv_dim
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim, dim)
        self.v = nn.Linear(kv_dim, dim)
        self.proj = nn.Linear(dim, dim if out_dim is None else out_dim)
        self.last_weights: Optional[torch.Tensor] = None

    def forward(self, x: torch.Tensor, context: Optional[torch.Tensor] = None,
                allowed: Optional[torch.Tensor] = None) -> torch.Tensor:
        context = x if context is None else context
        out, w = attend(self.q(x), self.k(context), self.v(context), self.heads, allowed)
        self.last_weights = w.detach()
        return self.proj(out)


def cell_mask(grid: int, side: int) -> torch.Tensor:
    """(side*side, grid*grid) mask: query cell i may see the grid positions inside it."""
    if grid % side:
        raise ValueError(f"token side {side} does not divide grid {grid}")
    f = grid // side
    ys, xs = torch.meshgrid(torch.arange(grid), torch.arange(grid), indexing="ij")
    owner = ((ys // f) * side + xs // f).reshape(-1)
    return owner[None, :] == torch.arange(side * side)[:, None]


def window_partition(x: torch.Tensor, window: int) -> torch.Tensor:
    """(B, s, s, C) -> (B * n_windows, window*window, C)."""
    b, h, w, c = x.shape
    if h % window or w % window:
        raise ValueError(f"window {window} does not divide grid {h}x{w}")
    x = x.reshape(b, h // window, window, w // window, window, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window, c)


def window_merge(x: torch.Tensor, window: int, b: int, h: int, w: int) -> torch.Tensor:
    c = x.shape[-1]
    x = x.reshape(b, h // window, w // window, window, window, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)


def windowed_attention(attn: Attention, grid: torch.Tensor, window: int) -> torch.Tensor:
    """Self-attention restricted to non-overlapping windows of a (B, s, s, C) grid."""
    b, h, w, _ = grid.shape
    out = attn(window_partition(grid, window))
    return window_merge(out, window, b, h, w)


def avg_pool_2d(x: torch.Tensor, factor: int) -> torch.Tensor:
    return F.avg_pool2d(x, factor)


def gelu(x):
    return F.gelu(x)


def relu(x):
    return F.relu(x)


def softplus(x):
    return F.softplus(x)


def layer_norm(x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    return F.layer_norm(x, x.shape[-1:], eps=eps)


def argmax(x: torch.Tensor, axis: int) -> torch.Tensor:
    # torch returns the first maximal index on ties
    return torch.argmax(x, dim=axis)


def gather_rows(x: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    """x: (..., L, D), index: (..., M) -> (..., M, D)."""
    return torch.gather(x, -2, index.unsqueeze(-1).expand(*index.shape, x.shape[-1]))


def count(params: Sequence[torch.Tensor]) -> int:
    return sum(p.numel() for p in params)
