"""Attribute-oriented mixture of adapters.

Token features are split into a spatial and a spectral half. Each half is
down-projected, routed through its own noisy top-k gate over a shared bank of
small MLP adapters, up-projected, and the concatenation is scaled by ``s1``.
The result is added to a transformer block's FFN output.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .numerics import softmax, softplus, top_k_mask

SPA, SPE = 0, 1
_ATTR = {"spa": SPA, "spe": SPE, SPA: SPA, SPE: SPE}


@dataclass
class RoutingDecision:
    weights: torch.Tensor   # (N, n_adapters), exactly k nonzero per row
    selected: torch.Tensor  # (N, k) adapter indices, ordered by gate value

    def support(self) -> torch.Tensor:
        return self.weights > 0


class Adapter(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class AoMoA(nn.Module):
    def __init__(self, width: int, num_adapters: int = 4, top_k: int = 2):
        super().__init__()
        if width % 2:
            raise ValueError("token width must be even")
        r = width // 2
        if r % 4:
            raise ValueError("half width must be divisible by 4")
        if not 1 <= top_k <= num_adapters:
            raise ValueError(f"top_k={top_k} invalid for {num_adapters} adapters")
        h = r // 4
        self.r, self.hidden = r, h
        self.num_adapters, self.top_k = num_adapters, top_k
        self.w_down = nn.Parameter(torch.randn(r, h) * 0.02)
        self.w_up = nn.Parameter(torch.randn(h, r) * 0.02)
        # zero gates: uniform routing at start
        self.w_gate = nn.Parameter(torch.zeros(2, h, num_adapters))
        self.w_noise = nn.Parameter(torch.zeros(2, h, num_adapters))
        self.adapters = nn.ModuleList(Adapter(h) for _ in range(num_adapters))
        # zero scale: the wrapped block is unchanged at insertion
        self.s1 = nn.Parameter(torch.zeros(2 * r))
        self.last_routing: dict = {}

    def route(self, tokens: torch.Tensor, attr, training: Optional[bool] = None,
              generator: Optional[torch.Generator] = None) -> RoutingDecision:
        """Noisy top-k gating for a (N, r/4) block of down-projected tokens."""
        a = _ATTR[attr]
        training = self.training if training is None else training
        logits = tokens @ self.w_gate[a]
        if training:
            eps = torch.randn(logits.shape, generator=generator, dtype=logits.dtype)
            logits = logits + eps * softplus(tokens @ self.w_noise[a])
        masked = top_k_mask(logits, self.top_k)
        weights = softmax(masked, axis=-1)
        selected = torch.sort(masked.detach(), dim=-1, descending=True, stable=True).indices[:, : self.top_k]
        return RoutingDecision(weights=weights, selected=selected)

    def mix(self, tokens: torch.Tensor, decision: RoutingDecision) -> torch.Tensor:
        """Weighted sum of adapter outputs; adapters only see the rows routed to them."""
        out = torch.zeros_like(tokens)
        w = decision.weights
        for i, adapter in enumerate(self.adapters):
            rows = torch.nonzero(decision.selected == i, as_tuple=True)[0]
            if rows.numel() == 0:
                continue
            y = adapter(tokens[rows]) * w[rows, i: i + 1]
            out = out.index_add(0, rows, y)
        return out

    def _branch(self, half: torch.Tensor, attr, generator) -> torch.Tensor:
        lead = half.shape[:-1]
        x = (half @ self.w_down).reshape(-1, self.hidden)
        decision = self.route(x, attr, generator=generator)
        self.last_routing[attr] = decision
        return (self.mix(x, decision) @ self.w_up).reshape(*lead, self.r)

    def forward(self, t_att: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        if t_att.shape[-1] != 2 * self.r:
            raise ValueError(f"expected {2 * self.r} columns, got {t_att.shape[-1]}")
        spa = self._branch(t_att[..., : self.r], "spa", generator)
        spe = self._branch(t_att[..., self.r:], "spe", generator)
        return torch.cat([spa, spe], dim=-1) * self.s1


def inject(ffn_out: torch.Tensor, f_aomoa: torch.Tensor) -> torch.Tensor:
    if ffn_out.shape != f_aomoa.shape:
        raise ValueError(f"shape mismatch {tuple(ffn_out.shape)} vs {tuple(f_aomoa.shape)}")
    return ffn_out + f_aomoa
