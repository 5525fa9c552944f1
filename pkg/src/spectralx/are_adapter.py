"""Attribute-refined adapter.

Match maps score every attribute token against every low-level semantic
feature. For each semantic feature the best-scoring token is gathered, the
gathered rows are refined (2-D conv path for spatial, 1-D conv path for
spectral), brought back to L rows and added to the tokens through ``s2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .hypert import SemanticFeatures
from .numerics import argmax, avg_pool_2d, gather_rows, interpolate_linear, scaled_dot_scores


@dataclass
class MatchMap:
    m_spa: torch.Tensor  # (B, L, S)
    m_spe: torch.Tensor  # (B, L, C)


class _Refine2d(nn.Module):
    def __init__(self, r: int):
        super().__init__()
        self.norm = nn.LayerNorm(r)
        self.conv = nn.Conv2d(r, r, 3, padding=1)
        self.bn = nn.BatchNorm2d(r)
        self.act = nn.ReLU()

    def forward(self, x):  # (B, s, s, r) -> (B, r, s, s)
        x = self.norm(x).permute(0, 3, 1, 2)
        return self.act(self.bn(self.conv(x)))


class _Refine1d(nn.Module):
    def __init__(self, r: int):
        super().__init__()
        self.norm = nn.LayerNorm(r)
        self.conv = nn.Conv1d(r, r, 3, padding=1)
        self.bn = nn.BatchNorm1d(r)
        self.act = nn.ReLU()

    def forward(self, x):  # (B, n, r) -> (B, n, r)
        x = self.norm(x).transpose(1, 2)
        return self.act(self.bn(self.conv(x))).transpose(1, 2)


class AreAdapter(nn.Module):
    def __init__(self, width: int, channels: int, positions: int, tokens: int):
        super().__init__()
        r = width // 2
        self.r, self.channels, self.positions, self.tokens = r, channels, positions, tokens
        self.grid = math.isqrt(positions)
        self.token_side = math.isqrt(tokens)
        if self.token_side ** 2 != tokens:
            raise ValueError("token count must be a perfect square")
        if self.grid ** 2 != positions:
            raise ValueError("semantic position count must be a perfect square")
        if self.grid % self.token_side:
            raise ValueError("token grid must divide the semantic grid")
        self.q_spa = nn.Linear(r, r)
        self.k_spa = nn.Linear(channels, r)
        self.q_spe = nn.Linear(r, r)
        self.k_spe = nn.Linear(positions, r)
        self.refine1 = _Refine2d(r)
        self.refine2 = _Refine1d(r)
        self.s2 = nn.Parameter(torch.zeros(2 * r))

    def match_maps(self, t_spa: torch.Tensor, t_spe: torch.Tensor, sem: SemanticFeatures) -> MatchMap:
        if t_spa.shape[-2] != self.tokens or sem.z_spa.shape[-2] != self.positions \
                or sem.z_spe.shape[-2] != self.channels:
            raise ValueError("inputs do not match the adapter profile")
        m_spa = scaled_dot_scores(self.q_spa(t_spa), self.k_spa(sem.z_spa))
        m_spe = scaled_dot_scores(self.q_spe(t_spe), self.k_spe(sem.z_spe))
        return MatchMap(m_spa=m_spa, m_spe=m_spe)

    @staticmethod
    def select(maps: MatchMap):
        """Per semantic feature, index of the highest-scoring token (lowest on ties)."""
        return argmax(maps.m_spa, axis=-2), argmax(maps.m_spe, axis=-2)

    def select_refine(self, t_spa: torch.Tensor, t_spe: torch.Tensor, maps: MatchMap):
        idx_spa, idx_spe = self.select(maps)
        b = t_spa.shape[0]
        g_spa = gather_rows(t_spa, idx_spa).reshape(b, self.grid, self.grid, self.r)
        x = avg_pool_2d(self.refine1(g_spa), self.grid // self.token_side)
        new_spa = x.flatten(2).transpose(1, 2)                      # (B, L, r)
        g_spe = gather_rows(t_spe, idx_spe)                          # (B, C, r)
        new_spe = interpolate_linear(self.refine2(g_spe), self.tokens, axis=1)
        return new_spa, new_spe

    def adjust(self, t_att: torch.Tensor, new_spa: torch.Tensor, new_spe: torch.Tensor) -> torch.Tensor:
        delta = torch.cat([new_spa, new_spe], dim=-1)
        if delta.shape != t_att.shape:
            raise ValueError(f"shape mismatch {tuple(t_att.shape)} vs {tuple(delta.shape)}")
        return t_att + self.s2 * delta

    def forward(self, t_att: torch.Tensor, sem: SemanticFeatures) -> torch.Tensor:
        t_spa, t_spe = t_att[..., : self.r], t_att[..., self.r:]
        maps = self.match_maps(t_spa, t_spe, sem)
        self.last_maps = maps
        return self.adjust(t_att, *self.select_refine(t_spa, t_spe, maps))
