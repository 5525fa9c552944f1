"""Model geometry for the two supported scales."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Tuple

# Sentinel-2 MSI centre wavelengths (nm), as used by DFC2020
DFC2020_WAVELENGTHS = (443.0, 490.0, 560.0, 665.0, 705.0, 740.0, 783.0,
                       842.0, 865.0, 945.0, 1375.0, 1610.0, 2190.0)
DESK_WAVELENGTHS = (490.0, 560.0, 665.0, 705.0, 740.0, 842.0, 1610.0, 2190.0)


@dataclass(frozen=True)
class TokenizerProfile:
    image_size: int
    bands: int
    downsample: int          # total stride of the CNN stem
    channels: int            # C
    tokens: int              # L
    r: int                   # half token width
    heads: int
    window: int
    cnn_kernel: int = 3

    @property
    def grid(self) -> int:
        return self.image_size // self.downsample

    @property
    def positions(self) -> int:  # S
        return self.grid ** 2

    @property
    def token_side(self) -> int:
        return math.isqrt(self.tokens)

    @property
    def cnn_widths(self) -> Tuple[int, ...]:
        n = int(round(math.log2(self.downsample)))
        return tuple(self.channels // 2 ** (n - 1 - i) for i in range(n))

    def validate(self) -> "TokenizerProfile":
        if self.image_size % self.downsample:
            raise ValueError("image size not divisible by the CNN stride")
        if 2 ** int(round(math.log2(self.downsample))) != self.downsample:
            raise ValueError("downsample factor must be a power of two")
        if self.token_side ** 2 != self.tokens:
            raise ValueError("token count must be a perfect square")
        if self.grid % self.window:
            raise ValueError("window size must divide the feature grid")
        if self.grid % self.token_side:
            raise ValueError("token grid must divide the feature grid")
        return self


@dataclass(frozen=True)
class BackboneProfile:
    depth: int
    width: int               # 2r
    heads: int
    mlp_ratio: int
    sites: Tuple[int, ...]   # 1-based block indices carrying adapters
    decoder_depth: int
    decoder_width: int
    decoder_heads: int
    decoder_sites: Tuple[int, ...]
    mask_ratio: float = 0.75
    classes: int = 4
    head_width: int = 32
    num_adapters: int = 4
    top_k: int = 2

    def validate(self) -> "BackboneProfile":
        if not 0 < self.mask_ratio < 1:
            raise ValueError("mask ratio must lie in (0, 1)")
        if self.classes < 2:
            raise ValueError("need at least two classes")
        if any(not 1 <= s <= self.depth for s in self.sites):
            raise ValueError("encoder site outside the block range")
        if any(not 1 <= s <= self.decoder_depth for s in self.decoder_sites):
            raise ValueError("decoder site outside the block range")
        if self.top_k > self.num_adapters:
            raise ValueError("top_k cannot exceed the adapter count")
        return self


@dataclass(frozen=True)
class Profile:
    name: str
    tokenizer: TokenizerProfile
    backbone: BackboneProfile
    wavelengths: Tuple[float, ...] = field(default=())

    def with_classes(self, classes: int) -> "Profile":
        return replace(self, backbone=replace(self.backbone, classes=classes))

    def with_data(self, bands: int, wavelengths, classes: int) -> "Profile":
        tok = replace(self.tokenizer, bands=bands)
        bb = replace(self.backbone, classes=classes)
        return replace(self, tokenizer=tok, backbone=bb, wavelengths=tuple(float(w) for w in wavelengths))


DESK = Profile(
    name="desk",
    tokenizer=TokenizerProfile(image_size=32, bands=8, downsample=4, channels=32,
                               tokens=16, r=32, heads=2, window=4),
    backbone=BackboneProfile(depth=4, width=64, heads=4, mlp_ratio=4, sites=(2, 4),
                             decoder_depth=2, decoder_width=32, decoder_heads=2,
                             decoder_sites=(1, 2), classes=4, head_width=32),
    wavelengths=DESK_WAVELENGTHS,
)

FULL = Profile(
    name="full",
    tokenizer=TokenizerProfile(image_size=224, bands=13, downsample=8, channels=512,
                               tokens=196, r=512, heads=8, window=7),
    backbone=BackboneProfile(depth=24, width=1024, heads=16, mlp_ratio=4, sites=(6, 12, 18, 24),
                             decoder_depth=4, decoder_width=512, decoder_heads=16,
                             decoder_sites=(1, 2, 3, 4), classes=8, head_width=256),
    wavelengths=DFC2020_WAVELENGTHS,
)

PROFILES = {"desk": DESK, "full": FULL}


def get_profile(name: str) -> Profile:
    try:
        p = PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None
    p.tokenizer.validate()
    p.backbone.validate()
    return p
