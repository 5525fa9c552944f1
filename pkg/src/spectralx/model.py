"""Assembled model, freeze policy and parameter accounting."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Tuple

import torch
import torch.nn as nn

from .backbone import Decoder, Encoder, PatchEmbed, SegHead, LowRankLinear, mask_tokens
from .hypert import HyperT, SemanticFeatures
from .profiles import Profile

BASELINES = ("none", "freeze", "full", "lowrank")

# trainable parameter groups per (stage, baseline)
_TRAINABLE = {
    (1, "none"): {"hypert", "patch_embed", "encoder_aomoa", "decoder_aomoa", "mask_token", "patch_head"},
    (2, "none"): {"hypert", "patch_embed", "encoder_aomoa", "are", "seg_head"},
    (1, "lowrank"): {"lowrank", "mask_token", "patch_head"},
    (2, "lowrank"): {"lowrank", "seg_head"},
}


@dataclass(frozen=True)
class Variant:
    """Which components are present. Flags are cumulative: are => aomoa => hypert."""

    hypert: bool = True
    aomoa: bool = True
    are: bool = True
    baseline: str = "none"
    lowrank_rank: int = 4

    def __post_init__(self):
        if self.baseline not in BASELINES:
            raise ValueError(f"unknown baseline {self.baseline!r}")
        if self.are and not self.aomoa:
            raise ValueError("the Are-adapter requires AoMoA")
        if self.aomoa and not self.hypert:
            raise ValueError("AoMoA requires HyperT")
        if self.baseline in ("freeze", "lowrank", "full") and self.hypert:
            raise ValueError(f"baseline {self.baseline!r} uses the plain patch embedding; disable hypert")

    @classmethod
    def ablation(cls, name: str) -> "Variant":
        table = {
            "freeze": cls(hypert=False, aomoa=False, are=False, baseline="freeze"),
            "hypert": cls(hypert=True, aomoa=False, are=False),
            "aomoa": cls(hypert=True, aomoa=True, are=False),
            "are": cls(hypert=True, aomoa=True, are=True),
        }
        return table[name]


def param_group(name: str) -> str:
    if "lora_" in name:
        return "lowrank"
    if name.startswith("tokenizer."):
        return "hypert" if name.startswith("tokenizer.hypert.") else "patch_embed"
    if name.startswith("encoder."):
        if ".aomoa." in name:
            return "encoder_aomoa"
        if name.startswith("encoder.are."):
            return "are"
        return "backbone"
    if name.startswith("decoder."):
        if ".aomoa." in name:
            return "decoder_aomoa"
        if name == "decoder.mask_token":
            return "mask_token"
        if name.startswith("decoder.pred."):
            return "patch_head"
        return "decoder"
    if name.startswith("seg_head."):
        return "seg_head"
    raise KeyError(name)


class Tokenizer(nn.Module):
    """Holds either HyperT or a plain patch embedding under a stable name."""

    def __init__(self, profile: Profile, use_hypert: bool):
        super().__init__()
        tp = profile.tokenizer
        if use_hypert:
            self.hypert = HyperT(tp, profile.wavelengths or _default_wavelengths(tp.bands))
        else:
            patch = tp.image_size // tp.token_side
            self.patch = PatchEmbed(tp.bands, patch, profile.backbone.width)

    def forward(self, images) -> Tuple[torch.Tensor, Optional[SemanticFeatures]]:
        if hasattr(self, "hypert"):
            tokens, sem = self.hypert(images)
            return tokens.t_att, sem
        return self.patch(images), None


def _default_wavelengths(bands: int):
    return tuple(400.0 + 50.0 * i for i in range(bands))


class SpectralX(nn.Module):
    def __init__(self, profile: Profile, variant: Variant = Variant(), decoder: bool = True):
        super().__init__()
        tp, bp = profile.tokenizer.validate(), profile.backbone.validate()
        if 2 * tp.r != bp.width:
            raise ValueError("token width 2r must equal the backbone width")
        self.profile, self.variant = profile, variant
        self.patch = tp.image_size // tp.token_side
        self.tokenizer = Tokenizer(profile, variant.hypert)
        self.encoder = Encoder(bp, tp.tokens, with_aomoa=variant.aomoa)
        if variant.are:
            self.encoder.attach_are(tp.channels, tp.positions, tp.tokens)
        self.decoder = (Decoder(bp, tp.tokens, self.patch * self.patch * tp.bands, with_aomoa=variant.aomoa)
                        if decoder else None)
        self.seg_head = SegHead(bp.width, len(bp.sites), bp.head_width, bp.classes)
        if variant.baseline == "lowrank":
            for blk in self.encoder.blocks:
                blk.attn.qkv = LowRankLinear(blk.attn.qkv, variant.lowrank_rank)
                blk.attn.proj = LowRankLinear(blk.attn.proj, variant.lowrank_rank)

    def drop_decoder(self):
        self.decoder = None
        return self

    def reconstruct(self, images: torch.Tensor, generator=None, mask_ratio: Optional[float] = None):
        """Stage-1 forward: returns (patch predictions, hidden mask)."""
        if self.decoder is None:
            raise RuntimeError("reconstruction needs the decoder (stage 1 only)")
        ratio = self.profile.backbone.mask_ratio if mask_ratio is None else mask_ratio
        tokens, _ = self.tokenizer(images)
        _, keep, mask = mask_tokens(tokens, ratio, generator)
        enc = self.encoder.encode(tokens, stage=1, keep=keep, generator=generator)
        latent = self.encoder.norm(enc.final)
        pred = self.decoder(latent, keep, tokens.shape[1], generator=generator)
        return pred, mask

    def segment(self, images: torch.Tensor, generator=None, adapters: bool = True, stage: int = 2):
        tokens, sem = self.tokenizer(images)
        enc = self.encoder.encode(tokens, stage=stage, sem=sem, generator=generator, adapters=adapters)
        return self.seg_head(enc.sites, images.shape[1])

    def forward(self, images, generator=None):
        return self.segment(images, generator)


def trainable_groups(stage: int, variant: Variant) -> set:
    if stage == 3:
        return set()
    if variant.baseline == "full":
        groups = {"hypert", "patch_embed", "backbone", "encoder_aomoa", "are"}
        return groups | ({"decoder", "decoder_aomoa", "mask_token", "patch_head"} if stage == 1 else {"seg_head"})
    key = "lowrank" if variant.baseline == "lowrank" else "none"
    return set(_TRAINABLE[(stage, key)])


def apply_freeze(model: SpectralX, stage: int) -> Dict[str, bool]:
    """Set requires_grad per parameter for the given stage; returns name -> trainable."""
    groups = trainable_groups(stage, model.variant)
    flags = {}
    for name, p in model.named_parameters():
        p.requires_grad_(param_group(name) in groups)
        flags[name] = p.requires_grad
    return flags


@dataclass
class ParamLedger:
    modules: Dict[str, Tuple[int, int]] = field(default_factory=dict)   # group -> (trainable, frozen)

    @property
    def trainable(self) -> int:
        return sum(t for t, _ in self.modules.values())

    @property
    def frozen(self) -> int:
        return sum(f for _, f in self.modules.values())

    @property
    def total(self) -> int:
        return self.trainable + self.frozen

    @property
    def head(self) -> int:
        return self.modules.get("seg_head", (0, 0))[0]

    @property
    def adapted(self) -> int:
        """Trainable parameters excluding the segmentation head."""
        return self.trainable - self.head

    def as_dict(self) -> dict:
        return {"modules": {k: {"trainable": t, "frozen": f} for k, (t, f) in sorted(self.modules.items())},
                "trainable": self.trainable, "frozen": self.frozen, "total": self.total,
                "head": self.head, "adapted": self.adapted}


def count_parameters(model: nn.Module) -> ParamLedger:
    ledger = ParamLedger()
    for name, p in model.named_parameters():
        g = param_group(name)
        t, f = ledger.modules.get(g, (0, 0))
        if p.requires_grad:
            t += p.numel()
        else:
            f += p.numel()
        ledger.modules[g] = (t, f)
    return ledger


def build(profile: Profile, variant: Variant = Variant(), stage: int = 2, device=None) -> SpectralX:
    """Construct a model with the freeze policy of ``stage`` applied."""
    if device is not None:
        with torch.device(device):
            model = SpectralX(profile, variant, decoder=(stage == 1))
    else:
        model = SpectralX(profile, variant, decoder=(stage == 1))
    apply_freeze(model, stage)
    return model
