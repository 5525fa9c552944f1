"""Three-stage training driver: masked-reconstruction adaptation, segmentation
fine-tuning, and inference on unseen domains; plus the ablation matrix."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint
from .backbone import masked_patch_loss
from .dataio import Benchmark, Dataset
from .metrics import ConfusionMatrix
from .model import ParamLedger, SpectralX, Variant, apply_freeze, build, count_parameters
from .numerics import NonFiniteError
from .profiles import Profile, get_profile

log = logging.getLogger(__name__)

ABLATION_ROWS = ("freeze", "hypert", "aomoa", "are")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    profile: str = "desk"
    seed: int = 0
    epochs1: int = 30
    epochs2: int = 30
    batch_size: int = 8
    lr1: float = 1e-3
    lr2: float = 1e-3
    hypert: bool = True
    aomoa: bool = True
    are: bool = True
    stage1_enabled: bool = True
    baseline: str = "none"
    lowrank_rank: int = 4
    val_every: int = 0

    def __post_init__(self):
        self.variant  # validates flag monotonicity
        if self.epochs1 < 0 or self.epochs2 < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch size >= 1")

    @property
    def variant(self) -> Variant:
        return Variant(hypert=self.hypert, aomoa=self.aomoa, are=self.are,
                       baseline=self.baseline, lowrank_rank=self.lowrank_rank)

    @classmethod
    def ablation(cls, row: str, stage1: bool, **kw) -> "RunConfig":
        v = Variant.ablation(row)
        return cls(hypert=v.hypert, aomoa=v.aomoa, are=v.are, baseline=v.baseline,
                   stage1_enabled=stage1, **kw)

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class StageResult:
    model: SpectralX
    losses: List[float] = field(default_factory=list)
    val_miou: List[Tuple[int, float]] = field(default_factory=list)


def make_profile(cfg: RunConfig, data: Dataset) -> Profile:
    prof = get_profile(cfg.profile)
    size = data.images.shape[1]
    if size != prof.tokenizer.image_size:
        raise DataError(f"scene size {size} does not match profile image size {prof.tokenizer.image_size}")
    return prof.with_data(data.images.shape[-1], data.wavelengths, data.classes)


def _tensor(a: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a)).to(dtype)


def _batches(n: int, batch_size: int, gen: torch.Generator):
    perm = torch.randperm(n, generator=gen)
    for i in range(0, n, batch_size):
        yield perm[i: i + batch_size]


def _optimizer(model, lr: float, total_steps: int):
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(total_steps, 1))
    return opt, sched


def _finite(loss: torch.Tensor, where: str):
    if not torch.isfinite(loss):
        raise NonFiniteError(f"non-finite loss during {where}")


def build_model(cfg: RunConfig, profile: Profile, stage: int) -> SpectralX:
    torch.manual_seed(cfg.seed)
    return build(profile, cfg.variant, stage=stage)


def run_stage1(cfg: RunConfig, data: Dataset) -> StageResult:
    """Masked reconstruction with everything but the stage-1 trainable set frozen."""
    if len(data) == 0:
        raise DataError("empty dataset")
    profile = make_profile(cfg, data)
    model = build_model(cfg, profile, stage=1)
    images = _tensor(data.images)
    steps = cfg.epochs1 * math.ceil(len(data) / cfg.batch_size)
    opt, sched = _optimizer(model, cfg.lr1, steps)
    gen = torch.Generator().manual_seed(cfg.seed * 1000 + 1)
    result = StageResult(model)
    model.train()
    for epoch in range(cfg.epochs1):
        total, count = 0.0, 0
        for idx in _batches(len(data), cfg.batch_size, gen):
            pred, mask = model.reconstruct(images[idx], generator=gen)
            loss = masked_patch_loss(pred, images[idx], mask, model.patch)
            _finite(loss, f"stage 1 epoch {epoch + 1}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        result.losses.append(total / count)
        log.info("stage1 epoch %d loss %.4f", epoch + 1, result.losses[-1])
    return result


def _check_labels(data: Dataset, classes: int):
    if data.labels is None:
        raise DataError("training data has no labels")
    if data.labels.min() < 0 or data.labels.max() >= classes:
        raise DataError(f"class labels outside [0, {classes})")


def transfer_stage1(model: SpectralX, stage1_model: SpectralX) -> list:
    state = {k: v for k, v in stage1_model.state_dict().items() if v.is_floating_point()}
    return checkpoint.load_into(model, state, skip_prefixes=("decoder.", "seg_head."))


def run_stage2(cfg: RunConfig, data: Dataset, stage1: Optional[StageResult] = None,
               val: Optional[Dataset] = None) -> StageResult:
    """Per-pixel cross-entropy training of the stage-2 trainable set."""
    if len(data) == 0:
        raise DataError("empty dataset")
    profile = make_profile(cfg, data)
    _check_labels(data, profile.backbone.classes)
    model = build_model(cfg, profile, stage=2)
    if cfg.stage1_enabled:
        if stage1 is None:
            raise ValueError("stage1_enabled requires stage-1 weights")
        transfer_stage1(model, stage1.model)
    images, labels = _tensor(data.images), torch.from_numpy(data.labels).long()
    steps = cfg.epochs2 * math.ceil(len(data) / cfg.batch_size)
    opt, sched = _optimizer(model, cfg.lr2, steps)
    gen = torch.Generator().manual_seed(cfg.seed * 1000 + 2)
    result = StageResult(model)
    for epoch in range(cfg.epochs2):
        model.train()
        total, count = 0.0, 0
        for idx in _batches(len(data), cfg.batch_size, gen):
            logits = model.segment(images[idx], generator=gen)
            loss = F.cross_entropy(logits, labels[idx])
            _finite(loss, f"stage 2 epoch {epoch + 1}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        result.losses.append(total / count)
        if val is not None and cfg.val_every and (epoch + 1) % cfg.val_every == 0:
            result.val_miou.append((epoch + 1, evaluate(model, val).miou()))
        log.info("stage2 epoch %d loss %.4f", epoch + 1, result.losses[-1])
    model.eval()
    return result


@torch.no_grad()
def predict(model: SpectralX, images: np.ndarray, batch: int = 16) -> np.ndarray:
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for i in range(0, len(images), batch):
        logits = model.segment(_tensor(images[i: i + batch], dtype), stage=3)
        out.append(logits.argmax(dim=1).numpy())
    return np.concatenate(out).astype(np.int64)


def evaluate(model: SpectralX, data: Dataset) -> ConfusionMatrix:
    pred = predict(model, data.images)
    return ConfusionMatrix(model.profile.backbone.classes).accumulate(data.labels, pred)


def check_compatible(model: SpectralX, data: Dataset):
    tp = model.profile.tokenizer
    if data.images.shape[-1] != tp.bands:
        raise DataError(f"target has {data.images.shape[-1]} bands, model expects {tp.bands}")
    if model.profile.wavelengths and not np.allclose(data.wavelengths, model.profile.wavelengths, atol=1e-3):
        raise DataError("target wavelengths differ from the trained tokenizer's")
    if data.images.shape[1] != tp.image_size:
        raise DataError("target scene size differs from the trained model")


def run_stage3(model: SpectralX, target: Dataset) -> Tuple[np.ndarray, Optional[dict]]:
    """Deterministic inference on unseen scenes; metrics only when labels exist."""
    check_compatible(model, target)
    maps = predict(model, target.images)
    if target.labels is None:
        return maps, None
    cm = ConfusionMatrix(model.profile.backbone.classes).accumulate(target.labels, maps)
    return maps, cm.report()


def ledger(model: SpectralX, stage: int) -> ParamLedger:
    apply_freeze(model, stage)
    return count_parameters(model)


def lowrank_baseline(cfg: RunConfig, data: Dataset, val: Optional[Dataset] = None) -> StageResult:
    cfg = replace(cfg, hypert=False, aomoa=False, are=False, baseline="lowrank", stage1_enabled=False)
    return run_stage2(cfg, data, val=val)


def run_manifest(cfg: RunConfig, led: Optional[ParamLedger] = None, losses1=(), losses2=(),
                 metrics: Optional[dict] = None, extra: Optional[dict] = None) -> dict:
    return {"config": asdict(cfg), "config_hash": cfg.config_hash(), "seed": cfg.seed,
            "ledger": led.as_dict() if led else None, "stage1_losses": list(losses1),
            "stage2_losses": list(losses2), "metrics": metrics or {}, **(extra or {})}


def write_run_manifest(out_dir, manifest: dict) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tag = f"{manifest['verb']}-" if manifest.get("verb") else ""
    path = out / f"run-{tag}{manifest['config_hash']}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _stage1_key(cfg: RunConfig) -> tuple:
    # the Are-adapter does not take part in stage 1, so its stage-1 run is the AoMoA one
    return (cfg.profile, cfg.seed, cfg.hypert, cfg.aomoa, cfg.baseline, cfg.epochs1, cfg.batch_size, cfg.lr1)


def ablation_matrix(bench: Benchmark, seeds: Sequence[int] = (0, 1, 2), base: Optional[RunConfig] = None,
                    stage1_cache: Optional[dict] = None) -> List[dict]:
    """Ablation matrix: 4 component rows x {with, without} stage 1, per seed."""
    base = base or RunConfig()
    cache = {} if stage1_cache is None else stage1_cache
    rows = []
    for seed in seeds:
        for stage1 in (False, True):
            for row in ABLATION_ROWS:
                cfg = RunConfig.ablation(row, stage1, **{k: v for k, v in asdict(base).items()
                                                        if k not in ("hypert", "aomoa", "are", "baseline",
                                                                     "stage1_enabled", "seed")}, seed=seed)
                s1 = None
                if stage1:
                    key = _stage1_key(cfg)
                    if key not in cache:
                        cache[key] = run_stage1(cfg, bench.source_train)
                    s1 = cache[key]
                res = run_stage2(cfg, bench.source_train, s1)
                src = evaluate(res.model, bench.source_test).report()
                _, tgt = run_stage3(res.model, bench.target_test)
                rows.append({"row": row, "stage1": stage1, "seed": seed, "config": cfg,
                             "source": src, "target": tgt,
                             "ledger": ledger(res.model, 2),
                             "stage1_losses": s1.losses if s1 else [], "stage2_losses": res.losses})
                log.info("ablation %s stage1=%s seed=%d target mIoU %.4f", row, stage1, seed, tgt["miou"])
    return rows


def median_table(rows: List[dict], key: str = "target") -> Dict[Tuple[str, bool], float]:
    cells: Dict[Tuple[str, bool], List[float]] = {}
    for r in rows:
        cells.setdefault((r["row"], r["stage1"]), []).append(r[key]["miou"])
    return {k: float(np.median(v)) for k, v in cells.items()}
