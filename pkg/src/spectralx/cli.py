"""Command-line entry point.

    spectralx gen     --out DATA                      synthetic benchmark on disk
    spectralx adapt   --data DATA --out RUN           masked-reconstruction stage
    spectralx train   --data DATA --out RUN           segmentation stage
    spectralx infer   --data DATA --weights W --out O label maps for unseen scenes
    spectralx eval    --data DATA --maps M --out O    metrics on saved maps
    spectralx ablate  --data DATA --out O             component x stage-1 matrix
    spectralx report  --out O [DIR ...]               table over run manifests

Every verb accepts ``--config FILE`` and trailing ``section.key=value``
overrides. ``SPECTRALX_SEED`` overrides ``run.seed`` unless set explicitly.
Exit codes: 1 usage, 2 config, 3 data, 4 non-finite numerics.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from . import checkpoint, config as cfgmod
from .checkpoint import CheckpointError
from .config import Config, ConfigError
from .dataio import RasterError, load_split, make_benchmark, save_dataset, write_manifest
from .metrics import ConfusionMatrix, format_report
from .model import build
from .numerics import NonFiniteError
from .pipeline import (ABLATION_ROWS, DataError, RunConfig, StageResult, ablation_matrix, evaluate, ledger,
                       make_profile, median_table, run_manifest, run_stage1, run_stage2, run_stage3,
                       write_run_manifest)

log = logging.getLogger("spectralx")

EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3, 4

# fixed display palette, one RGB triple per class index (mod 24)
PALETTE = np.array([
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48), (145, 30, 180),
    (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195), (128, 128, 0), (255, 215, 180),
    (0, 0, 128), (128, 128, 128), (255, 255, 255), (0, 0, 0), (100, 149, 237), (189, 183, 107),
], dtype=np.uint8)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# ------------------------------------------------------------------ rasters

def write_ppm(path, labels: np.ndarray) -> None:
    h, w = labels.shape
    rgb = PALETTE[np.asarray(labels) % len(PALETTE)]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())


def write_pgm(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 255:
        raise DataError("label map does not fit an 8-bit PGM")
    h, w = labels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + labels.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5" or parts[3] != b"255":
        raise DataError(f"{path}: not an 8-bit binary PGM")
    w, h = int(parts[1]), int(parts[2])
    body = parts[4]
    if len(body) != w * h:
        raise DataError(f"{path}: expected {w * h} pixels, found {len(body)}")
    return np.frombuffer(body, np.uint8).reshape(h, w).astype(np.int64)


# ------------------------------------------------------------------ weights

def _meta(run: RunConfig, stage: int, profile) -> dict:
    return {"config": asdict(run), "stage": stage, "wavelengths": list(profile.wavelengths),
            "classes": profile.backbone.classes, "bands": profile.tokenizer.bands}


def _load_model(path, stage: int):
    tensors, meta = checkpoint.load(path)
    try:
        run = RunConfig(**meta["config"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: weight manifest lacks a run config") from exc
    from .profiles import get_profile
    profile = get_profile(run.profile).with_data(meta["bands"], tuple(meta["wavelengths"]), meta["classes"])
    model = build(profile, run.variant, stage=stage)
    checkpoint.load_into(model, tensors, skip_prefixes=() if stage == 1 else ("decoder.",))
    return model, run, meta


# ------------------------------------------------------------------ verbs

def _seed_from_env() -> Optional[int]:
    raw = os.environ.get("SPECTRALX_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"SPECTRALX_SEED must be an integer, got {raw!r}") from None


def cmd_gen(cfg: Config, args) -> int:
    out = Path(args.out)
    d = cfg.data
    bench = make_benchmark(cfg.scene, cfg.shift, n_train=d.n_train, n_test=d.n_test, seed=d.seed)
    entries = []
    entries += save_dataset(out, "source_train", bench.source_train, "train")
    entries += save_dataset(out, "source_test", bench.source_test, "test")
    entries += save_dataset(out, "target_test", bench.target_test, "test")
    write_manifest(out / "manifest.txt", entries)
    (out / "config.txt").write_text(cfgmod.dump(cfg))
    print(f"wrote {len(entries)} scenes to {out}")
    return 0


def _load(data, split: str, domain: str):
    try:
        return load_split(data, split, domain)
    except FileNotFoundError as exc:
        raise DataError(f"missing dataset file: {exc.filename}") from None


def _stage1(cfg: RunConfig, data, weights: Optional[str]) -> Optional[StageResult]:
    if not cfg.stage1_enabled:
        return None
    if weights:
        model, _, _ = _load_model(weights, stage=1)
        return StageResult(model)
    return run_stage1(cfg, data)


def cmd_adapt(cfg: Config, args) -> int:
    run = cfg.run
    train = _load(args.data, "train", "source")
    res = run_stage1(run, train)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save(res.model, out / "stage1.spxw", _meta(run, 1, res.model.profile))
    path = write_run_manifest(out, run_manifest(run, ledger(res.model, 1), losses1=res.losses,
                                                extra={"verb": "adapt"}))
    print(f"stage 1 final loss {res.losses[-1]:.6f} ({path.name})" if res.losses else f"wrote {path.name}")
    return 0


def cmd_train(cfg: Config, args) -> int:
    run = cfg.run
    train = _load(args.data, "train", "source")
    s1 = _stage1(run, train, args.stage1)
    res = run_stage2(run, train, s1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save(res.model, out / "stage2.spxw", _meta(run, 2, res.model.profile))
    metrics = {}
    try:
        metrics["source"] = evaluate(res.model, _load(args.data, "test", "source")).report()
    except ValueError:
        pass
    path = write_run_manifest(out, run_manifest(run, ledger(res.model, 2),
                                                losses1=s1.losses if s1 else (), losses2=res.losses,
                                                metrics=metrics, extra={"verb": "train"}))
    print(f"stage 2 final loss {res.losses[-1]:.6f} ({path.name})" if res.losses else f"wrote {path.name}")
    return 0


def cmd_infer(cfg: Config, args) -> int:
    model, run, _ = _load_model(args.weights, stage=3)
    target = _load(args.data, args.split, args.domain)
    maps, rep = run_stage3(model, target)
    out = Path(args.out)
    (out / "maps").mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(maps):
        write_pgm(out / "maps" / f"{i:04d}.pgm", m)
        write_ppm(out / "maps" / f"{i:04d}.ppm", m)
    path = write_run_manifest(out, run_manifest(run, metrics={"target": rep} if rep else {},
                                                extra={"verb": "infer", "scenes": len(maps)}))
    msg = f"wrote {len(maps)} maps"
    if rep:
        msg += f", target mIoU {rep['miou']:.4f}"
    print(f"{msg} ({path.name})")
    return 0


def cmd_eval(cfg: Config, args) -> int:
    truth = _load(args.data, args.split, args.domain)
    if truth.labels is None:
        raise DataError("evaluation needs labelled scenes")
    maps_dir = Path(args.maps)
    files = sorted(maps_dir.glob("*.pgm"))
    if len(files) != len(truth):
        raise DataError(f"{len(files)} maps in {maps_dir} for {len(truth)} scenes")
    cm = ConfusionMatrix(truth.classes)
    try:
        for f, lab in zip(files, truth.labels):
            cm.accumulate(lab, read_pgm(f))
    except ValueError as exc:
        raise DataError(str(exc)) from None
    text = format_report(cm, all_classes=args.all_classes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.txt").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_ablate(cfg: Config, args) -> int:
    from .dataio import Benchmark
    bench = Benchmark(_load(args.data, "train", "source"), _load(args.data, "test", "source"),
                      _load(args.data, "test", "target"))
    seeds = cfg.ablate.seeds
    rows = ablation_matrix(bench, seeds, cfg.run)
    med_t, med_s = median_table(rows, "target"), median_table(rows, "source")
    out = Path(args.out)
    for stage1 in (False, True):
        for name in ABLATION_ROWS:
            cell = [r for r in rows if r["row"] == name and r["stage1"] == stage1]
            run = replace(cell[0]["config"], seed=cfg.run.seed)
            per_seed = [{"seed": r["seed"], "source": r["source"], "target": r["target"],
                         "stage1_losses": r["stage1_losses"], "stage2_losses": r["stage2_losses"]}
                        for r in cell]
            write_run_manifest(out, run_manifest(
                run, cell[0]["ledger"],
                metrics={"source_miou_median": med_s[(name, stage1)],
                         "target_miou_median": med_t[(name, stage1)]},
                extra={"verb": "ablate", "row": name, "stage1": stage1, "seeds": list(seeds),
                       "per_seed": per_seed}))
    sys.stdout.write(_ablation_table(med_s, med_t))
    return 0


def _ablation_table(med_s, med_t) -> str:
    lines = [f"{'row':<8} {'stage1':<6} {'source':>8} {'target':>8}"]
    for stage1 in (False, True):
        for name in ABLATION_ROWS:
            lines.append(f"{name:<8} {('w/' if stage1 else 'w/o'):<6} "
                         f"{med_s[(name, stage1)]:>8.4f} {med_t[(name, stage1)]:>8.4f}")
    return "\n".join(lines) + "\n"


def _miou(m: dict, key: str) -> Optional[float]:
    metrics = m.get("metrics") or {}
    if f"{key}_miou_median" in metrics:
        return metrics[f"{key}_miou_median"]
    rep = metrics.get(key)
    return rep.get("miou") if isinstance(rep, dict) else None


def cmd_report(cfg: Config, args) -> int:
    dirs = [Path(d) for d in (args.dirs or [args.out])]
    manifests = []
    for d in dirs:
        for p in sorted(d.glob("run-*.json")):
            try:
                manifests.append(json.loads(p.read_text()))
            except json.JSONDecodeError as exc:
                raise DataError(f"{p}: {exc}") from None
    if not manifests:
        raise DataError("no run manifests found")
    manifests.sort(key=lambda m: m["config_hash"])
    lines = [f"{'hash':<12} {'verb':<6} {'hypert':<6} {'aomoa':<6} {'are':<5} {'stage1':<6} "
             f"{'trainable':>10} {'source':>8} {'target':>8}"]
    for m in manifests:
        c = m["config"]
        led = m.get("ledger") or {}
        src, tgt = _miou(m, "source"), _miou(m, "target")
        lines.append(f"{m['config_hash']:<12} {m.get('verb', '-'):<6} {str(c['hypert']):<6} "
                     f"{str(c['aomoa']):<6} {str(c['are']):<5} {str(c['stage1_enabled']):<6} "
                     f"{led.get('adapted', '-'):>10} "
                     f"{'-' if src is None else f'{src:.4f}':>8} {'-' if tgt is None else f'{tgt:.4f}':>8}")
    text = "\n".join(lines) + "\n"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(text)
    sys.stdout.write(text)
    return 0


VERBS = {"gen": cmd_gen, "adapt": cmd_adapt, "train": cmd_train, "infer": cmd_infer,
         "eval": cmd_eval, "ablate": cmd_ablate, "report": cmd_report}


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spectralx", description="Spectral PEFT desk-scale pipeline")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", parser_class=_Parser, required=True)

    def verb(name, help_, data=True):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="key=value config file")
        s.add_argument("--out", required=True, help="output directory")
        if data:
            s.add_argument("--data", required=True, help="dataset root holding manifest.txt")
        s.add_argument("overrides", nargs="*", metavar="section.key=value")
        return s

    verb("gen", "generate the synthetic benchmark", data=False)
    verb("adapt", "stage 1: masked-reconstruction adaptation")
    s = verb("train", "stage 2: segmentation fine-tuning")
    s.add_argument("--stage1", help="stage-1 weights (default: run stage 1 inline when enabled)")
    for name, help_ in (("infer", "stage 3: label maps for unseen scenes"), ("eval", "metrics on saved maps")):
        s = verb(name, help_)
        s.add_argument("--split", default="test")
        s.add_argument("--domain", default="target")
        if name == "infer":
            s.add_argument("--weights", required=True)
        else:
            s.add_argument("--maps", required=True)
            s.add_argument("--all-classes", action="store_true", help="average over every class")
    verb("ablate", "component ablation matrix over seeds")
    s = verb("report", "aggregate run manifests", data=False)
    s.add_argument("--dirs", nargs="*", help="directories holding run-*.json (default: --out)")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:   # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        bad = [o for o in args.overrides if "=" not in o]
        if bad:
            raise UsageError(f"{parser.format_usage()}overrides must be section.key=value, got {bad[0]!r}")
        cfg = cfgmod.load(args.config, args.overrides, seed=_seed_from_env())
        return VERBS[args.verb](cfg, args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, RasterError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
