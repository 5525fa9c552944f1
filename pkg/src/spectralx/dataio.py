"""Synthetic spectral scenes with controllable domain shift, and the SPXR
raster container.

Scenes are Voronoi label maps. Each pixel's spectrum is its class signature
times a smooth illumination field plus white noise. A domain shift changes
spectra only; labels are never touched.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .profiles import DESK_WAVELENGTHS

MAGIC = b"SPXR"
VERSION = 1
MAX_VALUE = 10.0


class RasterError(ValueError):
    pass


class BadMagicError(RasterError):
    pass


class BadVersionError(RasterError):
    pass


class ChecksumError(RasterError):
    pass


class TruncatedError(RasterError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    size: int = 32
    bands: int = 8
    wavelengths: Tuple[float, ...] = DESK_WAVELENGTHS
    classes: int = 4
    sites: int = 10
    signature_seed: int = 0
    cov_scale: float = 0.0
    noise_std: float = 0.05
    illumination: float = 0.15
    seed: int = 0

    def validate(self) -> "SceneConfig":
        if self.classes < 2:
            raise ValueError("need at least two classes")
        if len(self.wavelengths) != self.bands:
            raise ValueError("wavelength count must equal band count")
        if any(b <= a for a, b in zip(self.wavelengths, self.wavelengths[1:])):
            raise ValueError("wavelengths must be strictly increasing")
        if self.size < 2 or self.sites < 1:
            raise ValueError("scene needs size >= 2 and at least one Voronoi site")
        if self.noise_std < 0 or self.cov_scale < 0 or not 0 <= self.illumination < 1:
            raise ValueError("noise, covariance scale and illumination amplitude out of range")
        return self


@dataclass(frozen=True)
class DomainShift:
    kind: str = "none"          # none | regional | seasonal
    magnitude: float = 0.0
    seed: int = 1

    def __post_init__(self):
        if self.kind not in ("none", "regional", "seasonal"):
            raise ValueError(f"unknown shift kind {self.kind!r}")
        if self.magnitude < 0:
            raise ValueError("shift magnitude must be nonnegative")

    @property
    def is_identity(self) -> bool:
        return self.kind == "none" or self.magnitude == 0


@dataclass
class SpectralImage:
    values: np.ndarray            # (H, W, d) float32
    wavelengths: Tuple[float, ...]

    def __post_init__(self):
        h, w, d = self.values.shape
        if h != w:
            raise ValueError("images must be square")
        if len(self.wavelengths) != d:
            raise ValueError("wavelength count must equal band count")
        if any(b <= a for a, b in zip(self.wavelengths, self.wavelengths[1:])):
            raise ValueError("wavelengths must be strictly increasing")


@dataclass
class Dataset:
    images: np.ndarray            # (N, H, W, d) float32
    labels: Optional[np.ndarray]  # (N, H, W) int64
    wavelengths: Tuple[float, ...]
    domain: str = "source"
    classes: int = 4

    def __len__(self):
        return len(self.images)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(self, images=self.images[idx],
                       labels=None if self.labels is None else self.labels[idx])


def _unit_wavelength(wl: Sequence[float]) -> np.ndarray:
    w = np.asarray(wl, dtype=np.float64)
    return (w - w.min()) / max(w.max() - w.min(), 1e-9)


def class_signatures(cfg: SceneConfig) -> np.ndarray:
    """Smooth per-class reflectance curves, (classes, bands).

    Curves are drawn until every pair is further apart than 3 * noise_std and
    a fixed floor, so a nearest-signature rule separates clean scenes.
    """
    u = _unit_wavelength(cfg.wavelengths)
    rng = np.random.default_rng(cfg.signature_seed)
    floor = max(3.0 * cfg.noise_std, 1.0)
    for _ in range(1000):
        level = rng.uniform(1.0, 4.0, size=(cfg.classes, 1))
        slope = rng.uniform(-2.0, 2.0, size=(cfg.classes, 1))
        amp = rng.uniform(0.3, 1.5, size=(cfg.classes, 1))
        freq = rng.uniform(0.5, 2.0, size=(cfg.classes, 1))
        phase = rng.uniform(0, 2 * np.pi, size=(cfg.classes, 1))
        sig = level + slope * u + amp * np.sin(np.pi * freq * u + phase)
        sig = np.clip(sig, 0.2, 6.0)
        d = np.linalg.norm(sig[:, None] - sig[None], axis=-1)
        if np.all(d[np.triu_indices(cfg.classes, 1)] > floor):
            return sig
    raise ValueError("could not draw separable class signatures for this configuration")


def gain_curve(wavelengths: Sequence[float], shift: DomainShift) -> Tuple[np.ndarray, np.ndarray]:
    """Seasonal per-band (gain, offset); both smooth in wavelength, identity at magnitude 0."""
    u = _unit_wavelength(wavelengths)
    rng = np.random.default_rng(shift.seed)
    phase = rng.uniform(0, 2 * np.pi)
    m = shift.magnitude
    gain = 1.0 + m * 0.5 * np.sin(2 * np.pi * u + phase)
    offset = m * 0.5 * np.cos(np.pi * u + phase)
    return gain, offset


def shifted_signatures(sig: np.ndarray, wavelengths, shift: DomainShift) -> np.ndarray:
    if shift.kind != "regional" or shift.magnitude == 0:
        return sig
    u = _unit_wavelength(wavelengths)
    rng = np.random.default_rng(shift.seed)
    k = sig.shape[0]
    amp = rng.normal(0, 1.0, size=(k, 1))
    slope = rng.normal(0, 1.0, size=(k, 1))
    phase = rng.uniform(0, 2 * np.pi, size=(k, 1))
    delta = amp * np.sin(np.pi * u + phase) + slope * (u - 0.5)
    return np.clip(sig + shift.magnitude * delta, 0.1, 7.0)


def voronoi_labels(size: int, sites: int, classes: int, rng: np.random.Generator) -> np.ndarray:
    pts = rng.uniform(0, size, size=(sites, 2))
    cls = rng.integers(0, classes, size=sites)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    d = (yy[..., None] - pts[:, 0]) ** 2 + (xx[..., None] - pts[:, 1]) ** 2
    return cls[np.argmin(d, axis=-1)].astype(np.int64)


def illumination_field(size: int, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    fx, fy = rng.uniform(0.3, 1.0, size=2)
    px, py = rng.uniform(0, 2 * np.pi, size=2)
    return 1.0 + amplitude * np.sin(2 * np.pi * fx * xx + px) * np.cos(2 * np.pi * fy * yy + py)


def generate(cfg: SceneConfig, shift: Optional[DomainShift] = None,
             signatures: Optional[np.ndarray] = None) -> Tuple[SpectralImage, np.ndarray]:
    """One scene: (image, label map)."""
    cfg.validate()
    shift = shift or DomainShift()
    rng = np.random.default_rng(cfg.seed)
    sig = class_signatures(cfg) if signatures is None else signatures
    sig = shifted_signatures(sig, cfg.wavelengths, shift)
    labels = voronoi_labels(cfg.size, cfg.sites, cfg.classes, rng)
    illum = illumination_field(cfg.size, cfg.illumination, rng)
    cell_sig = sig[labels]
    if cfg.cov_scale > 0:
        cell_sig = cell_sig + cfg.cov_scale * rng.normal(size=(cfg.classes, cfg.bands))[labels]
    values = cell_sig * illum[..., None]
    if cfg.noise_std > 0:
        values = values + rng.normal(0, cfg.noise_std, size=values.shape)
    if shift.kind == "seasonal" and shift.magnitude > 0:
        gain, offset = gain_curve(cfg.wavelengths, shift)
        values = values * gain + offset
    values = np.clip(values, 0.0, MAX_VALUE).astype(np.float32)
    return SpectralImage(values, tuple(cfg.wavelengths)), labels


def scene_seeds(seed: int, n: int) -> List[int]:
    ss = np.random.SeedSequence(seed)
    return [int(c.generate_state(1)[0]) for c in ss.spawn(n)]


def make_dataset(cfg: SceneConfig, n: int, seed: int, shift: Optional[DomainShift] = None,
                 domain: str = "source") -> Dataset:
    if n < 1:
        raise ValueError("dataset must contain at least one scene")
    sig = class_signatures(cfg.validate())
    images, labels = [], []
    for s in scene_seeds(seed, n):
        img, lab = generate(replace(cfg, seed=s), shift, signatures=sig)
        images.append(img.values)
        labels.append(lab)
    return Dataset(np.stack(images), np.stack(labels), tuple(cfg.wavelengths), domain, cfg.classes)


@dataclass
class Benchmark:
    source_train: Dataset
    source_test: Dataset
    target_test: Dataset


def make_benchmark(cfg: SceneConfig = SceneConfig(), shift: DomainShift = DomainShift("seasonal", 0.5),
                   n_train: int = 64, n_test: int = 32, seed: int = 0) -> Benchmark:
    """Source train/test and a shifted target test set sharing one class structure."""
    base = np.random.SeedSequence(seed).generate_state(3)
    return Benchmark(
        source_train=make_dataset(cfg, n_train, int(base[0]), None, "source"),
        source_test=make_dataset(cfg, n_test, int(base[1]), None, "source"),
        target_test=make_dataset(cfg, n_test, int(base[2]), shift, "target"),
    )


def split(n: int, train_fraction: float = 0.8, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic seeded partition of range(n) into (train, test) index arrays."""
    n_train = int(round(train_fraction * n))
    if n_train < 1 or n_train >= n:
        raise ValueError(f"split of {n} items at {train_fraction} leaves an empty partition")
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


# ---------------------------------------------------------------- SPXR files

_HEAD = struct.Struct("<4sHIII")


def encode_raster(image: SpectralImage, labels: Optional[np.ndarray] = None) -> bytes:
    values = np.asarray(image.values, dtype="<f4")
    h, w, d = values.shape
    parts = [_HEAD.pack(MAGIC, VERSION, h, w, d),
             np.asarray(image.wavelengths, dtype="<f4").tobytes(),
             values.tobytes(order="C")]
    if labels is None:
        parts.append(b"\x00")
    else:
        labels = np.asarray(labels)
        if labels.shape != (h, w):
            raise ValueError("label map must match the image size")
        if labels.min() < 0 or labels.max() > 0xFFFF:
            raise ValueError("labels must fit in u16")
        parts += [b"\x01", labels.astype("<u2").tobytes(order="C")]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_raster(data: bytes) -> Tuple[SpectralImage, Optional[np.ndarray]]:
    if len(data) < _HEAD.size:
        if data[:4] != MAGIC[: len(data[:4])]:
            raise BadMagicError("not an SPXR file")
        raise TruncatedError("file shorter than the SPXR header")
    magic, version, h, w, d = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError("not an SPXR file")
    if version != VERSION:
        raise BadVersionError(f"unsupported SPXR version {version}")
    flag_at = _HEAD.size + 4 * d + 4 * h * w * d
    if len(data) < flag_at + 1 + 4:
        raise TruncatedError("file ends before the label flag")
    flag = data[flag_at]
    expected = flag_at + 1 + (2 * h * w if flag == 1 else 0) + 4
    if len(data) < expected:
        raise TruncatedError(f"file has {len(data)} bytes, header implies {expected}")
    (stored,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != stored:
        raise ChecksumError("CRC-32 mismatch")
    if flag not in (0, 1) or len(data) != expected:
        raise RasterError("inconsistent label section")
    off = _HEAD.size
    wl = np.frombuffer(data, "<f4", d, off)
    off += 4 * d
    values = np.frombuffer(data, "<f4", h * w * d, off).reshape(h, w, d).astype(np.float32)
    labels = None
    if flag == 1:
        labels = np.frombuffer(data, "<u2", h * w, flag_at + 1).reshape(h, w).astype(np.int64)
    return SpectralImage(values, tuple(float(x) for x in wl)), labels


def write_raster(path, image: SpectralImage, labels: Optional[np.ndarray] = None) -> None:
    Path(path).write_bytes(encode_raster(image, labels))


def read_raster(path) -> Tuple[SpectralImage, Optional[np.ndarray]]:
    return decode_raster(Path(path).read_bytes())


# ------------------------------------------------------------ dataset manifest

def write_manifest(path, entries: Iterable[Dict[str, str]]) -> None:
    """One scene per line as space separated key=value pairs."""
    lines = []
    for e in entries:
        for k, v in e.items():
            if any(c.isspace() for c in f"{k}{v}") or "=" in k:
                raise ValueError(f"manifest field {k}={v!r} contains whitespace or '='")
        lines.append(" ".join(f"{k}={v}" for k, v in e.items()))
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> List[Dict[str, str]]:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        entry = {}
        for tok in line.split():
            k, sep, v = tok.partition("=")
            if not sep:
                raise ValueError(f"{path}:{n}: expected key=value, got {tok!r}")
            entry[k] = v
        out.append(entry)
    return out


def save_dataset(root, name: str, ds: Dataset, split_name: str) -> List[Dict[str, str]]:
    root = Path(root)
    (root / name).mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(len(ds)):
        rel = f"{name}/{i:04d}.spxr"
        write_raster(root / rel, SpectralImage(ds.images[i], ds.wavelengths),
                     None if ds.labels is None else ds.labels[i])
        entries.append({"scene": rel, "domain": ds.domain, "split": split_name, "classes": str(ds.classes)})
    return entries


def load_split(root, split_name: str, domain: Optional[str] = None, classes: Optional[int] = None) -> Dataset:
    """Load every scene of one split (and optionally one domain) listed in ``root/manifest.txt``."""
    root = Path(root)
    entries = [e for e in read_manifest(root / "manifest.txt")
               if e.get("split") == split_name and (domain is None or e.get("domain") == domain)]
    if not entries:
        raise ValueError(f"no scenes for split={split_name!r} domain={domain!r} in {root}")
    images, labels, wl = [], [], None
    for e in entries:
        img, lab = read_raster(root / e["scene"])
        if wl is not None and img.wavelengths != wl:
            raise ValueError("scenes in one split must share wavelengths")
        wl = img.wavelengths
        images.append(img.values)
        labels.append(lab)
    lab_arr = None if any(l is None for l in labels) else np.stack(labels)
    if classes is None:
        classes = int(entries[0]["classes"]) if "classes" in entries[0] else int(lab_arr.max()) + 1
    n_cls = classes
    return Dataset(np.stack(images), lab_arr, wl, entries[0].get("domain", "source"), n_cls)
