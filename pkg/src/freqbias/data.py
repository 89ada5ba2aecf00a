"""CIFAR-10 binary ingestion, a frequency-structured synthetic dataset, and batching."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigError, FormatError, IoError
from .spectral import lowpass, make_filter

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]
DATA_ROOT_ENV = "FREQBIAS_DATA_ROOT"


@dataclass
class Dataset:
    images: np.ndarray  # N x C x H x W, float32 in [0, 1]
    labels: np.ndarray  # N, int64
    classes: int = 10
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise FormatError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise FormatError(f"labels outside [0, {self.classes})")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise FormatError("image values outside [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.classes, self.split)

    def head(self, n: int) -> "Dataset":
        return self.subset(np.arange(min(n, len(self))))


# ---------------------------------------------------------------------------
# CIFAR-10
# ---------------------------------------------------------------------------

def decode_cifar_records(raw: bytes) -> tuple[np.ndarray, np.ndarray]:
    if len(raw) % CIFAR_RECORD:
        raise FormatError(f"file length {len(raw)} is not a multiple of the {CIFAR_RECORD}-byte record")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise FormatError(f"label byte {labels.max()} outside [0, 9]")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def balanced_indices(labels: np.ndarray, limit: int, classes: int) -> np.ndarray:
    """First ``limit // classes`` samples of each class in file order; remainder goes to the lowest classes."""
    per = np.full(classes, limit // classes)
    per[: limit % classes] += 1
    picked = []
    for c in range(classes):
        idx = np.flatnonzero(labels == c)
        if len(idx) < per[c]:
            raise ConfigError(f"class {c} has {len(idx)} samples, {per[c]} requested")
        picked.append(idx[: per[c]])
    return np.sort(np.concatenate(picked))


def resolve_data_root(path: Optional[str | os.PathLike]) -> Path:
    if path is None:
        path = os.environ.get(DATA_ROOT_ENV)
    if path is None:
        raise IoError(f"no data directory given and ${DATA_ROOT_ENV} is unset")
    p = Path(path)
    nested = p / "cifar-10-batches-bin"
    return nested if nested.is_dir() else p


def load_cifar10(path, split: str = "train", limit: Optional[int] = None) -> Dataset:
    root = resolve_data_root(path)
    names = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    if split not in ("train", "test"):
        raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
    xs, ys = [], []
    for name in names:
        f = root / name
        try:
            raw = f.read_bytes()
        except FileNotFoundError:
            raise IoError(f"missing CIFAR-10 file {f}") from None
        x, y = decode_cifar_records(raw)
        xs.append(x)
        ys.append(y)
    images = np.concatenate(xs)
    labels = np.concatenate(ys)
    if limit is not None:
        keep = balanced_indices(labels, limit, 10)
        images, labels = images[keep], labels[keep]
    return Dataset(images, labels, 10, split)


# ---------------------------------------------------------------------------
# synthetic
# ---------------------------------------------------------------------------

@dataclass
class SynthSpec:
    """Each class is a fixed 2-D sinusoid whose wavenumber lies in that class's radial band.

    Samples draw a random phase, plus optional low-frequency clutter (a smooth
    random field, standing in for natural image content) and white noise.
    """
    classes: int = 10
    per_class: int = 100
    size: int = 16
    channels: int = 3
    bands: Optional[list] = None  # per class [lo, hi) radial wavenumber
    amplitude: float = 0.2
    noise: float = 0.05
    clutter: float = 0.0
    seed: int = 0
    split: str = "train"

    def resolved_bands(self) -> list[list[float]]:
        nyq = self.size / 2
        if self.bands is None:
            edges = np.linspace(1.0, nyq - 0.5, self.classes + 1)
            return [[float(edges[i]), float(edges[i + 1])] for i in range(self.classes)]
        return [list(map(float, b)) for b in self.bands]


def class_wavenumbers(spec: SynthSpec) -> list[tuple[int, int]]:
    """Pick one integer wavenumber per class inside its band; depends on the seed only."""
    bands = spec.resolved_bands()
    if len(bands) != spec.classes:
        raise ConfigError(f"{len(bands)} bands given for {spec.classes} classes")
    nyq = spec.size / 2
    rng = np.random.default_rng([spec.seed, 7919])
    ks = np.arange(-(spec.size // 2) + 1, spec.size // 2)
    k1, k2 = np.meshgrid(ks, ks, indexing="ij")
    radius = np.hypot(k1, k2)
    chosen = []
    for c, (lo, hi) in enumerate(bands):
        if hi > nyq or lo < 0 or lo >= hi:
            raise ConfigError(f"band {c} = [{lo}, {hi}) must satisfy 0 <= lo < hi <= Nyquist ({nyq})")
        # half-plane only: (k1, k2) and (-k1, -k2) are the same real pattern
        ok = (radius >= lo) & (radius < hi) & (radius > 0) & ((k1 > 0) | ((k1 == 0) & (k2 > 0)))
        cand = np.argwhere(ok)
        if len(cand) == 0:
            raise ConfigError(f"band {c} = [{lo}, {hi}) contains no integer wavenumber")
        i, j = cand[rng.integers(len(cand))]
        chosen.append((int(k1[i, j]), int(k2[i, j])))
    if len(set(chosen)) != len(chosen):
        raise ConfigError("two classes drew the same wavenumber; widen or separate the bands")
    return chosen


def synth_dataset(spec: SynthSpec) -> Dataset:
    if spec.classes < 2 or spec.per_class < 1 or spec.size < 4:
        raise ConfigError("synthetic spec needs classes >= 2, per_class >= 1, size >= 4")
    waves = class_wavenumbers(spec)
    rng = np.random.default_rng([spec.seed, 0 if spec.split == "train" else 1])
    n, s = spec.classes * spec.per_class, spec.size
    labels = np.repeat(np.arange(spec.classes), spec.per_class)
    a = np.arange(s)
    phases = rng.uniform(0, 2 * np.pi, n)
    images = np.empty((n, spec.channels, s, s))
    for i, c in enumerate(labels):
        k1, k2 = waves[c]
        wave = np.cos(2 * np.pi * (k1 * a[:, None] + k2 * a[None, :]) / s + phases[i])
        images[i] = 0.5 + spec.amplitude * wave
    if spec.clutter > 0:
        field_ = lowpass(rng.standard_normal(images.shape), make_filter(s, s, 0.1))
        field_ /= np.abs(field_).max(axis=(1, 2, 3), keepdims=True) + 1e-12
        images += spec.clutter * field_
    if spec.noise > 0:
        images += rng.normal(0.0, spec.noise, images.shape)
    images = np.clip(images, 0.0, 1.0)
    order = rng.permutation(n)
    return Dataset(images[order], labels[order], spec.classes, spec.split)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def batches(d: Dataset, batch_size: int, shuffle_seed: Optional[int] = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (images, labels) batches; the last partial batch is kept."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    idx = np.arange(len(d))
    if shuffle_seed is not None:
        idx = np.random.default_rng(shuffle_seed).permutation(len(d))
    for start in range(0, len(d), batch_size):
        sel = idx[start:start + batch_size]
        yield d.images[sel], d.labels[sel]


def augment(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random crop after zero padding, then random horizontal flip."""
    n, _, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oy = rng.integers(0, 2 * pad + 1, n)
    ox = rng.integers(0, 2 * pad + 1, n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(x)
    for i in range(n):
        crop = xp[i, :, oy[i]:oy[i] + h, ox[i]:ox[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out
