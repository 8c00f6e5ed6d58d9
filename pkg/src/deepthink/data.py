"""Image datasets, Gaussian-noise corruption and rotation labelling.

Pixels are float64 in [0, 1], laid out [N, C, H, W]. Two on-disk formats are
supported:

* the canonical CIFAR binary layout (CIFAR-10: 1 label byte + 3072 pixel
  bytes per record; CIFAR-100: coarse label, fine label, 3072 pixel bytes);
* ``DTC1`` raw arrays for pre-corrupted test sets: magic ``b"DTC1"``, u32
  N, H, W, C (little endian), N*H*W*C pixel bytes in NHWC order, then N u16
  labels.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigError, ContractError, FormatError

SEVERITY_SIGMA = {1: 0.04, 2: 0.06, 3: 0.08, 4: 0.09, 5: 0.10}

CIFAR_PIXELS = 3 * 32 * 32
_CIFAR_LAYOUT = {
    # variant: (label bytes, number of classes for the stored label)
    "cifar10": (1, 10),
    "cifar100": (2, 100),
}
DTC_MAGIC = b"DTC1"


@dataclass
class ImageBatch:
    pixels: np.ndarray
    labels_main: np.ndarray
    labels_aux: Optional[np.ndarray] = None
    labels_coarse: Optional[np.ndarray] = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        self.labels_main = np.asarray(self.labels_main, dtype=np.int64).reshape(-1)
        if self.labels_aux is None:
            self.labels_aux = np.zeros(len(self.labels_main), dtype=np.int64)
        else:
            self.labels_aux = np.asarray(self.labels_aux, dtype=np.int64).reshape(-1)
        if self.pixels.ndim != 4 or self.pixels.shape[0] != len(self.labels_main):
            raise ContractError(
                f"pixels {self.pixels.shape} do not match {len(self.labels_main)} labels"
            )

    def __len__(self) -> int:
        return self.pixels.shape[0]

    def subset(self, idx) -> "ImageBatch":
        idx = np.asarray(idx, dtype=np.int64)
        coarse = None if self.labels_coarse is None else self.labels_coarse[idx]
        return ImageBatch(self.pixels[idx], self.labels_main[idx], self.labels_aux[idx], coarse)

    def batches(self, batch_size: int) -> Iterator["ImageBatch"]:
        for lo in range(0, len(self), batch_size):
            yield self.subset(np.arange(lo, min(lo + batch_size, len(self))))


def empty_batch(channels: int = 3, size: int = 32) -> ImageBatch:
    return ImageBatch(np.zeros((0, channels, size, size)), np.zeros(0, dtype=np.int64))


# ---------------------------------------------------------------------------
# CIFAR binary


def load_cifar_binary(path, variant: str = "cifar10") -> ImageBatch:
    if variant not in _CIFAR_LAYOUT:
        raise ConfigError(f"unknown CIFAR variant {variant!r}")
    n_label, n_classes = _CIFAR_LAYOUT[variant]
    record = n_label + CIFAR_PIXELS
    raw = Path(path).read_bytes()
    if len(raw) % record:
        offset = len(raw) - len(raw) % record
        raise FormatError(
            f"{path}: truncated record at byte offset {offset} "
            f"({len(raw) - offset} of {record} bytes present)"
        )
    n = len(raw) // record
    if n == 0:
        return empty_batch()
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(n, record)
    labels = arr[:, n_label - 1].astype(np.int64)
    bad = np.nonzero(labels >= n_classes)[0]
    if bad.size:
        i = int(bad[0])
        raise FormatError(
            f"{path}: label {labels[i]} out of range at byte offset {i * record + n_label - 1}"
        )
    coarse = arr[:, 0].astype(np.int64) if n_label == 2 else None
    if coarse is not None and coarse.max() >= 20:
        i = int(np.argmax(coarse >= 20))
        raise FormatError(f"{path}: coarse label {coarse[i]} out of range at byte offset {i * record}")
    pixels = arr[:, n_label:].reshape(n, 3, 32, 32) / 255.0
    return ImageBatch(pixels, labels, labels_coarse=coarse)


def _to_bytes(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)


def write_cifar_binary(path, batch: ImageBatch, variant: str = "cifar10") -> None:
    n_label, _ = _CIFAR_LAYOUT[variant]
    if batch.pixels.shape[1:] != (3, 32, 32):
        raise ContractError(f"CIFAR records hold 3x32x32 images, got {batch.pixels.shape[1:]}")
    n = len(batch)
    out = np.empty((n, n_label + CIFAR_PIXELS), dtype=np.uint8)
    if n_label == 2:
        coarse = batch.labels_coarse if batch.labels_coarse is not None else np.zeros(n, dtype=np.int64)
        out[:, 0] = coarse
    out[:, n_label - 1] = batch.labels_main
    out[:, n_label:] = _to_bytes(batch.pixels).reshape(n, -1)
    Path(path).write_bytes(out.tobytes())


# ---------------------------------------------------------------------------
# DTC1 raw arrays


def write_dtc1(path, batch: ImageBatch) -> None:
    n, c, h, w = batch.pixels.shape
    header = DTC_MAGIC + struct.pack("<4I", n, h, w, c)
    body = _to_bytes(batch.pixels).transpose(0, 2, 3, 1).tobytes()
    labels = batch.labels_main.astype("<u2").tobytes()
    Path(path).write_bytes(header + body + labels)


def load_dtc1(path) -> ImageBatch:
    raw = Path(path).read_bytes()
    if raw[:4] != DTC_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {DTC_MAGIC!r}")
    if len(raw) < 20:
        raise FormatError(f"{path}: truncated header")
    n, h, w, c = struct.unpack_from("<4I", raw, 4)
    n_pix = n * h * w * c
    expected = 20 + n_pix + 2 * n
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for N={n}, got {len(raw)}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=n_pix, offset=20).reshape(n, h, w, c)
    labels = np.frombuffer(raw, dtype="<u2", count=n, offset=20 + n_pix).astype(np.int64)
    return ImageBatch(pixels.transpose(0, 3, 1, 2) / 255.0, labels)


def load_dataset(path, fmt: str) -> ImageBatch:
    if fmt in _CIFAR_LAYOUT:
        return load_cifar_binary(path, fmt)
    if fmt == "dtc1":
        return load_dtc1(path)
    raise ConfigError(f"unknown dataset format {fmt!r}")


# ---------------------------------------------------------------------------
# synthetic shapes

SHAPES = ("disk", "cross", "ring", "bar", "tee", "corner")


@dataclass
class SynthSpec:
    """Parameters of the synthetic shape dataset.

    ``margin`` is the brightness of the shape above the background;
    ``gradient`` is the amplitude of a top-bright background ramp, which makes
    image orientation (and therefore rotation) recoverable.
    """

    num_classes: int = 2
    num_samples: int = 256
    size: int = 16
    channels: int = 3
    margin: float = 0.5
    gradient: float = 0.3
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(SHAPES):
            raise ConfigError(f"num_classes must be in [1, {len(SHAPES)}]")
        if self.size < 8:
            raise ConfigError("synthetic images need size >= 8")


def _shape_mask(kind: str, yy, xx, cy, cx, r, thick) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy**2 + dx**2 <= r**2
    if kind == "cross":
        return ((np.abs(dy) <= thick) & (np.abs(dx) <= r)) | ((np.abs(dx) <= thick) & (np.abs(dy) <= r))
    if kind == "ring":
        d = np.maximum(np.abs(dy), np.abs(dx))
        return (d <= r) & (d >= r - thick * 1.5)
    if kind == "bar":
        return (np.abs(dy) <= thick) & (np.abs(dx) <= r)
    if kind == "tee":
        top = (np.abs(dy + r * 0.8) <= thick) & (np.abs(dx) <= r)
        stem = (np.abs(dx) <= thick) & (dy >= -r) & (dy <= r)
        return top | stem
    if kind == "corner":
        vert = (np.abs(dx + r * 0.8) <= thick) & (np.abs(dy) <= r)
        foot = (np.abs(dy - r * 0.8) <= thick) & (np.abs(dx) <= r)
        return vert | foot
    raise ConfigError(f"unknown shape {kind!r}")


def synth_dataset(spec: SynthSpec) -> ImageBatch:
    rng = np.random.default_rng(spec.seed)
    s = spec.size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    labels = np.arange(spec.num_samples) % spec.num_classes
    rng.shuffle(labels)
    ramp = spec.gradient * (1.0 - yy / (s - 1))
    pixels = np.empty((spec.num_samples, spec.channels, s, s))
    for i, lab in enumerate(labels):
        cy, cx = (s - 1) / 2 + rng.uniform(-s / 8, s / 8, size=2)
        r = s * rng.uniform(0.22, 0.32)
        thick = max(0.6, s * rng.uniform(0.05, 0.08))
        mask = _shape_mask(SHAPES[lab], yy, xx, cy, cx, r, thick)
        base = rng.uniform(0.15, 0.35)
        tint = rng.uniform(0.7, 1.0, size=spec.channels)
        img = base + ramp + spec.margin * mask
        if spec.noise:
            img = img + rng.normal(0.0, spec.noise, size=(s, s))
        pixels[i] = tint[:, None, None] * img[None]
    return ImageBatch(np.clip(pixels, 0.0, 1.0), labels)


# ---------------------------------------------------------------------------
# corruption and rotation


@dataclass
class CorruptionSpec:
    kind: str = "gaussian_noise"
    severity: int = 1
    sigma: Optional[float] = None

    def __post_init__(self):
        if self.kind != "gaussian_noise":
            raise ConfigError(f"only gaussian_noise is generated natively, got {self.kind!r}")
        if self.sigma is None:
            if self.severity == 0:
                self.sigma = 0.0
            elif self.severity in SEVERITY_SIGMA:
                self.sigma = SEVERITY_SIGMA[self.severity]
            else:
                raise ConfigError(f"severity must be 0..5, got {self.severity}")
        if self.sigma < 0:
            raise ConfigError(f"sigma must be non-negative, got {self.sigma}")


def corrupt(batch: ImageBatch, spec: CorruptionSpec, seed: int) -> ImageBatch:
    """clip(x + N(0, sigma^2)); sample i draws from its own seeded substream."""
    if spec.sigma == 0 or len(batch) == 0:
        return replace(batch, pixels=batch.pixels.copy())
    shape = batch.pixels.shape[1:]
    noise = np.stack([np.random.default_rng([seed, i]).normal(0.0, spec.sigma, size=shape) for i in range(len(batch))])
    return replace(batch, pixels=np.clip(batch.pixels + noise, 0.0, 1.0))


def rotate(pixels: np.ndarray, k: int) -> np.ndarray:
    """Rotate [..., H, W] images by k * 90 degrees counter-clockwise."""
    return np.rot90(pixels, k, axes=(-2, -1))


def rotate_and_label(batch: ImageBatch, seed: int, ks=None) -> ImageBatch:
    """Rotate each image by a uniformly drawn multiple of 90 degrees; the multiple is the aux label."""
    n = len(batch)
    if n and batch.pixels.shape[2] != batch.pixels.shape[3]:
        raise ContractError(f"rotation needs square images, got {batch.pixels.shape[2:]}")
    ks = np.random.default_rng(seed).integers(0, 4, size=n) if ks is None else np.asarray(ks, dtype=np.int64)
    out = np.empty_like(batch.pixels)
    for i, k in enumerate(ks):
        out[i] = rotate(batch.pixels[i], int(k))
    return replace(batch, pixels=out, labels_aux=ks)


def split_train_val(batch: ImageBatch, fraction: float = 0.8, seed: int = 0) -> tuple[ImageBatch, ImageBatch]:
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"fraction must be in (0, 1), got {fraction}")
    perm = np.random.default_rng(seed).permutation(len(batch))
    n_train = int(round(fraction * len(batch)))
    return batch.subset(perm[:n_train]), batch.subset(perm[n_train:])
