"""Datasets: a deterministic synthetic local-texture task, a CIFAR-10 binary
loader, and flip/crop augmentation.

The synthetic task draws short oriented bar segments; the class is the bar
orientation (class c uses angle c * pi / classes), so the label is decidable
from local texture alone.  Images are single-channel floats in [0, 1] and
every sample is a pure function of (spec, seed).

CIFAR-10 is read from the standard binary batches: records of 1 label byte
followed by 3072 pixel bytes (channel-planar R, G, B, each 32 x 32
row-major), scaled to [0, 1].
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .fileio import FormatError, atomic_write_bytes
from .numerics import Rng

CIFAR_SIDE = 32
CIFAR_RECORD = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE  # 3073
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]

SYNTH_MAGIC = b"SYNDS1"
SYNTH_VERSION = 1


@dataclass
class Sample:
    image: np.ndarray  # (C, S, S) float64 in [0, 1]
    label: int


@dataclass
class SynthSpec:
    """Geometry and noise knobs for the oriented-bars task.

    ``bars`` segments at the class orientation plus ``distractors`` segments
    at uniformly random orientations; the label signal is the dominant local
    texture direction.  With ``dot_spacing`` > 0 each segment is drawn as a
    row of dots instead of a solid stroke, so one small patch carries no
    orientation information by itself and neighbors must be combined.
    """

    size: int = 32
    classes: int = 4
    bars: int = 5
    distractors: int = 0
    scatter_dots: int = 0
    bar_len: float = 12.0
    bar_width: float = 1.8
    brightness: float = 1.0
    dot_spacing: float = 5.0
    angle_noise: float = 0.06
    pixel_noise: float = 0.10
    seed: int = 0

    def validate(self) -> None:
        if self.size < 4 or self.classes < 2 or self.bars < 1:
            raise ValueError("size, classes, bars must be at least 4, 2, 1")
        if self.distractors < 0 or self.scatter_dots < 0:
            raise ValueError("distractors and scatter_dots must be >= 0")
        if self.bar_len <= 0 or self.bar_width <= 0 or self.brightness <= 0:
            raise ValueError("bar geometry and brightness must be positive")
        if self.angle_noise < 0 or self.pixel_noise < 0 or self.dot_spacing < 0:
            raise ValueError("noise levels and dot spacing must be >= 0")

    def orientation(self, label: int) -> float:
        return label * np.pi / self.classes


def _stamp_bar(image: np.ndarray, cx: float, cy: float, theta: float,
               length: float, width: float, brightness: float,
               dot_spacing: float = 0.0) -> None:
    """Add an anti-aliased segment (Gaussian cross-profile) in place; with
    dot_spacing > 0 only dots at that interval along the segment are drawn."""
    s = image.shape[0]
    ux, uy = np.cos(theta), np.sin(theta)
    half = length / 2.0
    ys, xs = np.mgrid[0:s, 0:s].astype(np.float64)
    rx = xs - cx
    ry = ys - cy
    t = np.clip(rx * ux + ry * uy, -half, half)
    if dot_spacing > 0.0:
        t = np.clip(np.rint(t / dot_spacing) * dot_spacing, -half, half)
    dx = rx - t * ux
    dy = ry - t * uy
    d2 = dx * dx + dy * dy
    image += brightness * np.exp(-d2 / (2.0 * (width / 2.0) ** 2))


def synth_generate(spec: SynthSpec, n: int) -> list[Sample]:
    """n samples, fully deterministic in (spec, seed)."""
    spec.validate()
    if n < 0:
        raise ValueError(f"sample count must be >= 0, got {n}")
    rng = Rng(spec.seed)
    s = spec.size
    margin = min(s / 4.0, spec.bar_len / 2.0)
    samples = []
    for _ in range(n):
        label = rng.randint(spec.classes)
        img = np.zeros((s, s))
        for bar in range(spec.bars + spec.distractors):
            cx = margin + rng.uniform() * (s - 2 * margin)
            cy = margin + rng.uniform() * (s - 2 * margin)
            if bar < spec.bars:
                theta = spec.orientation(label) + rng.normal(0.0, spec.angle_noise)
            else:
                theta = rng.uniform() * np.pi
            _stamp_bar(img, cx, cy, theta, spec.bar_len, spec.bar_width,
                       spec.brightness, spec.dot_spacing)
        for _ in range(spec.scatter_dots):
            # isolated dots: locally orientation-free clutter
            cx = margin + rng.uniform() * (s - 2 * margin)
            cy = margin + rng.uniform() * (s - 2 * margin)
            _stamp_bar(img, cx, cy, 0.0, 1e-9, spec.bar_width, spec.brightness)
        img += rng.normals(s * s, 0.0, spec.pixel_noise).reshape(s, s)
        np.clip(img, 0.0, 1.0, out=img)
        samples.append(Sample(image=img[None, :, :], label=label))
    return samples


# -----------------------------------------------------------------------------
# Synthetic dataset binary export
# -----------------------------------------------------------------------------


def save_synth(path: str, samples: list[Sample], classes: int) -> None:
    """16-byte header (magic, u16 version, u32 count, u8 side, u8 channels,
    u16 classes, little-endian) then per sample: label u8 + float64 pixels."""
    if not samples:
        raise ValueError("refusing to write an empty dataset")
    c, s, _ = samples[0].image.shape
    header = SYNTH_MAGIC + struct.pack("<HIBBH", SYNTH_VERSION, len(samples), s, c, classes)
    blob = bytearray(header)
    for sm in samples:
        if sm.image.shape != (c, s, s):
            raise ValueError("inconsistent image shapes in dataset")
        blob += struct.pack("<B", sm.label)
        blob += np.ascontiguousarray(sm.image, dtype="<f8").tobytes()
    atomic_write_bytes(path, bytes(blob))


def load_synth(path: str) -> tuple[list[Sample], int]:
    """Inverse of save_synth; returns (samples, classes)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise FormatError(f"{path}: shorter than the 16-byte header")
    if raw[:6] != SYNTH_MAGIC:
        raise FormatError(f"{path}: bad magic")
    version, count, side, channels, classes = struct.unpack("<HIBBH", raw[6:16])
    if version != SYNTH_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    rec = 1 + channels * side * side * 8
    if len(raw) != 16 + count * rec:
        raise FormatError(
            f"{path}: expected {16 + count * rec} bytes for {count} samples, got {len(raw)}"
        )
    samples = []
    pos = 16
    for _ in range(count):
        label = raw[pos]
        if label >= classes:
            raise FormatError(f"{path}: label {label} out of range")
        pixels = np.frombuffer(raw, dtype="<f8", count=channels * side * side, offset=pos + 1)
        samples.append(Sample(image=pixels.reshape(channels, side, side).copy(), label=label))
        pos += rec
    return samples, classes


# -----------------------------------------------------------------------------
# CIFAR-10 binary batches
# -----------------------------------------------------------------------------


def load_cifar10_file(path: str) -> list[Sample]:
    """One binary batch file -> samples; validates length and label bytes."""
    if not os.path.exists(path):
        raise FormatError(f"{path}: file not found")
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD != 0:
        raise FormatError(
            f"{path}: length {len(raw)} is not a positive multiple of {CIFAR_RECORD}"
        )
    samples = []
    for pos in range(0, len(raw), CIFAR_RECORD):
        label = raw[pos]
        if label > 9:
            raise FormatError(f"{path}: label byte {label} > 9 at offset {pos}")
        pixels = np.frombuffer(raw, dtype=np.uint8, count=CIFAR_RECORD - 1, offset=pos + 1)
        image = pixels.reshape(3, CIFAR_SIDE, CIFAR_SIDE).astype(np.float64) / 255.0
        samples.append(Sample(image=image, label=label))
    return samples


def load_cifar10(directory: str, split: str) -> list[Sample]:
    """Standard binary batches from a directory; split is 'train' or 'test'."""
    if split == "train":
        names = CIFAR_TRAIN_FILES
    elif split == "test":
        names = CIFAR_TEST_FILES
    else:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    samples = []
    for name in names:
        samples.extend(load_cifar10_file(os.path.join(directory, name)))
    return samples


# -----------------------------------------------------------------------------
# Augmentation: horizontal flip (p = 0.5) + random crop with 4-pixel padding
# -----------------------------------------------------------------------------

CROP_PAD = 4


def augment_with(sample: Sample, flip: bool, dx: int, dy: int) -> Sample:
    """Deterministic core: optional flip, then crop the zero-padded image at
    offset (dx, dy).  (dx, dy) == (CROP_PAD, CROP_PAD) is the identity crop."""
    c, s, _ = sample.image.shape
    if not (0 <= dx <= 2 * CROP_PAD and 0 <= dy <= 2 * CROP_PAD):
        raise ValueError(f"crop offset ({dx}, {dy}) out of range")
    img = sample.image[:, :, ::-1] if flip else sample.image
    padded = np.zeros((c, s + 2 * CROP_PAD, s + 2 * CROP_PAD))
    padded[:, CROP_PAD : CROP_PAD + s, CROP_PAD : CROP_PAD + s] = img
    cropped = padded[:, dy : dy + s, dx : dx + s].copy()
    return Sample(image=cropped, label=sample.label)


def augment(sample: Sample, rng: Rng) -> Sample:
    """Random flip/crop; draw order: flip uniform, dx, dy."""
    flip = rng.uniform() < 0.5
    dx = rng.randint(2 * CROP_PAD + 1)
    dy = rng.randint(2 * CROP_PAD + 1)
    return augment_with(sample, flip, dx, dy)
