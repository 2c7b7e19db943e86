"""Datasets and seeded batch sampling.

The synthetic generator draws one oriented bar per image whose angle encodes
the class, so class identity survives crops, flips and cutout while per-image
jitter and noise keep samples distinct.  Class angles live strictly inside the
first quadrant, which keeps a horizontal flip from mapping one class onto
another.  An IDX reader covers real small datasets; batch sampling supports
both with-replacement draws (matching the i.i.d. batch index model used in
the stability analysis) and per-epoch shuffling (matching training practice).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ContractViolation, IdxCountMismatch, IdxMagicError, IdxTruncatedError)
from .rng import RngStream


@dataclass
class LabeledDataset:
    """Immutable image dataset: images N x C x H x W in [0,1], integer labels."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ContractViolation(
                f"images must be N x C x H x W, got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ContractViolation(
                f"label count {self.labels.shape} does not match "
                f"image count {self.images.shape[0]}")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ContractViolation("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= self.class_count):
            raise ContractViolation(
                f"labels must lie in [0, {self.class_count})")
        self.images.flags.writeable = False
        self.labels.flags.writeable = False

    def __len__(self):
        return self.images.shape[0]

    @property
    def shape_chw(self):
        return self.images.shape[1:]


def gen_synthetic(class_count: int, n_per_class: int, height: int = 16,
                  width: int = 16, channels: int = 1, seed: int = 0,
                  name: str = "") -> LabeledDataset:
    """Procedural dataset of oriented bars, one angle band per class.

    Class k draws a bar through the image centre at angle
    (k + 0.5) / K * 90 degrees with small per-image jitter in position,
    angle and brightness, plus pixel noise.  Angles stay inside (0, 90)
    degrees so no two classes are mirror images of each other.
    """
    if min(class_count, n_per_class, height, width, channels) <= 0:
        raise ContractViolation("all dataset extents must be positive")
    n = class_count * n_per_class
    stream = RngStream(seed).split("synthetic")
    labels = np.repeat(np.arange(class_count, dtype=np.int64), n_per_class)

    # one draw block per quantity keeps the consumption order fixed
    jitter_xy = stream.uniform((n, 2), -1.5, 1.5)
    angle_jit = stream.uniform((n,), -np.pi / 90.0, np.pi / 90.0)
    amplitude = stream.uniform((n,), 0.70, 1.00)
    noise = stream.normal((n, channels, height, width)) * 0.08

    angles = (labels + 0.5) / class_count * (np.pi / 2.0) + angle_jit
    half_len = 0.40 * min(height, width)

    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    cy0, cx0 = (height - 1) / 2.0, (width - 1) / 2.0

    dy = ys[None, :, :] - (cy0 + jitter_xy[:, 0, None, None])
    dx = xs[None, :, :] - (cx0 + jitter_xy[:, 1, None, None])
    cos_a = np.cos(angles)[:, None, None]
    sin_a = np.sin(angles)[:, None, None]
    d_perp = np.abs(dx * sin_a - dy * cos_a)
    d_along = np.abs(dx * cos_a + dy * sin_a)

    bar = np.clip(1.5 - d_perp, 0.0, 1.0) * (d_along <= half_len)
    images = amplitude[:, None, None, None] * bar[:, None, :, :] + noise
    np.clip(images, 0.0, 1.0, out=images)

    return LabeledDataset(
        images=images, labels=labels, class_count=class_count,
        name=name or f"synthetic-k{class_count}-{height}x{width}x{channels}-s{seed}")


def _read_idx_header(raw: bytes, path, expect_ndim: int):
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: shorter than the 4-byte magic")
    zero1, zero2, dtype_code, ndim = struct.unpack(">BBBB", raw[:4])
    if zero1 != 0 or zero2 != 0 or dtype_code != 0x08 or ndim != expect_ndim:
        raise IdxMagicError(
            f"{path}: magic {raw[:4].hex()} is not an unsigned-byte "
            f"{expect_ndim}-d IDX file")
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise IdxTruncatedError(f"{path}: header cut short")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    payload = raw[header_len:]
    expected = int(np.prod(dims))
    if len(payload) < expected:
        raise IdxTruncatedError(
            f"{path}: payload holds {len(payload)} bytes, "
            f"header declares {expected}")
    return dims, payload[:expected]


def load_idx(images_path, labels_path, name: str = "") -> LabeledDataset:
    """Read an unsigned-byte IDX image/label pair (big-endian layout).

    Images must be 3-d (count, height, width); labels 1-d.  Pixel bytes are
    scaled to [0, 1] and a channel axis of size 1 is added.
    """
    with open(images_path, "rb") as fh:
        img_raw = fh.read()
    with open(labels_path, "rb") as fh:
        lab_raw = fh.read()

    img_dims, img_payload = _read_idx_header(img_raw, images_path, expect_ndim=3)
    lab_dims, lab_payload = _read_idx_header(lab_raw, labels_path, expect_ndim=1)

    if img_dims[0] != lab_dims[0]:
        raise IdxCountMismatch(
            f"{images_path} holds {img_dims[0]} images but "
            f"{labels_path} holds {lab_dims[0]} labels")

    images = np.frombuffer(img_payload, dtype=np.uint8).reshape(img_dims)
    images = images[:, None, :, :].astype(np.float64) / 255.0
    labels = np.frombuffer(lab_payload, dtype=np.uint8).astype(np.int64)
    class_count = int(labels.max()) + 1 if labels.size else 1

    return LabeledDataset(images=images, labels=labels,
                          class_count=class_count,
                          name=name or str(images_path))


@dataclass
class SamplerState:
    """Single-owner batch sampler over a dataset of n items.

    With replacement each draw is independent; without replacement draws walk
    a fresh permutation per epoch, so every index appears exactly once per
    epoch even when the batch size does not divide n.
    """

    stream: RngStream
    n: int
    with_replacement: bool = False
    epoch_permutation: np.ndarray = field(default=None, repr=False)
    cursor: int = 0

    def __post_init__(self):
        if self.n <= 0:
            raise ContractViolation("sampler needs a positive item count")
        if not self.with_replacement and self.epoch_permutation is None:
            self.epoch_permutation = self.stream.permutation(self.n)

    def draw(self, count: int) -> np.ndarray:
        if self.with_replacement:
            return self.stream.randint(count, 0, self.n)
        out = np.empty(count, dtype=np.int64)
        filled = 0
        while filled < count:
            take = min(count - filled, self.n - self.cursor)
            out[filled:filled + take] = \
                self.epoch_permutation[self.cursor:self.cursor + take]
            filled += take
            self.cursor += take
            if self.cursor == self.n:
                self.epoch_permutation = self.stream.permutation(self.n)
                self.cursor = 0
        return out


def make_sampler(seed_stream: RngStream, n: int,
                 with_replacement: bool = False) -> SamplerState:
    """Sampler whose stream is split off under a fixed label, so later draws
    from the parent (augmentation, init) cannot perturb the index sequence."""
    return SamplerState(stream=seed_stream.split("sampler"), n=n,
                        with_replacement=with_replacement)


def sample_batch(ds: LabeledDataset, sampler: SamplerState, batch_size: int):
    """Draw a batch: (indices, images, labels); tensors are fresh copies."""
    if batch_size > len(ds):
        raise ContractViolation(
            f"batch size {batch_size} exceeds dataset size {len(ds)}")
    if batch_size <= 0:
        raise ContractViolation("batch size must be positive")
    if sampler.n != len(ds):
        raise ContractViolation(
            f"sampler was built for {sampler.n} items, dataset has {len(ds)}")
    idx = sampler.draw(batch_size)
    # fancy indexing allocates, so callers may mutate the result freely
    return idx, ds.images[idx], ds.labels[idx]
