"""Image transforms and batch expansion.

Randomness is split strictly in two: draw_transform samples concrete
parameters from a stream, apply is a pure function of (draw, image).  That
separation is what makes replicated batches reproducible and lets the same
draw be re-applied or inspected.  expand_batch lays replicas out
replica-major, output[j*B + n] = T_j(images[n]), so every contiguous block of
B rows holds B distinct source samples; ghost normalization groups rely on
that.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractViolation
from .rng import RngStream


class TransformSpec:
    """Base for transform descriptions; subclasses carry the parameters."""

    def validate_shape(self, shape):
        if len(shape) != 3:
            raise ContractViolation(f"expected C x H x W shape, got {shape}")


@dataclass(frozen=True)
class Identity(TransformSpec):
    pass


@dataclass(frozen=True)
class PadCrop(TransformSpec):
    """Zero-pad by `pad` on every side, then crop back at a random offset."""

    pad: int

    def __post_init__(self):
        if self.pad < 0:
            raise ContractViolation("pad must be >= 0")


@dataclass(frozen=True)
class HFlip(TransformSpec):
    """Mirror the width axis with probability p."""

    p: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ContractViolation("flip probability must lie in [0, 1]")


@dataclass(frozen=True)
class Cutout(TransformSpec):
    """Zero a size x size square at a random centre, clipped at borders."""

    size: int

    def __post_init__(self):
        if self.size <= 0:
            raise ContractViolation("cutout size must be positive")

    def validate_shape(self, shape):
        super().validate_shape(shape)
        if self.size > min(shape[1], shape[2]):
            raise ContractViolation(
                f"cutout size {self.size} exceeds image extent {shape[1:]}")


@dataclass(frozen=True)
class Compose(TransformSpec):
    parts: tuple

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(self.parts))
        if not all(isinstance(p, TransformSpec) for p in self.parts):
            raise ContractViolation("compose parts must be transform specs")

    def validate_shape(self, shape):
        for p in self.parts:
            p.validate_shape(shape)


@dataclass(frozen=True)
class TransformDraw:
    """Concrete parameters for one application of a spec."""

    spec: TransformSpec
    offsets: tuple = None      # (dy, dx) for PadCrop
    flip: bool = None          # for HFlip
    center: tuple = None       # (cy, cx) for Cutout
    children: tuple = field(default=None)  # for Compose


def draw_transform(spec: TransformSpec, image_shape, stream: RngStream
                   ) -> TransformDraw:
    """Sample the concrete parameters for one transform application.

    Consumption order per variant is fixed, so a given stream state always
    yields the same draw.
    """
    spec.validate_shape(image_shape)
    if isinstance(spec, Identity):
        return TransformDraw(spec)
    if isinstance(spec, PadCrop):
        span = 2 * spec.pad + 1
        dy, dx = stream.randint(2, 0, span)
        return TransformDraw(spec, offsets=(int(dy), int(dx)))
    if isinstance(spec, HFlip):
        return TransformDraw(spec, flip=bool(stream.uniform() < spec.p))
    if isinstance(spec, Cutout):
        cy = int(stream.randint(1, 0, image_shape[1])[0])
        cx = int(stream.randint(1, 0, image_shape[2])[0])
        return TransformDraw(spec, center=(cy, cx))
    if isinstance(spec, Compose):
        kids = tuple(draw_transform(p, image_shape, stream) for p in spec.parts)
        return TransformDraw(spec, children=kids)
    raise ContractViolation(f"unknown transform spec {spec!r}")


def apply(draw: TransformDraw, image: np.ndarray) -> np.ndarray:
    """Apply a concrete draw to one C x H x W image; the input is untouched.

    This function never consumes randomness.
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise ContractViolation(f"expected C x H x W image, got {image.shape}")
    spec = draw.spec
    if isinstance(spec, Identity):
        return image.copy()
    if isinstance(spec, PadCrop):
        p = spec.pad
        if p == 0:
            return image.copy()
        dy, dx = draw.offsets
        padded = np.pad(image, ((0, 0), (p, p), (p, p)))
        h, w = image.shape[1], image.shape[2]
        return np.ascontiguousarray(padded[:, dy:dy + h, dx:dx + w])
    if isinstance(spec, HFlip):
        return image[:, :, ::-1].copy() if draw.flip else image.copy()
    if isinstance(spec, Cutout):
        out = image.copy()
        cy, cx = draw.center
        s = spec.size
        y1, x1 = cy - s // 2, cx - s // 2
        y2, x2 = y1 + s, x1 + s
        out[:, max(y1, 0):max(y2, 0), max(x1, 0):max(x2, 0)] = 0.0
        return out
    if isinstance(spec, Compose):
        out = image
        for child in draw.children:
            out = apply(child, out)
        return out if out is not image else image.copy()
    raise ContractViolation(f"unknown transform spec {spec!r}")


def enumerate_space(spec: TransformSpec, image_shape) -> int:
    """Count the distinct parameter draws a spec admits on a given shape.

    A flip counts as 2 outcomes whatever its probability; cutout centres
    range over the full H x W grid (squares are clipped at borders).
    """
    spec.validate_shape(image_shape)
    if isinstance(spec, Identity):
        return 1
    if isinstance(spec, PadCrop):
        return (2 * spec.pad + 1) ** 2
    if isinstance(spec, HFlip):
        return 2
    if isinstance(spec, Cutout):
        return image_shape[1] * image_shape[2]
    if isinstance(spec, Compose):
        total = 1
        for p in spec.parts:
            total *= enumerate_space(p, image_shape)
        return total
    raise ContractViolation(f"unknown transform spec {spec!r}")


def expand_batch(spec: TransformSpec, images: np.ndarray, labels: np.ndarray,
                 replicas: int, stream: RngStream):
    """Expand a batch to `replicas` independently transformed copies.

    Output row j*B + n is replica j of input n; labels are tiled to match.
    Draws happen replica-major, one fresh draw per (replica, sample).
    """
    if replicas < 1:
        raise ContractViolation("replica count must be >= 1")
    images = np.asarray(images)
    if images.ndim != 4:
        raise ContractViolation(f"expected B x C x H x W batch, got {images.shape}")
    b = images.shape[0]
    out = np.empty((replicas * b,) + images.shape[1:], dtype=np.float64)
    for j in range(replicas):
        for n in range(b):
            draw = draw_transform(spec, images.shape[1:], stream)
            out[j * b + n] = apply(draw, images[n])
    return out, np.tile(np.asarray(labels), replicas)


_FORMATS = {
    "identity": (Identity, None),
    "padcrop": (PadCrop, int),
    "hflip": (HFlip, float),
    "cutout": (Cutout, int),
}


def parse_transform(text: str) -> TransformSpec:
    """Parse a composition list like ``padcrop:4,hflip:0.5,cutout:8``.

    An empty string means Identity; one item yields that spec alone;
    several items compose left to right.
    """
    text = text.strip()
    if not text or text == "identity":
        return Identity()
    parts = []
    for item in text.split(","):
        item = item.strip()
        name, _, arg = item.partition(":")
        if name not in _FORMATS:
            raise ConfigError(f"unknown transform {name!r} in {text!r}")
        cls, conv = _FORMATS[name]
        try:
            if conv is None:
                if arg:
                    raise ValueError("takes no parameter")
                parts.append(cls())
            else:
                parts.append(cls(conv(arg)))
        except (ValueError, ContractViolation) as exc:
            raise ConfigError(f"bad transform item {item!r}: {exc}") from None
    return parts[0] if len(parts) == 1 else Compose(tuple(parts))


def format_transform(spec: TransformSpec) -> str:
    """Canonical config text for a spec; inverse of parse_transform."""
    if isinstance(spec, Identity):
        return "identity"
    if isinstance(spec, PadCrop):
        return f"padcrop:{spec.pad}"
    if isinstance(spec, HFlip):
        return f"hflip:{spec.p:g}"
    if isinstance(spec, Cutout):
        return f"cutout:{spec.size}"
    if isinstance(spec, Compose):
        return ",".join(format_transform(p) for p in spec.parts)
    raise ContractViolation(f"unknown transform spec {spec!r}")
