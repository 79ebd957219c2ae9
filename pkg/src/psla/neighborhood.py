"""Sparse and dense local neighborhoods with border validity masks.

Offset enumeration order is frozen and part of the contract: weight-vector
indices are meaningful to serialization and to every downstream test.

Progressive neighborhoods enumerate the center first, then for each stride
s = 1..d the 8 ring offsets in row-major order over {-s, 0, s}^2 with the
center excluded, giving 1 + 8d offsets in total. Dense neighborhoods
enumerate all (2d+1)^2 offsets of the [-d, d]^2 window in row-major order,
with the center moved to the front.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InvalidInputError


@dataclass(frozen=True)
class NeighborhoodSpec:
    """Ordered offsets (dy, dx) with per-offset stride labels.

    The stride label of an offset is its Chebyshev distance max(|dy|, |dx|);
    the center carries stride 0.
    """

    d: int
    offsets: tuple
    strides: tuple

    def __post_init__(self):
        if len(self.offsets) != len(set(self.offsets)):
            raise ConfigurationError("duplicate offsets in neighborhood")
        if self.offsets[0] != (0, 0):
            raise ConfigurationError("neighborhood must start with the center offset")

    def __len__(self):
        return len(self.offsets)

    def to_json_dict(self):
        return {
            "d": self.d,
            "offsets": [list(o) for o in self.offsets],
            "strides": list(self.strides),
        }


def _ring(s):
    """The 8 offsets at Chebyshev radius s, row-major over {-s, 0, s}^2."""
    ring = []
    for dy in (-s, 0, s):
        for dx in (-s, 0, s):
            if (dy, dx) != (0, 0):
                ring.append((dy, dx))
    return ring


def build_with_strides(strides) -> NeighborhoodSpec:
    """Center plus one 8-offset ring per listed stride (experimentation hook)."""
    strides = tuple(strides)
    if not strides or any(s < 1 for s in strides):
        raise InvalidInputError(f"strides must be positive, got {strides}")
    offsets = [(0, 0)]
    labels = [0]
    for s in strides:
        ring = _ring(s)
        offsets.extend(ring)
        labels.extend([s] * len(ring))
    return NeighborhoodSpec(d=max(strides), offsets=tuple(offsets), strides=tuple(labels))


def build_progressive(d: int) -> NeighborhoodSpec:
    """Progressively sparser neighborhood: center plus rings at strides 1..d."""
    if d < 1:
        raise InvalidInputError("d must be >= 1 (use identity alignment for d = 0)")
    return build_with_strides(range(1, d + 1))


def build_dense(d: int) -> NeighborhoodSpec:
    """Full (2d+1)^2 window, row-major, center first."""
    if d < 1:
        raise InvalidInputError("d must be >= 1 (use identity alignment for d = 0)")
    offsets = [(0, 0)]
    labels = [0]
    for dy in range(-d, d + 1):
        for dx in range(-d, d + 1):
            if (dy, dx) != (0, 0):
                offsets.append((dy, dx))
                labels.append(max(abs(dy), abs(dx)))
    return NeighborhoodSpec(d=d, offsets=tuple(offsets), strides=tuple(labels))


@dataclass(frozen=True)
class ValidityMask:
    """Per-location booleans: mask[y, x, k] iff offset k stays inside the map."""

    height: int
    width: int
    valid: np.ndarray  # (H, W, K) bool

    def __post_init__(self):
        if self.valid.shape[:2] != (self.height, self.width):
            raise ConfigurationError("mask array does not match declared dims")


def make_mask(spec: NeighborhoodSpec, height: int, width: int) -> ValidityMask:
    """Bounds mask for every location and offset of `spec` on an HxW map."""
    if height < 1 or width < 1:
        raise ConfigurationError(f"invalid map dims {height}x{width}")
    ys = np.arange(height)[:, None, None]
    xs = np.arange(width)[None, :, None]
    dy = np.array([o[0] for o in spec.offsets])[None, None, :]
    dx = np.array([o[1] for o in spec.offsets])[None, None, :]
    valid = (ys + dy >= 0) & (ys + dy < height) & (xs + dx >= 0) & (xs + dx < width)
    return ValidityMask(height, width, np.ascontiguousarray(valid))
