"""Shared domain types and elementwise map algebra.

All single-channel maps (saliency maps, depth maps, fusion-weight maps,
pseudo targets, binary masks) are float64 numpy arrays of shape (H, W)
with values in [0, 1]. Network-side activations are float32 torch
tensors; conversion happens at module boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SaliencyError(Exception):
    """Base error for this package."""


class InvariantError(SaliencyError):
    """A value-range or shape contract was violated."""


class ShapeMismatchError(InvariantError):
    pass


class DataError(SaliencyError):
    """Dataset / file content could not be read or is malformed."""


class StageOrderError(SaliencyError):
    """Training stages were invoked out of order."""


def as_scalar_map(values, name: str = "map") -> np.ndarray:
    """Validate and return a (H, W) float64 array with values in [0, 1]."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvariantError(f"{name} must be a 2-D H x W array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvariantError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise InvariantError(
            f"{name} values must lie in [0, 1], got range "
            f"[{arr.min():.6g}, {arr.max():.6g}]"
        )
    return arr


def as_binary_mask(values, name: str = "mask") -> np.ndarray:
    """Validate a scalar map whose entries are exactly 0 or 1."""
    arr = as_scalar_map(values, name)
    if not np.all((arr == 0.0) | (arr == 1.0)):
        raise InvariantError(f"{name} must contain only 0 and 1")
    return arr


def ensure_finite(x, name: str = "tensor") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvariantError(f"non-finite {name}")
    return arr


def ensure_same_shape(a: np.ndarray, b: np.ndarray, what: str = "maps") -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{what} have mismatched shapes {a.shape} vs {b.shape}")


def pos(x) -> np.ndarray:
    """Zero out negative entries elementwise; shape is preserved."""
    arr = ensure_finite(x)
    return np.maximum(arr, 0.0)


def hadamard(a, b) -> np.ndarray:
    """Elementwise product of two equal-shape maps."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ensure_same_shape(a, b)
    return a * b


def _grid_coords(n_src: int, n_dst: int) -> np.ndarray:
    # corner-aligned sampling: destination i maps to i * (n_src-1) / (n_dst-1)
    if n_dst == 1 or n_src == 1:
        return np.zeros(n_dst, dtype=np.float64)
    return np.arange(n_dst, dtype=np.float64) * (n_src - 1) / (n_dst - 1)


def resize_2d(m: np.ndarray, h: int, w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of an arbitrary 2-D array (no clamping)."""
    m = np.asarray(m, dtype=np.float64)
    if h < 1 or w < 1:
        raise InvariantError(f"target size must be >= 1, got {h}x{w}")
    if m.shape == (h, w):
        return m.copy()
    ys = _grid_coords(m.shape[0], h)
    xs = _grid_coords(m.shape[1], w)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, m.shape[0] - 1)
    x1 = np.minimum(x0 + 1, m.shape[1] - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    rows = m[y0, :] * (1.0 - wy) + m[y1, :] * wy
    return rows[:, x0] * (1.0 - wx) + rows[:, x1] * wx


def resize_map(m, h: int, w: int) -> np.ndarray:
    """Bilinear resize of a [0, 1] map; output clamped back to [0, 1].

    Resizing to the source shape is the exact identity.
    """
    arr = as_scalar_map(m)
    out = resize_2d(arr, h, w)
    return np.clip(out, 0.0, 1.0)


@dataclass
class RgbdSample:
    """One aligned RGB-D item; ``gt`` is None for inference-only samples."""

    id: str
    rgb: np.ndarray      # (H, W, 3), each channel in [0, 1]
    depth: np.ndarray    # (H, W) in [0, 1]
    gt: np.ndarray | None = None  # (H, W) binary, when annotated
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise InvariantError(
                f"sample {self.id}: rgb must be (H, W, 3), got {self.rgb.shape}"
            )
        if not np.all(np.isfinite(self.rgb)):
            raise InvariantError(f"sample {self.id}: rgb contains non-finite values")
        if self.rgb.min() < 0.0 or self.rgb.max() > 1.0:
            raise InvariantError(f"sample {self.id}: rgb values must lie in [0, 1]")
        self.depth = as_scalar_map(self.depth, f"sample {self.id}: depth")
        if self.depth.shape != self.rgb.shape[:2]:
            raise ShapeMismatchError(
                f"sample {self.id}: depth shape {self.depth.shape} does not match "
                f"rgb shape {self.rgb.shape[:2]}"
            )
        if self.gt is not None:
            self.gt = as_binary_mask(self.gt, f"sample {self.id}: gt")
            if self.gt.shape != self.rgb.shape[:2]:
                raise ShapeMismatchError(
                    f"sample {self.id}: gt shape {self.gt.shape} does not match "
                    f"rgb shape {self.rgb.shape[:2]}"
                )

    @property
    def shape(self) -> tuple[int, int]:
        return self.rgb.shape[:2]

    def resized(self, h: int, w: int) -> "RgbdSample":
        """Resize all channels; the mask is re-binarized at 0.5 after resampling."""
        if self.shape == (h, w):
            return self
        rgb = np.stack(
            [resize_map(self.rgb[:, :, c], h, w) for c in range(3)], axis=2
        )
        depth = resize_map(self.depth, h, w)
        gt = None
        if self.gt is not None:
            gt = (resize_map(self.gt, h, w) > 0.5).astype(np.float64)
        return RgbdSample(id=self.id, rgb=rgb, depth=depth, gt=gt, meta=dict(self.meta))


def ensure_feature_block(x, name: str = "feature block") -> np.ndarray:
    """Validate an (H, W, C) activation array: finite, unbounded range."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 3:
        raise InvariantError(f"{name} must be (H, W, C), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvariantError(f"non-finite {name}")
    return arr
