"""Weight-guided RGB-D fusion and the recursive multi-scale decode head.

Two surfaces live here: pure numpy functions that define the fusion
arithmetic (testable against elementwise brute force), and the torch
modules that apply the same arithmetic inside the trainable network.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import (
    InvariantError,
    ShapeMismatchError,
    as_scalar_map,
    ensure_feature_block,
    ensure_same_shape,
    resize_map,
)

FUSION_MODES = ("omega", "add", "con")
SIDE_CHANNELS = 64


def simple_fusion(omega, dsal, rgbsal) -> np.ndarray:
    """Per-pixel convex combination: omega * dsal + (1 - omega) * rgbsal."""
    omega = as_scalar_map(omega, "omega")
    dsal = as_scalar_map(dsal, "dsal")
    rgbsal = as_scalar_map(rgbsal, "rgbsal")
    ensure_same_shape(omega, dsal, "omega/dsal")
    ensure_same_shape(dsal, rgbsal, "dsal/rgbsal")
    return omega * dsal + (1.0 - omega) * rgbsal


def feature_fusion(omega, d_side, rgb_side) -> np.ndarray:
    """Convex combination of two side-output blocks, guided per pixel.

    ``omega`` is resized to the blocks' spatial shape and broadcast over
    all channels.
    """
    d_side = ensure_feature_block(d_side, "d side-output")
    rgb_side = ensure_feature_block(rgb_side, "rgb side-output")
    if d_side.shape[2] != rgb_side.shape[2]:
        raise ShapeMismatchError(
            f"side-output channel mismatch: {d_side.shape[2]} vs {rgb_side.shape[2]}"
        )
    if d_side.shape != rgb_side.shape:
        raise ShapeMismatchError(
            f"side-outputs have mismatched shapes {d_side.shape} vs {rgb_side.shape}"
        )
    w = resize_map(omega, d_side.shape[0], d_side.shape[1])[:, :, None]
    return w * d_side + (1.0 - w) * rgb_side


def check_side_output_set(blocks) -> None:
    """Validate the 4-level fused feature list: 64 channels, doubling sizes."""
    if len(blocks) != 4:
        raise InvariantError(f"expected 4 side-output levels, got {len(blocks)}")
    for i, blk in enumerate(blocks):
        if blk.shape[-3] != SIDE_CHANNELS:
            raise InvariantError(
                f"side-output {i + 1} has {blk.shape[-3]} channels, expected {SIDE_CHANNELS}"
            )
    for i in range(3):
        h0, w0 = blocks[i].shape[-2:]
        h1, w1 = blocks[i + 1].shape[-2:]
        if (h1, w1) != (2 * h0, 2 * w0):
            raise InvariantError(
                f"side-output resolution chain broken at level {i + 2}: "
                f"{(h1, w1)} is not double {(h0, w0)}"
            )


def _up2(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=True)


class SpatialAttention(nn.Module):
    """Rescale a block by (1 + sigmoid(h(x))) with h a 1x1 conv to one channel.

    The per-pixel multiplier lies strictly in (1, 2) for finite inputs.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.h = nn.Conv2d(channels, 1, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return (1.0 + torch.sigmoid(self.h(x))) * x


class MsfHead(nn.Module):
    """Recursive coarse-to-fine decode of the four fused side-outputs.

    Three upsample/concat/conv/attention steps walk from the coarsest
    level to the finest, then a 1x1 conv and sigmoid produce the final
    map, resized to the working resolution if needed.
    """

    def __init__(self, width: int = SIDE_CHANNELS):
        super().__init__()
        self.fuse = nn.ModuleList(
            [nn.Conv2d(2 * width, width, kernel_size=3, padding=1) for _ in range(3)]
        )
        self.att = nn.ModuleList([SpatialAttention(width) for _ in range(3)])
        self.out = nn.Conv2d(width, 1, kernel_size=1)

    def forward(self, sides: list[torch.Tensor], out_size: tuple[int, int] | None = None):
        check_side_output_set(sides)
        temp = self.att[0](self.fuse[0](torch.cat([_up2(sides[0]), sides[1]], dim=1)))
        temp = self.att[1](self.fuse[1](torch.cat([_up2(temp), sides[2]], dim=1)))
        temp = self.att[2](self.fuse[2](torch.cat([_up2(temp), sides[3]], dim=1)))
        fsal = torch.sigmoid(self.out(temp))
        if out_size is not None and fsal.shape[-2:] != tuple(out_size):
            fsal = F.interpolate(fsal, size=out_size, mode="bilinear", align_corners=True)
        return fsal


class FlatHead(nn.Module):
    """Single-shot decode: upsample all four levels, concatenate, convolve."""

    def __init__(self, width: int = SIDE_CHANNELS):
        super().__init__()
        self.merge = nn.Conv2d(4 * width, width, kernel_size=3, padding=1)
        self.out = nn.Conv2d(width, 1, kernel_size=1)

    def forward(self, sides: list[torch.Tensor], out_size: tuple[int, int]):
        check_side_output_set(sides)
        ups = [
            F.interpolate(s, size=out_size, mode="bilinear", align_corners=True)
            for s in sides
        ]
        return torch.sigmoid(self.out(self.merge(torch.cat(ups, dim=1))))


class ConcatFusion(nn.Module):
    """Quality-unaware per-level fusion: concatenate streams, 1x1 conv back."""

    def __init__(self, width: int = SIDE_CHANNELS, levels: int = 4):
        super().__init__()
        self.convs = nn.ModuleList(
            [nn.Conv2d(2 * width, width, kernel_size=1) for _ in range(levels)]
        )

    def forward(self, level: int, d_side: torch.Tensor, rgb_side: torch.Tensor):
        return self.convs[level](torch.cat([d_side, rgb_side], dim=1))


def fuse_side_outputs_torch(omega, d_sides, rgb_sides, mode, concat_fusion=None):
    """Batched torch counterpart of :func:`feature_fusion` for all 4 levels."""
    fused = []
    for i, (d_s, rgb_s) in enumerate(zip(d_sides, rgb_sides)):
        if mode == "omega":
            w = F.interpolate(omega, size=d_s.shape[-2:], mode="bilinear", align_corners=True)
            fused.append(w * d_s + (1.0 - w) * rgb_s)
        elif mode == "add":
            fused.append(d_s + rgb_s)
        elif mode == "con":
            fused.append(concat_fusion(i, d_s, rgb_s))
        else:
            raise ValueError(f"unknown fusion mode {mode!r}; expected one of {FUSION_MODES}")
    return fused
