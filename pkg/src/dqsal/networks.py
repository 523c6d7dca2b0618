"""Trainable subnets: RGB saliency, depth saliency, depth-contribution
assessment, and the fused full model.

The default backbone is a small 5-block encoder that trains on CPU in
minutes; heavier encoders can be registered without touching the decoders.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import InvariantError, RgbdSample, as_binary_mask, as_scalar_map, ensure_same_shape
from .fusion import (
    SIDE_CHANNELS,
    ConcatFusion,
    FlatHead,
    FUSION_MODES,
    MsfHead,
    fuse_side_outputs_torch,
)

ARCHES = ("simple", "omega-rgb-d", "omega-rgbd-d", "msf-rgb-d", "msf-rgbd-d")
LOSS_EPS = 1e-7


@dataclass
class BackboneConfig:
    name: str = "toy"
    channels: tuple = (16, 32, 64, 64, 64)

    def to_dict(self) -> dict:
        return {"name": self.name, "channels": list(self.channels)}

    @staticmethod
    def from_dict(d: dict) -> "BackboneConfig":
        return BackboneConfig(name=d["name"], channels=tuple(d["channels"]))


class ToyEncoder(nn.Module):
    """Five conv blocks, spatial size halving from the second block on.

    Level k (1-based) has resolution working / 2**(k-1).
    """

    def __init__(self, in_channels: int, channels=(16, 32, 64, 64, 64)):
        super().__init__()
        self.in_channels = in_channels
        self.channels = tuple(channels)
        blocks = []
        prev = in_channels
        for level, width in enumerate(self.channels):
            layers = []
            if level > 0:
                layers.append(nn.MaxPool2d(2))
            layers += [
                nn.Conv2d(prev, width, kernel_size=3, padding=1),
                nn.ReLU(inplace=True),
                nn.Conv2d(width, width, kernel_size=3, padding=1),
                nn.ReLU(inplace=True),
            ]
            blocks.append(nn.Sequential(*layers))
            prev = width
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x: torch.Tensor, add: list | None = None) -> list[torch.Tensor]:
        """Return the 5-level pyramid; ``add`` injects per-level residuals
        (the encoder cross-connections) after each block."""
        if x.shape[1] != self.in_channels:
            raise InvariantError(
                f"encoder expects {self.in_channels} input channels, got {x.shape[1]}"
            )
        feats = []
        cur = x
        for level, block in enumerate(self.blocks):
            cur = block(cur)
            if add is not None and add[level] is not None:
                cur = cur + add[level]
            feats.append(cur)
        return feats


BACKBONES = {"toy": ToyEncoder}


def register_backbone(name: str, factory) -> None:
    """Register an encoder factory: factory(in_channels, channels) -> nn.Module.

    The module must expose ``channels`` and return a 5-level pyramid with
    spatial size halving per level.
    """
    BACKBONES[name] = factory


def make_encoder(config: BackboneConfig, in_channels: int) -> nn.Module:
    if config.name not in BACKBONES:
        raise InvariantError(
            f"unknown backbone {config.name!r}; registered: {sorted(BACKBONES)}"
        )
    return BACKBONES[config.name](in_channels, config.channels)


@dataclass
class SubnetTensors:
    """Batched forward result of one saliency subnet."""

    saliency: torch.Tensor            # (B, 1, H, W) in (0, 1)
    decoder_blocks: list = field(default_factory=list)  # 4 blocks, coarse to fine
    side_outputs: list = field(default_factory=list)    # 4 blocks of 64 channels


class SaliencyDecoder(nn.Module):
    """Coarse-to-fine decode: at each level, concatenate the encoder skip
    with the upsampled previous block and convolve; the finest block is
    refined by two extra convs before the 1-channel prediction head."""

    def __init__(self, enc_channels, width: int = SIDE_CHANNELS):
        super().__init__()
        enc_channels = tuple(enc_channels)
        self.stem = nn.Sequential(
            nn.Conv2d(enc_channels[-1], width, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
        )
        self.steps = nn.ModuleList(
            [
                nn.Sequential(
                    nn.Conv2d(enc_channels[k] + width, width, kernel_size=3, padding=1),
                    nn.ReLU(inplace=True),
                )
                for k in (3, 2, 1, 0)
            ]
        )
        self.refine = nn.Sequential(
            nn.Conv2d(width, width, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, width, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
        )
        self.head = nn.Conv2d(width, 1, kernel_size=1)
        self.side = nn.ModuleList(
            [nn.Conv2d(width, SIDE_CHANNELS, kernel_size=1) for _ in range(4)]
        )

    def forward(self, pyramid: list[torch.Tensor]) -> SubnetTensors:
        d = self.stem(pyramid[4])
        blocks = []
        for step, skip in zip(self.steps, (pyramid[3], pyramid[2], pyramid[1], pyramid[0])):
            up = F.interpolate(d, scale_factor=2, mode="bilinear", align_corners=True)
            d = step(torch.cat([skip, up], dim=1))
            blocks.append(d)
        final = self.refine(blocks[-1])
        # side-output sources at working/8, /4, /2 and the refined full-res block
        sources = [blocks[0], blocks[1], blocks[2], final]
        sides = [conv(src) for conv, src in zip(self.side, sources)]
        saliency = torch.sigmoid(self.head(final))
        return SubnetTensors(saliency=saliency, decoder_blocks=sources, side_outputs=sides)


class SaliencySubnet(nn.Module):
    """Encoder-decoder saliency stream over a configurable input channel count."""

    def __init__(self, in_channels: int, backbone: BackboneConfig):
        super().__init__()
        self.encoder = make_encoder(backbone, in_channels)
        self.decoder = SaliencyDecoder(self.encoder.channels)

    def forward(self, x: torch.Tensor, add: list | None = None) -> SubnetTensors:
        return self.decoder(self.encoder(x, add=add))


class CrossConnections(nn.Module):
    """1x1 channel-matching projections from depth-encoder levels into the
    RGB encoder levels, added elementwise."""

    def __init__(self, d_channels, rgb_channels):
        super().__init__()
        self.proj = nn.ModuleList(
            [nn.Conv2d(dc, rc, kernel_size=1) for dc, rc in zip(d_channels, rgb_channels)]
        )

    def forward(self, d_feats: list[torch.Tensor]) -> list[torch.Tensor]:
        return [conv(f) for conv, f in zip(self.proj, d_feats)]


class ModelBundle(nn.Module):
    """The four trainable components plus configuration and stage provenance."""

    def __init__(
        self,
        backbone: BackboneConfig | None = None,
        working_resolution: int = 224,
        arch: str = "msf-rgbd-d",
        fusion_mode: str = "omega",
    ):
        super().__init__()
        if arch not in ARCHES:
            raise InvariantError(f"unknown arch {arch!r}; expected one of {ARCHES}")
        if fusion_mode not in FUSION_MODES:
            raise InvariantError(
                f"unknown fusion mode {fusion_mode!r}; expected one of {FUSION_MODES}"
            )
        self.backbone_config = backbone or BackboneConfig()
        self.working_resolution = int(working_resolution)
        if self.working_resolution % 16 != 0:
            raise InvariantError(
                f"working resolution must be divisible by 16 (five encoder "
                f"levels with four halvings), got {self.working_resolution}"
            )
        self.arch = arch
        self.fusion_mode = fusion_mode
        self.rgb_subnet = SaliencySubnet(3, self.backbone_config)
        self.d_subnet = SaliencySubnet(1, self.backbone_config)
        self.dca_subnet = SaliencySubnet(4, self.backbone_config)
        self.cross = CrossConnections(
            self.d_subnet.encoder.channels, self.rgb_subnet.encoder.channels
        )
        self.concat_fusion = ConcatFusion()
        self.msf_head = MsfHead()
        self.flat_head = FlatHead()
        self.stages_done: set[int] = set()
        self.cross_connections_enabled = False

    # ---- batched torch paths -------------------------------------------------

    def rgb_stream(self, rgb: torch.Tensor, depth: torch.Tensor | None = None) -> SubnetTensors:
        add = None
        if self.cross_connections_enabled:
            if depth is None:
                raise InvariantError(
                    "cross-connections are enabled but no depth was provided "
                    "to the RGB stream"
                )
            d_feats = self.d_subnet.encoder(depth)
            add = self.cross(d_feats)
        return self.rgb_subnet(rgb, add=add)

    def d_stream(self, depth: torch.Tensor) -> SubnetTensors:
        return self.d_subnet(depth)

    def omega_stream(self, rgb: torch.Tensor, depth: torch.Tensor) -> torch.Tensor:
        return self.dca_subnet(torch.cat([rgb, depth], dim=1)).saliency

    def uses_omega(self) -> bool:
        return self.arch == "simple" or self.fusion_mode == "omega"

    def fused_forward(
        self,
        rgb: torch.Tensor,
        depth: torch.Tensor,
        detach_omega: bool = False,
        want_omega: bool = False,
    ) -> dict:
        """Full forward pass; returns the final map plus stream intermediates."""
        rgb_out = self.rgb_stream(rgb, depth)
        d_out = self.d_stream(depth)
        omega = None
        if self.uses_omega() or want_omega:
            omega = self.omega_stream(rgb, depth)
            if detach_omega:
                omega = omega.detach()
        if self.arch == "simple":
            fsal = omega * d_out.saliency + (1.0 - omega) * rgb_out.saliency
        else:
            fused = fuse_side_outputs_torch(
                omega, d_out.side_outputs, rgb_out.side_outputs,
                self.fusion_mode, self.concat_fusion,
            )
            size = rgb.shape[-2:]
            if self.arch.startswith("msf"):
                fsal = self.msf_head(fused, out_size=size)
            else:
                fsal = self.flat_head(fused, out_size=size)
        return {
            "fsal": fsal,
            "omega": omega,
            "rgbsal": rgb_out.saliency,
            "dsal": d_out.saliency,
        }

    # ---- single-sample numpy wrappers ----------------------------------------

    def _tensors(self, sample: RgbdSample):
        s = sample.resized(self.working_resolution, self.working_resolution)
        rgb = torch.from_numpy(s.rgb.astype(np.float32)).permute(2, 0, 1).unsqueeze(0)
        depth = torch.from_numpy(s.depth.astype(np.float32)).unsqueeze(0).unsqueeze(0)
        return rgb, depth

    @staticmethod
    def _to_map(t: torch.Tensor) -> np.ndarray:
        arr = t.detach().squeeze(0).squeeze(0).numpy().astype(np.float64)
        return np.clip(arr, 0.0, 1.0)

    @torch.no_grad()
    def predict_rgb(self, sample: RgbdSample) -> np.ndarray:
        rgb, depth = self._tensors(sample)
        return self._to_map(self.rgb_stream(rgb, depth).saliency)

    @torch.no_grad()
    def predict_d(self, sample: RgbdSample) -> np.ndarray:
        _, depth = self._tensors(sample)
        return self._to_map(self.d_stream(depth).saliency)

    @torch.no_grad()
    def predict_omega(self, sample: RgbdSample) -> np.ndarray:
        rgb, depth = self._tensors(sample)
        return self._to_map(self.omega_stream(rgb, depth))

    @torch.no_grad()
    def predict_full(self, sample: RgbdSample) -> dict:
        rgb, depth = self._tensors(sample)
        out = self.fused_forward(rgb, depth, want_omega=True)
        return {k: self._to_map(v) for k, v in out.items() if v is not None}


def bce_tensor(pred: torch.Tensor, target: torch.Tensor, eps: float = LOSS_EPS) -> torch.Tensor:
    """Mean binary cross-entropy with soft targets; log arguments clamped."""
    p = pred.clamp(eps, 1.0 - eps)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).mean()


def dca_loss(omega, pgt) -> float:
    """Cross-entropy between the predicted contribution map and its soft target."""
    omega = as_scalar_map(omega, "omega")
    pgt = as_scalar_map(pgt, "pgt")
    ensure_same_shape(omega, pgt, "omega/pgt")
    return float(bce_tensor(torch.from_numpy(omega), torch.from_numpy(pgt)))


def saliency_loss(pred, gt) -> float:
    """Cross-entropy between a saliency prediction and a binary mask."""
    pred = as_scalar_map(pred, "pred")
    gt = as_binary_mask(gt, "gt")
    ensure_same_shape(pred, gt, "pred/gt")
    return float(bce_tensor(torch.from_numpy(pred), torch.from_numpy(gt)))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
