"""3D CNN encoders (C3D / R3D / R(2+1)D), playback-rate head, slow-down decoder and checkpoints.

Tensors use the PyTorch video layout (B, C, T, H, W).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from prplab.errors import ConfigError, InputError

VARIANTS = ("C3D", "R3D", "R2plus1D")
CHECKPOINT_FORMAT = "prp-ckpt-v1"


@dataclass
class BackboneConfig:
    variant: str = "C3D"
    block_channels: tuple[int, ...] = (64, 128, 256, 512, 512)
    conv_kernel: tuple[int, int, int] = (3, 3, 3)
    # downsampling applied after each block; the last block keeps time so that
    # a 16-frame clip yields a 2-frame conv5 map
    temporal_pool_strides: tuple[int, ...] = (1, 2, 2, 2, 1)
    spatial_pool_strides: tuple[int, ...] = (2, 2, 2, 2, 2)
    input_shape: tuple[int, int, int, int] = (16, 112, 112, 3)

    def __post_init__(self) -> None:
        for name in ("block_channels", "conv_kernel", "temporal_pool_strides", "spatial_pool_strides", "input_shape"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.variant not in VARIANTS:
            raise ConfigError(f"backbone.variant must be one of {VARIANTS}, got {self.variant!r}")
        if len(self.block_channels) != 5 or min(self.block_channels) <= 0:
            raise ConfigError("backbone.block_channels must be 5 positive integers")
        if len(self.temporal_pool_strides) != 5 or len(self.spatial_pool_strides) != 5:
            raise ConfigError("backbone pool strides need one entry per block (5)")
        if min(self.temporal_pool_strides + self.spatial_pool_strides) < 1:
            raise ConfigError("backbone pool strides must be >= 1")
        if any(k % 2 == 0 or k < 1 for k in self.conv_kernel):
            raise ConfigError("backbone.conv_kernel entries must be odd")
        if len(self.input_shape) != 4:
            raise ConfigError("backbone.input_shape must be (l, H, W, C)")

    @property
    def temporal_factor(self) -> int:
        return math.prod(self.temporal_pool_strides)

    @property
    def feature_dim(self) -> int:
        return self.block_channels[-1]

    def conv5_shape(self, clip_shape: Optional[tuple[int, int, int]] = None) -> tuple[int, int, int]:
        """(T, H, W) of the conv5 map for a (l, H, W) clip; ceil division per stage."""
        t, h, w = clip_shape or self.input_shape[:3]
        for ts, ss in zip(self.temporal_pool_strides, self.spatial_pool_strides):
            t, h, w = math.ceil(t / ts), math.ceil(h / ss), math.ceil(w / ss)
        return t, h, w


@dataclass
class DecoderConfig:
    block_channels: tuple[int, ...] = (256, 128, 64, 3)
    recon_rate: int = 2

    def __post_init__(self) -> None:
        self.block_channels = tuple(int(v) for v in self.block_channels)
        if len(self.block_channels) != 4 or min(self.block_channels) <= 0:
            raise ConfigError("decoder.block_channels must be 4 positive integers (last = output channels)")
        if self.recon_rate not in (1, 2, 4):
            raise ConfigError(f"decoder recon_rate must be 1, 2 or 4, got {self.recon_rate}")

    @property
    def strides(self) -> list[tuple[int, int, int]]:
        return [(2, 2, 2), (2, 2, 2), (2, 2, 2), (self.recon_rate, 2, 2)]


# --------------------------------------------------------------------------
# Blocks
# --------------------------------------------------------------------------

def _pad(kernel) -> tuple[int, ...]:
    return tuple(k // 2 for k in kernel)


class C3DBlock(nn.Module):
    """conv -> BN -> ReLU."""

    def __init__(self, in_ch: int, out_ch: int, kernel=(3, 3, 3)):
        super().__init__()
        self.conv = nn.Conv3d(in_ch, out_ch, kernel, padding=_pad(kernel), bias=False)
        self.bn = nn.BatchNorm3d(out_ch)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.relu(self.bn(self.conv(x)))


class SpatioTemporalConv(nn.Module):
    """(2+1)D factorisation: spatial 1xkxk conv, BN, ReLU, temporal tx1x1 conv."""

    def __init__(self, in_ch: int, out_ch: int, kernel=(3, 3, 3), mid_ch: Optional[int] = None):
        super().__init__()
        t, kh, kw = kernel
        mid_ch = mid_ch or out_ch
        self.spatial = nn.Conv3d(in_ch, mid_ch, (1, kh, kw), padding=(0, kh // 2, kw // 2), bias=False)
        self.bn = nn.BatchNorm3d(mid_ch)
        self.relu = nn.ReLU(inplace=True)
        self.temporal = nn.Conv3d(mid_ch, out_ch, (t, 1, 1), padding=(t // 2, 0, 0), bias=False)

    def forward(self, x):
        return self.temporal(self.relu(self.bn(self.spatial(x))))


class ResidualBlock(nn.Module):
    """Two convs with BN; identity (or 1x1x1 projection) added before the last ReLU."""

    def __init__(self, in_ch: int, out_ch: int, kernel=(3, 3, 3), factorized: bool = False):
        super().__init__()
        if factorized:
            self.conv1 = SpatioTemporalConv(in_ch, out_ch, kernel)
            self.conv2 = SpatioTemporalConv(out_ch, out_ch, kernel)
        else:
            self.conv1 = nn.Conv3d(in_ch, out_ch, kernel, padding=_pad(kernel), bias=False)
            self.conv2 = nn.Conv3d(out_ch, out_ch, kernel, padding=_pad(kernel), bias=False)
        self.bn1 = nn.BatchNorm3d(out_ch)
        self.bn2 = nn.BatchNorm3d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        if in_ch != out_ch:
            self.shortcut = nn.Sequential(nn.Conv3d(in_ch, out_ch, 1, bias=False), nn.BatchNorm3d(out_ch))
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


def make_block(variant: str, in_ch: int, out_ch: int, kernel=(3, 3, 3)) -> nn.Module:
    if variant == "C3D":
        return C3DBlock(in_ch, out_ch, kernel)
    if variant == "R3D":
        return ResidualBlock(in_ch, out_ch, kernel)
    if variant == "R2plus1D":
        return ResidualBlock(in_ch, out_ch, kernel, factorized=True)
    raise ConfigError(f"unknown backbone variant {variant!r}")


# --------------------------------------------------------------------------
# Networks
# --------------------------------------------------------------------------

class Encoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        in_ch = cfg.input_shape[3]
        self.blocks = nn.ModuleList()
        self.pools = nn.ModuleList()
        for out_ch, ts, ss in zip(cfg.block_channels, cfg.temporal_pool_strides, cfg.spatial_pool_strides):
            self.blocks.append(make_block(cfg.variant, in_ch, out_ch, cfg.conv_kernel))
            stride = (ts, ss, ss)
            if stride == (1, 1, 1):
                self.pools.append(nn.Identity())
            else:
                self.pools.append(nn.MaxPool3d(kernel_size=stride, stride=stride, ceil_mode=True))
            in_ch = out_ch

    def forward(self, x):
        for block, pool in zip(self.blocks, self.pools):
            x = pool(block(x))
        return x


class Decoder(nn.Module):
    """Four deconvolution blocks; the last one upsamples time by the reconstruction rate."""

    def __init__(self, in_ch: int, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        self.in_ch = in_ch
        c1, c2, c3, out_ch = cfg.block_channels
        strides = cfg.strides
        self.blocks = nn.ModuleList()
        prev = in_ch
        for ch, stride in zip((c1, c2, c3), strides[:3]):
            self.blocks.append(nn.Sequential(
                nn.ConvTranspose3d(prev, ch, kernel_size=stride, stride=stride, bias=False),
                nn.BatchNorm3d(ch),
                nn.ReLU(inplace=True),
                C3DBlock(ch, ch),
            ))
            prev = ch
        self.blocks.append(nn.Sequential(
            nn.ConvTranspose3d(prev, prev, kernel_size=strides[3], stride=strides[3], bias=False),
            nn.BatchNorm3d(prev),
            nn.ReLU(inplace=True),
            nn.Conv3d(prev, out_ch, 3, padding=1),
        ))

    def forward(self, feature_map, target_hw):
        if feature_map.shape[1] != self.in_ch:
            raise ConfigError(f"decoder expects {self.in_ch} feature channels, got {feature_map.shape[1]}")
        x = feature_map
        for block in self.blocks:
            x = block(x)
        if tuple(x.shape[-2:]) != tuple(target_hw):
            x = F.interpolate(x, size=(x.shape[2], *target_hw), mode="trilinear", align_corners=False)
        return x


class PRPNet(nn.Module):
    """Encoder shared by the rate classifier and the reconstruction decoder."""

    def __init__(self, backbone: BackboneConfig, num_rates: int,
                 decoder: Optional[DecoderConfig] = None, target_hw: Optional[tuple[int, int]] = None):
        super().__init__()
        if num_rates < 2:
            raise ConfigError("need at least two playback-rate classes")
        self.backbone_cfg = backbone
        self.decoder_cfg = decoder
        self.target_hw = tuple(target_hw or backbone.input_shape[1:3])
        self.encoder = Encoder(backbone)
        self.rate_head = nn.Linear(backbone.feature_dim, num_rates)
        self.decoder = Decoder(backbone.feature_dim, decoder) if decoder is not None else None

    def forward(self, clip, with_decoder: bool = True):
        feature_map, feature_vec = encode(self.encoder, clip)
        out = {"feature_map": feature_map, "feature_vec": feature_vec,
               "logits": classify_rate(self.rate_head, feature_vec)}
        if with_decoder and self.decoder is not None:
            out["recon"] = decode(self.decoder, feature_map, self.target_hw)
        return out


class ActionClassifier(nn.Module):
    def __init__(self, backbone: BackboneConfig, num_classes: int, dropout: float = 0.0):
        super().__init__()
        self.backbone_cfg = backbone
        self.encoder = Encoder(backbone)
        self.dropout = nn.Dropout(dropout) if dropout > 0 else nn.Identity()
        self.head = nn.Linear(backbone.feature_dim, num_classes)

    def forward(self, clip):
        _, vec = encode(self.encoder, clip)
        return self.head(self.dropout(vec))


def encode(encoder: Encoder, clip: torch.Tensor):
    """Return (conv5 feature map, globally averaged feature vector)."""
    cfg = encoder.cfg
    if clip.ndim != 5 or clip.shape[1] != cfg.input_shape[3]:
        raise InputError(f"expected (B, {cfg.input_shape[3]}, T, H, W) clip, got {tuple(clip.shape)}")
    if tuple(clip.shape[2:]) != tuple(cfg.input_shape[:3]):
        raise InputError(f"clip shape {tuple(clip.shape[2:])} does not match backbone input {cfg.input_shape[:3]}")
    feature_map = encoder(clip)
    return feature_map, feature_map.mean(dim=(2, 3, 4))


def classify_rate(head: nn.Linear, feature_vec: torch.Tensor) -> torch.Tensor:
    return head(feature_vec)


def decode(decoder: Decoder, feature_map: torch.Tensor, target_hw) -> torch.Tensor:
    return decoder(feature_map, target_hw)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def clips_to_tensor(clips) -> torch.Tensor:
    """Stack (T, H, W, C) numpy clips into a (B, C, T, H, W) float tensor."""
    arr = np.stack([np.asarray(c, dtype=np.float32) for c in clips])
    return torch.from_numpy(arr).permute(0, 4, 1, 2, 3).contiguous()


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

@dataclass
class Checkpoint:
    kind: str
    config: dict
    model_state: dict
    optimizer_state: Optional[dict] = None
    epoch: int = 0
    val_loss: float = float("nan")
    extra: dict = field(default_factory=dict)

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(**self.config["backbone"])

    def encoder_state(self) -> dict:
        prefix = "encoder."
        return {k[len(prefix):]: v for k, v in self.model_state.items() if k.startswith(prefix)}


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "kind": ckpt.kind,
        "config": json.dumps(ckpt.config, sort_keys=True, indent=2),
        "model_state": {k: v.detach().cpu() for k, v in ckpt.model_state.items()},
        "optimizer_state": ckpt.optimizer_state,
        "epoch": int(ckpt.epoch),
        "val_loss": float(ckpt.val_loss),
        "extra": json.dumps(ckpt.extra, sort_keys=True),
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as err:
        raise InputError(f"cannot read checkpoint {path}: {err}") from err
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise InputError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    return Checkpoint(
        kind=payload["kind"],
        config=json.loads(payload["config"]),
        model_state=payload["model_state"],
        optimizer_state=payload.get("optimizer_state"),
        epoch=payload["epoch"],
        val_loss=payload["val_loss"],
        extra=json.loads(payload.get("extra") or "{}"),
    )


def config_to_dict(obj: Any) -> Any:
    return json.loads(json.dumps(asdict(obj)))
