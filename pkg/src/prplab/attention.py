"""Motion attention maps: difference, 3D average pooling, affine activation, trilinear upsampling.

All operators accept an optional leading batch dimension. Attention is a constant weight for the
reconstruction loss, so everything here runs without autograd.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from prplab.errors import ConfigError, InputError


@dataclass
class AttentionParams:
    lambda1: float = 0.8
    lambda2: float = 2.0
    pool_kernel: tuple[int, int, int] = (15, 28, 28)
    pool_stride: tuple[int, int, int] = (16, 7, 7)
    upsample_mode: str = "trilinear"

    def __post_init__(self) -> None:
        self.pool_kernel = tuple(int(k) for k in self.pool_kernel)
        self.pool_stride = tuple(int(k) for k in self.pool_stride)
        if not 0.0 <= self.lambda1 <= 1.0 <= self.lambda2:
            raise ConfigError(
                f"attention: need 0 <= lambda1 <= 1 <= lambda2, got ({self.lambda1}, {self.lambda2})"
            )
        _check_positive("attention.pool_kernel", self.pool_kernel)
        _check_positive("attention.pool_stride", self.pool_stride)
        if self.upsample_mode != "trilinear":
            raise ConfigError("attention.upsample_mode: only 'trilinear' is supported")


def _check_positive(name: str, dims) -> None:
    if len(dims) != 3 or any(int(d) <= 0 for d in dims):
        raise ConfigError(f"{name} must be three positive integers, got {tuple(dims)}")


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.detach()
    return torch.from_numpy(np.ascontiguousarray(x))


@torch.no_grad()
def frame_difference(R) -> torch.Tensor:
    """|R^t - R^(t+1)|^2 averaged over colour: (..., T, H, W, C) -> (..., T-1, H, W)."""
    R = _as_tensor(R)
    if R.ndim == 3:
        R = R[..., None]
    if R.shape[-4] < 2:
        raise InputError(f"frame difference needs at least 2 frames, got {R.shape[-4]}")
    diff = R[..., 1:, :, :, :] - R[..., :-1, :, :, :]
    return (diff * diff).mean(dim=-1)


@torch.no_grad()
def pool3d_average(D, kernel, stride) -> torch.Tensor:
    """Average-pool (..., T, H, W) maps; axes shorter than the kernel are replicate-padded first."""
    _check_positive("pool kernel", kernel)
    _check_positive("pool stride", stride)
    D = _as_tensor(D)
    single = D.ndim == 3
    x = D[None, None] if single else D.reshape(-1, 1, *D.shape[-3:])
    pads = []
    for size, k in zip(reversed(x.shape[-3:]), reversed(tuple(kernel))):
        short = max(int(k) - size, 0)
        pads += [short // 2, short - short // 2]
    if any(pads):
        x = F.pad(x, pads, mode="replicate")
    out = F.avg_pool3d(x, kernel_size=tuple(kernel), stride=tuple(stride))
    return out[0, 0] if single else out.reshape(*D.shape[:-3], *out.shape[-3:])


@torch.no_grad()
def activate(D, lambda1: float = 0.8, lambda2: float = 2.0, batch_dims: int = 0) -> torch.Tensor:
    """Affine map of each sample's [min, max] onto [lambda1, lambda2]; constant samples map to 1.0.

    ``batch_dims`` leading axes are treated as independent samples.
    """
    D = _as_tensor(D)
    flat = D.reshape(*D.shape[:batch_dims], -1)
    lo = flat.min(dim=-1, keepdim=True).values
    hi = flat.max(dim=-1, keepdim=True).values
    span = hi - lo
    degenerate = span <= 0
    scaled = (lambda2 - lambda1) * (flat - lo) / torch.where(degenerate, torch.ones_like(span), span) + lambda1
    out = torch.where(degenerate, torch.ones_like(scaled), scaled)
    return out.reshape(D.shape)


@torch.no_grad()
def upsample3d(M, target) -> torch.Tensor:
    """Trilinear resize of (..., T, H, W) to ``target`` with corner alignment."""
    target = tuple(int(t) for t in target)
    if len(target) != 3 or any(t <= 0 for t in target):
        raise ConfigError(f"upsample target must be three positive sizes, got {target}")
    M = _as_tensor(M)
    single = M.ndim == 3
    x = M[None, None] if single else M.reshape(-1, 1, *M.shape[-3:])
    if tuple(x.shape[-3:]) != target:
        x = F.interpolate(x, size=target, mode="trilinear", align_corners=True)
    return x[0, 0] if single else x.reshape(*M.shape[:-3], *target)


@torch.no_grad()
def motion_attention(R, params: AttentionParams, target) -> torch.Tensor:
    """M = U(A(P(D(R)))) for R of shape (T, H, W, C) or a batch (B, T, H, W, C).

    Returns weights of shape ``target`` (or (B, *target)).
    """
    R = _as_tensor(R)
    batched = R.ndim == 5
    D = frame_difference(R)
    P = pool3d_average(D, params.pool_kernel, params.pool_stride)
    A = activate(P, params.lambda1, params.lambda2, batch_dims=1 if batched else 0)
    return upsample3d(A, target)


def attention_to_uint8(M, params: AttentionParams) -> np.ndarray:
    """Map weights linearly from [lambda1, lambda2] to [0, 255] grayscale."""
    M = _as_tensor(M).double().numpy()
    span = params.lambda2 - params.lambda1
    scaled = (M - params.lambda1) / span if span > 0 else np.zeros_like(M)
    return np.round(np.clip(scaled, 0.0, 1.0) * 255.0).astype(np.uint8)
