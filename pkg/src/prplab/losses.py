"""Rate-classification cross entropy, motion-weighted MSE and their weighted sum."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from prplab.errors import ConfigError, InputError

LOG_FLOOR = math.log(1e-12)


@dataclass
class LossWeights:
    lambda_d: float = 0.1
    lambda_g: float = 1.0

    def __post_init__(self) -> None:
        if self.lambda_d < 0 or self.lambda_g < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.lambda_d == 0 and self.lambda_g == 0:
            raise ConfigError("loss weights must not both be zero")


@dataclass
class LossReport:
    l_d: float
    l_g: float
    joint: float
    dp_accuracy: float


def softmax(logits: torch.Tensor) -> torch.Tensor:
    shifted = logits - logits.max(dim=-1, keepdim=True).values
    e = shifted.exp()
    return e / e.sum(dim=-1, keepdim=True)


def discriminative_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean negative log softmax probability of the true class (max-shifted, floored at log 1e-12)."""
    if logits.ndim == 1:
        logits = logits[None]
    labels = torch.as_tensor(labels, dtype=torch.long, device=logits.device).reshape(-1)
    C = logits.shape[-1]
    if labels.numel() != logits.shape[0]:
        raise InputError(f"{labels.numel()} labels for {logits.shape[0]} logit rows")
    if labels.numel() and (labels.min() < 0 or labels.max() >= C):
        raise InputError(f"label out of range [0, {C})")
    shifted = logits - logits.max(dim=-1, keepdim=True).values.detach()
    log_p = shifted - shifted.exp().sum(dim=-1, keepdim=True).log()
    picked = log_p.gather(-1, labels[:, None])[:, 0]
    return -picked.clamp(min=LOG_FLOOR).mean()


def generative_loss(Y: torch.Tensor, G: torch.Tensor, M: torch.Tensor) -> torch.Tensor:
    """Attention-weighted squared error, (1/N) sum_{t,i,j} m (y - g)^2 averaged over colour and batch.

    Y and G are (B, C, T, H, W) or (C, T, H, W); M is (B, T, H, W) / (T, H, W) and is
    treated as a constant.
    """
    if Y.shape != G.shape:
        raise InputError(f"prediction {tuple(Y.shape)} and ground truth {tuple(G.shape)} differ")
    M = torch.as_tensor(M, dtype=Y.dtype, device=Y.device).detach()
    if Y.ndim == 4:
        Y, G = Y[None], G[None]
        M = M[None] if M.ndim == 3 else M
    if M.ndim == 4:
        M = M[:, None]
    if M.shape[0] != Y.shape[0] or M.shape[-3:] != Y.shape[-3:]:
        raise InputError(f"attention {tuple(M.shape)} does not match clip {tuple(Y.shape)}")
    err = (Y - G) ** 2
    return (M * err).mean()


def joint_loss(l_d, l_g, w: LossWeights):
    return w.lambda_d * l_d + w.lambda_g * l_g


def rate_accuracy(logits: torch.Tensor, labels) -> float:
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() == 0:
        return float("nan")
    return float((logits.argmax(dim=-1).cpu() == labels.cpu()).float().mean())
