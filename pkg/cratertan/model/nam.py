"""
Normalization-based attention: channel gating from batch-norm scale factors,
then spatial gating from pixel-norm scale factors
"""

from dataclasses import dataclass
from typing import List

import torch
import torch.nn as nn
import torch.nn.functional as F


class AttentionError(Exception):
    """Exception raised for invalid attention parameters or inputs"""
    pass


@dataclass
class BNParams:
    """
    Batch-norm parameters driving the channel gate
    """

    gamma: torch.Tensor
    beta: torch.Tensor
    running_mean: torch.Tensor
    running_var: torch.Tensor
    epsilon: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def from_batchnorm(cls, bn: nn.BatchNorm2d) -> "BNParams":
        """Live views of a BatchNorm2d's parameters and buffers"""
        return cls(bn.weight, bn.bias, bn.running_mean, bn.running_var, bn.eps, bn.momentum or 0.1)

    @property
    def scale(self) -> torch.Tensor:
        return self.gamma


@dataclass
class PixelNormParams:
    """
    Pixel-norm parameters driving the spatial gate; statistics are per channel,
    applied at every spatial position
    """

    lambda_scale: torch.Tensor
    beta_s: torch.Tensor
    running_mean: torch.Tensor
    running_var: torch.Tensor
    epsilon: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def from_batchnorm(cls, bn: nn.BatchNorm2d) -> "PixelNormParams":
        return cls(bn.weight, bn.bias, bn.running_mean, bn.running_var, bn.eps, bn.momentum or 0.1)

    @property
    def scale(self) -> torch.Tensor:
        return self.lambda_scale


def attention_weights(scale: torch.Tensor) -> torch.Tensor:
    """
    Normalized per-channel weights w_i = s_i / sum_j s_j

    Args:
        scale: Per-channel scale factors (may be negative)

    Returns:
        Weights summing to 1

    Raises:
        AttentionError: If the scale factors sum to zero
    """
    total = scale.sum()
    if float(total.detach().abs()) < 1e-12:
        raise AttentionError("Scale factors sum to zero; attention weights are undefined")
    return scale / total


def _as_batch(f: torch.Tensor) -> torch.Tensor:
    if f.dim() == 3:
        return f.unsqueeze(0)
    if f.dim() == 4:
        return f
    raise AttentionError(f"Expected a C x H x W or N x C x H x W feature map, got shape {tuple(f.shape)}")


def _check_lengths(f: torch.Tensor, params, name: str) -> None:
    channels = f.shape[1]
    for field_name in ("scale", "running_mean", "running_var"):
        value = getattr(params, field_name)
        if value.numel() != channels:
            raise AttentionError(
                f"{name}.{field_name} has {value.numel()} entries for {channels} channels"
            )


def _gate(f: torch.Tensor, params, training: bool, shift: torch.Tensor) -> torch.Tensor:
    x = _as_batch(f)
    weights = attention_weights(params.scale)
    normalized = F.batch_norm(
        x,
        params.running_mean,
        params.running_var,
        params.scale,
        shift,
        training,
        params.momentum,
        params.epsilon,
    )
    gate = torch.sigmoid(normalized * weights.view(1, -1, 1, 1))
    out = x * gate
    return out if f.dim() == 4 else out.squeeze(0)


def channel_attention(f: torch.Tensor, p: BNParams, training: bool = False) -> torch.Tensor:
    """
    Gate channels by sigmoid(W_gamma * BN(f)) and return f times the gate

    Args:
        f: Feature map, C x H x W or N x C x H x W
        p: Batch-norm parameters
        training: Use batch statistics (and update running statistics)

    Returns:
        Gated feature map, same shape as ``f``
    """
    _check_lengths(_as_batch(f), p, "BNParams")
    return _gate(f, p, training, p.beta)


def spatial_attention(f: torch.Tensor, p: PixelNormParams, training: bool = False) -> torch.Tensor:
    """
    Gate positions by sigmoid(W_lambda * BN_s(f)) and return f times the gate

    Args:
        f: Feature map, C x H x W or N x C x H x W
        p: Pixel-norm parameters
        training: Use batch statistics (and update running statistics)

    Returns:
        Gated feature map, same shape as ``f``
    """
    _check_lengths(_as_batch(f), p, "PixelNormParams")
    return _gate(f, p, training, p.beta_s)


def nam(
    f: torch.Tensor, cp: BNParams, sp: PixelNormParams, training: bool = False
) -> torch.Tensor:
    """Channel attention followed by spatial attention"""
    return spatial_attention(channel_attention(f, cp, training), sp, training)


class ChannelAttention(nn.Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.bn = nn.BatchNorm2d(channels, eps=eps, affine=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return channel_attention(x, BNParams.from_batchnorm(self.bn), self.training)


class SpatialAttention(nn.Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.bn = nn.BatchNorm2d(channels, eps=eps, affine=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return spatial_attention(x, PixelNormParams.from_batchnorm(self.bn), self.training)


class NAM(nn.Module):
    """
    Normalization-based attention block (channel then spatial), shape preserving
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.channels = channels
        self.channel = ChannelAttention(channels, eps)
        self.spatial = SpatialAttention(channels, eps)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.spatial(self.channel(x))

    def scale_factors(self) -> List[torch.Tensor]:
        """The gamma and lambda scale vectors of the two gates"""
        return [self.channel.bn.weight, self.spatial.bn.weight]
