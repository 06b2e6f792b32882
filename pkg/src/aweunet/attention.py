"""Position/channel attention and weight excitation blocks.

Index conventions: for a spatial map
``d[i, j]`` the softmax runs over the *first* index ``i``, so each column of
the returned matrix is a probability vector.  Output position ``j`` then
aggregates ``sum_i d[i, j] * value_i``.  The channel map uses the same layout.

Every module accepts ``(C, H, W)`` or ``(N, C, H, W)`` tensors.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn
from torch.utils.checkpoint import checkpoint

from .errors import ContractViolation

__all__ = [
    "reduced_channels",
    "spatial_attention",
    "channel_attention",
    "web_excitation",
    "WeightExcitation",
    "PositionAttention",
    "ChannelAttention",
    "PAWE",
    "CAWE",
]

# Above this many positions the spatial map is built in column blocks.
_CHUNK_POSITIONS = 4096


def reduced_channels(channels: int, ratio: int) -> int:
    return max(1, math.ceil(channels / ratio))


def _batched(y: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if y.dim() == 3:
        return y.unsqueeze(0), True
    if y.dim() == 4:
        return y, False
    raise ContractViolation(f"expected a (C,H,W) or (N,C,H,W) tensor, got shape {tuple(y.shape)}")


def spatial_attention(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Spatial affinity ``softmax_i(a_i . b_j)`` of shape ``(..., HW, HW)``.

    ``a`` and ``b`` are ``(k, H, W)`` or ``(N, k, H, W)`` projections.
    """
    if a.shape != b.shape:
        raise ContractViolation(f"projection shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    a4, squeeze = _batched(a)
    b4, _ = _batched(b)
    n, k = a4.shape[:2]
    af = a4.reshape(n, k, -1)
    bf = b4.reshape(n, k, -1)
    logits = af.transpose(1, 2) @ bf  # [n, i, j] = a_i . b_j
    d = torch.softmax(logits, dim=1)
    return d[0] if squeeze else d


def channel_attention(y: torch.Tensor) -> torch.Tensor:
    """Channel affinity ``softmax_i(y_i . y_j)`` of shape ``(..., C, C)``."""
    y4, squeeze = _batched(y)
    n, c = y4.shape[:2]
    flat = y4.reshape(n, c, -1)
    logits = flat @ flat.transpose(1, 2)
    e = torch.softmax(logits, dim=1)
    return e[0] if squeeze else e


def web_excitation(conv_weight: torch.Tensor, fc1: nn.Linear, fc2: nn.Linear) -> torch.Tensor:
    """Per-output-channel gains ``relu(fc2(relu(fc1(mean(W_j)))))``.

    The mean runs over the input-channel and kernel axes of ``conv_weight``.
    """
    if conv_weight.dim() < 2:
        raise ContractViolation("conv weight must have an output-channel axis and at least one more")
    c_out = conv_weight.shape[0]
    if fc1.in_features != c_out or fc2.in_features != fc1.out_features or fc2.out_features != c_out:
        raise ContractViolation(
            f"excitation layers {fc1.in_features}->{fc1.out_features}->{fc2.out_features} "
            f"do not fit {c_out} output channels"
        )
    pooled = conv_weight.reshape(c_out, -1).mean(dim=1)
    return F.relu(fc2(F.relu(fc1(pooled))))


class WeightExcitation(nn.Module):
    """Bottleneck MLP mapping a conv weight tensor to channel gains."""

    def __init__(self, channels: int, ratio: int = 4):
        super().__init__()
        hidden = reduced_channels(channels, ratio)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)
        nn.init.zeros_(self.fc1.bias)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, conv_weight: torch.Tensor) -> torch.Tensor:
        return web_excitation(conv_weight, self.fc1, self.fc2)


def _aggregate_block(a: torch.Tensor, b_blk: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
    d = torch.softmax(a.transpose(1, 2) @ b_blk, dim=1)
    return c @ d


class PositionAttention(nn.Module):
    """Position attention: ``alpha * (C @ D) + y`` with 1x1 projections."""

    def __init__(self, channels: int, ratio: int = 8, chunk_positions: int = _CHUNK_POSITIONS):
        super().__init__()
        k = reduced_channels(channels, ratio)
        self.channels = channels
        self.proj_a = nn.Conv2d(channels, k, 1)
        self.proj_b = nn.Conv2d(channels, k, 1)
        self.proj_c = nn.Conv2d(channels, channels, 1)
        self.alpha = nn.Parameter(torch.zeros(1))
        self.chunk_positions = chunk_positions

    def attend(self, y: torch.Tensor) -> torch.Tensor:
        """The attention-weighted aggregation, before scaling by alpha."""
        n, c, h, w = y.shape
        a = self.proj_a(y).reshape(n, -1, h * w)
        b = self.proj_b(y).reshape(n, -1, h * w)
        v = self.proj_c(y).reshape(n, c, h * w)
        positions = h * w
        if positions <= self.chunk_positions:
            out = _aggregate_block(a, b, v)
        else:
            # Softmax normalises over the full first index, so column blocks are exact.
            blocks = []
            for start in range(0, positions, self.chunk_positions):
                b_blk = b[:, :, start:start + self.chunk_positions]
                if torch.is_grad_enabled():
                    blocks.append(checkpoint(_aggregate_block, a, b_blk, v, use_reentrant=False))
                else:
                    blocks.append(_aggregate_block(a, b_blk, v))
            out = torch.cat(blocks, dim=2)
        return out.reshape(n, c, h, w)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        y4, squeeze = _batched(y)
        if y4.shape[1] != self.channels:
            raise ContractViolation(f"expected {self.channels} channels, got {y4.shape[1]}")
        out = self.alpha * self.attend(y4) + y4
        return out[0] if squeeze else out


class ChannelAttention(nn.Module):
    """Channel attention: ``alpha * (E^T @ Y) + y``; parameter-free apart from alpha."""

    def __init__(self):
        super().__init__()
        self.alpha = nn.Parameter(torch.zeros(1))

    def attend(self, y: torch.Tensor) -> torch.Tensor:
        n, c, h, w = y.shape
        flat = y.reshape(n, c, -1)
        e = torch.softmax(flat @ flat.transpose(1, 2), dim=1)
        return (e.transpose(1, 2) @ flat).reshape(n, c, h, w)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        y4, squeeze = _batched(y)
        out = self.alpha * self.attend(y4) + y4
        return out[0] if squeeze else out


class PAWE(nn.Module):
    """Position attention plus weight excitation gating.

    ``main_conv`` is the block's feature convolution.  The operator itself
    (``forward``) only reads its weights; :meth:`conv_forward` runs the full
    ``conv -> ReLU -> operator`` stage used inside the network.
    """

    def __init__(self, channels: int, in_channels: int | None = None, web_ratio: int = 4,
                 attn_ratio: int = 8):
        super().__init__()
        in_channels = channels if in_channels is None else in_channels
        self.channels = channels
        self.main_conv = nn.Conv2d(in_channels, channels, 3, padding=1)
        self.pab = PositionAttention(channels, attn_ratio)
        self.web = WeightExcitation(channels, web_ratio)

    def excitation(self) -> torch.Tensor:
        return self.web(self.main_conv.weight)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        y4, squeeze = _batched(y)
        gains = self.excitation().view(1, -1, 1, 1)
        out = self.pab(y4) + gains * y4
        return out[0] if squeeze else out

    def conv_forward(self, x: torch.Tensor) -> torch.Tensor:
        return self(F.relu(self.main_conv(x)))


class CAWE(nn.Module):
    """Channel attention plus weight excitation gating from ``skip_conv``."""

    def __init__(self, channels: int, web_ratio: int = 4):
        super().__init__()
        self.channels = channels
        self.skip_conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.cab = ChannelAttention()
        self.web = WeightExcitation(channels, web_ratio)

    def excitation(self) -> torch.Tensor:
        return self.web(self.skip_conv.weight)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        y4, squeeze = _batched(y)
        if y4.shape[1] != self.channels:
            raise ContractViolation(f"expected {self.channels} channels, got {y4.shape[1]}")
        gains = self.excitation().view(1, -1, 1, 1)
        out = self.cab(y4) + gains * y4
        return out[0] if squeeze else out

    def conv_forward(self, x: torch.Tensor) -> torch.Tensor:
        return self(F.relu(self.skip_conv(x)))
