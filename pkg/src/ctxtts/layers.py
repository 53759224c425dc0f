"""Transformer and Conformer building blocks shared by both models."""

import math

import torch
from torch import nn
import torch.nn.functional as F


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32, device=None) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64, device=device).unsqueeze(1)
    half = torch.arange(0, dim, 2, dtype=torch.float64, device=device)
    freq = torch.exp(-math.log(10000.0) * half / dim)
    pe = torch.zeros(length, dim, dtype=torch.float64, device=device)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)[:, : dim // 2]
    return pe.to(dtype)


class FeedForward(nn.Module):
    def __init__(self, dim, mult=4, dropout=0.0):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, dim * mult),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(dim * mult, dim),
            nn.Dropout(dropout),
        )

    def forward(self, x):
        return self.net(x)


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, dim, heads, ff_mult=4, dropout=0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, ff_mult, dropout)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, pad_mask=None):
        y = self.norm1(x)
        y, _ = self.attn(y, y, y, key_padding_mask=pad_mask, need_weights=False)
        x = x + self.dropout(y)
        return x + self.ff(self.norm2(x))


class ConvModule(nn.Module):
    """Conformer convolution module; LayerNorm replaces BatchNorm so outputs do not depend on batch composition."""

    def __init__(self, dim, kernel_size=31, dropout=0.0):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.pointwise1 = nn.Conv1d(dim, 2 * dim, 1)
        self.depthwise = nn.Conv1d(dim, dim, kernel_size, padding=kernel_size // 2, groups=dim)
        self.mid_norm = nn.LayerNorm(dim)
        self.pointwise2 = nn.Conv1d(dim, dim, 1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, pad_mask=None):
        y = self.norm(x)
        if pad_mask is not None:
            y = y.masked_fill(pad_mask.unsqueeze(-1), 0.0)
        y = F.glu(self.pointwise1(y.transpose(1, 2)), dim=1)
        y = self.depthwise(y).transpose(1, 2)
        y = F.silu(self.mid_norm(y))
        y = self.pointwise2(y.transpose(1, 2)).transpose(1, 2)
        return self.dropout(y)


class CrossConformerBlock(nn.Module):
    """Conformer block with a cross-attention sub-layer right after self-attention.

    Keys and values of the cross-attention come from ``memory`` without any
    positional information, so the block is invariant to permutations of the
    memory rows.
    """

    def __init__(self, dim, heads, kernel_size=31, ff_mult=4, dropout=0.0):
        super().__init__()
        self.ff1_norm = nn.LayerNorm(dim)
        self.ff1 = FeedForward(dim, ff_mult, dropout)
        self.self_norm = nn.LayerNorm(dim)
        self.self_attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.cross_norm = nn.LayerNorm(dim)
        self.cross_attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.conv = ConvModule(dim, kernel_size, dropout)
        self.ff2_norm = nn.LayerNorm(dim)
        self.ff2 = FeedForward(dim, ff_mult, dropout)
        self.out_norm = nn.LayerNorm(dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, memory, pad_mask=None, memory_pad_mask=None):
        x = x + 0.5 * self.ff1(self.ff1_norm(x))
        y = self.self_norm(x)
        y, _ = self.self_attn(y, y, y, key_padding_mask=pad_mask, need_weights=False)
        x = x + self.dropout(y)
        y, _ = self.cross_attn(self.cross_norm(x), memory, memory, key_padding_mask=memory_pad_mask, need_weights=False)
        x = x + self.dropout(y)
        x = x + self.conv(x, pad_mask)
        x = x + 0.5 * self.ff2(self.ff2_norm(x))
        return self.out_norm(x)
