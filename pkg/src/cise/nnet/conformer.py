"""Conformer block with relative sinusoidal positional self-attention."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import torch
from torch import Tensor, nn

from ..errors import InputError


@dataclass
class ConformerConfig:
    model_dim: int = 64
    heads: int = 4
    ff_expansion: int = 4
    conv_kernel: int = 15
    dropout: float = 0.25
    layers: int = 2

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise InputError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise InputError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.conv_kernel % 2 == 0:
            raise InputError("conv_kernel must be odd for same-length depthwise convolution")

    def to_dict(self) -> dict:
        return asdict(self)


def relative_sinusoids(length: int, dim: int, dtype=torch.float32, device=None) -> Tensor:
    """Sinusoidal table for relative offsets ``length-1, ..., 0, ..., -(length-1)``.

    Returns shape ``(2*length - 1, dim)``.
    """
    rel = torch.arange(length - 1, -length, -1, dtype=torch.float64, device=device)
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64, device=device) * (-math.log(10000.0) / dim))
    pe = torch.zeros(2 * length - 1, dim, dtype=torch.float64, device=device)
    pe[:, 0::2] = torch.sin(rel[:, None] * div)
    pe[:, 1::2] = torch.cos(rel[:, None] * div[: dim // 2])
    return pe.to(dtype)


class RelPositionMultiHeadAttention(nn.Module):
    """Multi-head self-attention with Transformer-XL style relative position terms."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.d_k = dim // heads
        self.linear_q = nn.Linear(dim, dim)
        self.linear_k = nn.Linear(dim, dim)
        self.linear_v = nn.Linear(dim, dim)
        self.linear_out = nn.Linear(dim, dim)
        self.linear_pos = nn.Linear(dim, dim, bias=False)
        self.pos_bias_u = nn.Parameter(torch.zeros(heads, self.d_k))
        self.pos_bias_v = nn.Parameter(torch.zeros(heads, self.d_k))
        nn.init.xavier_uniform_(self.pos_bias_u)
        nn.init.xavier_uniform_(self.pos_bias_v)

    def forward(self, x: Tensor, pad_mask: Optional[Tensor] = None) -> Tensor:
        b, t, _ = x.shape
        h, d_k = self.heads, self.d_k
        q = self.linear_q(x).view(b, t, h, d_k)
        k = self.linear_k(x).view(b, t, h, d_k).transpose(1, 2)
        v = self.linear_v(x).view(b, t, h, d_k).transpose(1, 2)
        pos = relative_sinusoids(t, h * d_k, x.dtype, x.device)
        p = self.linear_pos(pos).view(2 * t - 1, h, d_k).permute(1, 2, 0)  # (h, d_k, 2t-1)

        q_u = (q + self.pos_bias_u).transpose(1, 2)
        q_v = (q + self.pos_bias_v).transpose(1, 2)
        content = q_u @ k.transpose(-2, -1)  # (b, h, t, t)
        position = q_v @ p  # (b, h, t, 2t-1)
        # row i, column j reads offset i - j, stored at index (t-1) - (i-j)
        idx = (t - 1) - torch.arange(t, device=x.device)[:, None] + torch.arange(t, device=x.device)[None, :]
        position = position.gather(-1, idx.expand(b, h, t, t))

        scores = (content + position) / math.sqrt(d_k)
        if pad_mask is not None:
            scores = scores.masked_fill(pad_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        if pad_mask is not None:
            attn = attn.masked_fill(pad_mask[:, None, :, None], 0.0)
        out = (attn @ v).transpose(1, 2).reshape(b, t, h * d_k)
        return self.linear_out(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, expansion: int, dropout: float):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.linear1 = nn.Linear(dim, dim * expansion)
        self.linear2 = nn.Linear(dim * expansion, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        x = self.dropout(nn.functional.silu(self.linear1(self.norm(x))))
        return self.dropout(self.linear2(x))


class ConvModule(nn.Module):
    def __init__(self, dim: int, kernel: int, dropout: float):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.pointwise1 = nn.Conv1d(dim, 2 * dim, 1)
        self.depthwise = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=dim)
        self.batch_norm = nn.BatchNorm1d(dim)
        self.pointwise2 = nn.Conv1d(dim, dim, 1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor, pad_mask: Optional[Tensor] = None) -> Tensor:
        y = self.norm(x).transpose(1, 2)  # (b, d, t)
        y = nn.functional.glu(self.pointwise1(y), dim=1)
        if pad_mask is not None:
            y = y.masked_fill(pad_mask[:, None, :], 0.0)
        y = nn.functional.silu(self.batch_norm(self.depthwise(y)))
        y = self.pointwise2(y)
        return self.dropout(y.transpose(1, 2))


class ConformerBlock(nn.Module):
    """Half-step FFN, relative-position MHSA, convolution module, half-step FFN, LayerNorm."""

    def __init__(self, cfg: ConformerConfig):
        super().__init__()
        d = cfg.model_dim
        self.ff1 = FeedForward(d, cfg.ff_expansion, cfg.dropout)
        self.attn_norm = nn.LayerNorm(d)
        self.attn = RelPositionMultiHeadAttention(d, cfg.heads)
        self.attn_dropout = nn.Dropout(cfg.dropout)
        self.conv = ConvModule(d, cfg.conv_kernel, cfg.dropout)
        self.ff2 = FeedForward(d, cfg.ff_expansion, cfg.dropout)
        self.final_norm = nn.LayerNorm(d)

    def residual_output_layers(self) -> list[nn.Module]:
        return [self.ff1.linear2, self.attn.linear_out, self.conv.pointwise2, self.ff2.linear2]

    def forward(self, x: Tensor, pad_mask: Optional[Tensor] = None) -> Tensor:
        if x.shape[1] == 0:
            raise InputError("conformer block needs at least one frame")
        x = x + 0.5 * self.ff1(x)
        x = x + self.attn_dropout(self.attn(self.attn_norm(x), pad_mask))
        x = x + self.conv(x, pad_mask)
        x = x + 0.5 * self.ff2(x)
        return self.final_norm(x)


class Conformer(nn.Module):
    def __init__(self, cfg: ConformerConfig):
        super().__init__()
        self.blocks = nn.ModuleList(ConformerBlock(cfg) for _ in range(cfg.layers))

    def forward(self, x: Tensor, pad_mask: Optional[Tensor] = None) -> Tensor:
        for block in self.blocks:
            x = block(x, pad_mask)
        return x
