"""Building blocks shared by the embedder and the backbone."""
from __future__ import annotations

import math

import torch
from torch import nn

from . import numerics as nx


class RMSNorm(nn.Module):
    def __init__(self, d: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nx.rms_norm(x, self.weight, self.eps)


class CausalSelfAttention(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        if d % n_heads:
            raise nx.ContractError(f"width {d} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, d = x.shape
        hd = d // self.n_heads
        q, k, v = nx.linear(x, self.qkv.weight, self.qkv.bias).split(d, dim=-1)
        q = q.view(B, T, self.n_heads, hd).transpose(1, 2)
        k = k.view(B, T, self.n_heads, hd).transpose(1, 2)
        v = v.view(B, T, self.n_heads, hd).transpose(1, 2)
        scores = nx.matmul(q, k.transpose(-1, -2)) / math.sqrt(hd)
        future = torch.ones(T, T, dtype=torch.bool, device=x.device).triu(1)
        scores = scores.masked_fill(future, float("-inf"))
        att = nx.softmax(scores, dim=-1)
        y = nx.matmul(att, v).transpose(1, 2).reshape(B, T, d)
        return nx.linear(y, self.out.weight, self.out.bias)


class MLP(nn.Module):
    def __init__(self, d: int, mult: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(d, mult * d)
        self.fc2 = nn.Linear(mult * d, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nx.linear(nx.gelu(nx.linear(x, self.fc1.weight, self.fc1.bias)), self.fc2.weight, self.fc2.bias)


class TransformerBlock(nn.Module):
    """Pre-norm causal block: x + attn(norm(x)), then + mlp(norm(x))."""

    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.norm1 = RMSNorm(d)
        self.attn = CausalSelfAttention(d, n_heads)
        self.norm2 = RMSNorm(d)
        self.mlp = MLP(d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def gather_rows(source: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    """source (B, S, d), index (B, T) with -1 for "none" -> (B, T, d); -1 rows are zeros."""
    if source.shape[1] == 0:
        return source.new_zeros(index.shape[0], index.shape[1], source.shape[2])
    safe = index.clamp(min=0)
    out = torch.gather(source, 1, safe[..., None].expand(-1, -1, source.shape[2]))
    return out * (index >= 0)[..., None].to(out.dtype)


def compose_rows(token_rows: torch.Tensor, kinds: torch.Tensor, others: dict[int, torch.Tensor]) -> torch.Tensor:
    """Select per-row sources: kind 0 keeps the token row, kind c takes ``others[c]``."""
    out = token_rows
    for code, rows in others.items():
        out = torch.where((kinds == code)[..., None], rows, out)
    return out
