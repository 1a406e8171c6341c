"""Frozen toy image encoder, vision projector and embedder-side vision adapter."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .numerics import DimensionError


@dataclass(frozen=True)
class VisionConfig:
    height: int = 16
    width: int = 16
    channels: int = 3
    patch: int = 4
    d_vis: int = 32
    seed: int = 1234

    @property
    def n_patches(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels


def sinusoidal_positions(n: int, d: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    i = torch.arange(0, d, 2, dtype=torch.float64)
    freq = torch.exp(-math.log(10000.0) * i / d)
    pe = torch.zeros(n, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq[: d // 2])
    return pe.float()


def patchify(images: torch.Tensor, patch: int) -> torch.Tensor:
    """(B, H, W, C) -> (B, P, patch*patch*C), patches in row-major order."""
    B, H, W, C = images.shape
    if H % patch or W % patch:
        raise DimensionError(f"patchify: image {H}x{W} is not divisible by patch size {patch}")
    x = images.reshape(B, H // patch, patch, W // patch, patch, C)
    x = x.permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, (H // patch) * (W // patch), patch * patch * C)


class VisionEncoder(nn.Module):
    """Patchify, fixed random projection, fixed sinusoidal positions. Never trained."""

    def __init__(self, cfg: VisionConfig):
        super().__init__()
        self.cfg = cfg
        g = torch.Generator().manual_seed(cfg.seed)
        w = torch.randn(cfg.d_vis, cfg.patch_dim, generator=g) / math.sqrt(cfg.patch_dim)
        self.proj = nn.Parameter(w, requires_grad=False)
        self.pos = nn.Parameter(sinusoidal_positions(cfg.n_patches, cfg.d_vis), requires_grad=False)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        squeeze = images.dim() == 3
        if squeeze:
            images = images[None]
        cfg = self.cfg
        if images.shape[-1] != cfg.channels:
            raise DimensionError(f"encode_image: expected {cfg.channels} channels, got {tuple(images.shape)}")
        patches = patchify(images.to(self.proj.dtype), cfg.patch)
        feats = nx.linear(patches, self.proj) + self.pos
        return feats[0] if squeeze else feats


class MLPProjector(nn.Module):
    """Linear -> GELU -> Linear; used for both the vision and the tor projector."""

    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_out)
        self.fc2 = nn.Linear(d_out, d_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.fc1.in_features:
            raise DimensionError(
                f"projector: input width {x.shape[-1]} != {self.fc1.in_features} ({tuple(x.shape)})"
            )
        h = nx.gelu(nx.linear(x, self.fc1.weight, self.fc1.bias))
        return nx.linear(h, self.fc2.weight, self.fc2.bias)


class VisionAdapter(nn.Module):
    def __init__(self, d_vis: int, d_emb: int):
        super().__init__()
        self.fc = nn.Linear(d_vis, d_emb)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.fc.in_features:
            raise DimensionError(f"vision_adapt: input width {x.shape[-1]} != {self.fc.in_features}")
        return nx.linear(x, self.fc.weight, self.fc.bias)


def image_tensor(grid) -> torch.Tensor:
    """Nested H×W×C lists (or an array) -> float32 tensor clamped to [0, 1]."""
    arr = np.asarray(grid, dtype=np.float32)
    if arr.ndim != 3:
        raise DimensionError(f"image must be H×W×C, got shape {arr.shape}")
    return torch.from_numpy(np.clip(arr, 0.0, 1.0))
