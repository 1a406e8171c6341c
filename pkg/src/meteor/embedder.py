"""Rationale embedder: a stack of selective state-space blocks (or a causal
transformer for comparison) whose outputs at <tor> positions are lifted into
the backbone width by the tor projector."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from . import numerics as nx
from .layers import RMSNorm, TransformerBlock
from .numerics import ContractError, DimensionError
from .tokenizer import TOR, VOCAB_SIZE
from .vision import MLPProjector


class ExtractionError(ValueError):
    pass


@dataclass(frozen=True)
class EmbedderConfig:
    d_emb: int = 64
    n_layers: int = 4
    d_state: int = 16
    expansion: int = 2
    conv_kernel: int = 4
    architecture: str = "ssm"
    n_heads: int = 4
    max_len: int = 4096

    def __post_init__(self) -> None:
        for name in ("d_emb", "n_layers", "d_state", "expansion", "conv_kernel", "n_heads", "max_len"):
            if getattr(self, name) < 1:
                raise ContractError(f"EmbedderConfig.{name} must be positive")
        if self.architecture not in ("ssm", "transformer"):
            raise ContractError(f"unknown embedder architecture {self.architecture!r}")

    @property
    def d_inner(self) -> int:
        return self.expansion * self.d_emb

    @property
    def dt_rank(self) -> int:
        return math.ceil(self.d_emb / 16)


# ---------------------------------------------------------------------------
# selective scan
# ---------------------------------------------------------------------------

class _SelectiveScan(torch.autograd.Function):
    """Fused scan over time-major inputs.

    u, delta: (T, b, d); B, C: (T, b, n); A: (d, n). Returns y without the D skip term.
    States are kept per step in a (b, d, n) buffer small enough to stay in cache;
    the backward pass walks time in reverse and recomputes exp(delta * A).
    """

    @staticmethod
    def forward(ctx, u, delta, A, B, C):
        T, b, d = u.shape
        H = u.new_empty(T, b, d, A.shape[1])
        y = u.new_empty(T, b, d)
        du = delta * u
        h = u.new_zeros(b, d, A.shape[1])
        for t in range(T):
            decay = torch.exp(delta[t, :, :, None] * A)
            torch.addcmul(du[t, :, :, None] * B[t, :, None, :], decay, h, out=H[t])
            h = H[t]
            torch.bmm(h, C[t, :, :, None], out=y[t, :, :, None])
        ctx.save_for_backward(u, delta, A, B, C, H)
        return y

    @staticmethod
    def backward(ctx, gy):
        u, delta, A, B, C, H = ctx.saved_tensors
        T = u.shape[0]
        gy = gy.contiguous()
        du = delta * u
        g = torch.zeros_like(H[0])
        g_du = torch.empty_like(u)
        g_decay_delta = torch.zeros_like(u)
        gB = torch.empty_like(B)
        gC = torch.empty_like(C)
        gA = torch.zeros_like(g)
        for t in range(T - 1, -1, -1):
            g.addcmul_(gy[t, :, :, None], C[t, :, None, :])
            torch.bmm(gy[t, :, None, :], H[t], out=gC[t, :, None, :])
            torch.bmm(g, B[t, :, :, None], out=g_du[t, :, :, None])
            torch.bmm(du[t, :, None, :], g, out=gB[t, :, None, :])
            decay = torch.exp(delta[t, :, :, None] * A)
            if t > 0:
                g_arg = g * H[t - 1] * decay
                gA.addcmul_(g_arg, delta[t, :, :, None])
                torch.sum(g_arg * A, dim=-1, out=g_decay_delta[t])
            g = g * decay
        return g_du * delta, g_du * u + g_decay_delta, gA.sum(0), gB, gC


def selective_scan(
    x: torch.Tensor,
    A_log: torch.Tensor,
    B: torch.Tensor,
    C: torch.Tensor,
    delta: torch.Tensor,
    D: torch.Tensor,
) -> torch.Tensor:
    """Input-dependent diagonal state-space scan.

    x, delta: (..., T, d_inner); B, C: (..., T, d_state); A_log: (d_inner, d_state); D: (d_inner,).
    Per channel d and state n, with A = -exp(A_log):
        h_t = exp(delta_t * A) * h_{t-1} + delta_t * B_t * x_t,  h_0 = 0
        y_t = sum_n C_t[n] * h_t[:, n] + D * x_t
    """
    if x.shape != delta.shape:
        raise DimensionError(f"selective_scan: x {tuple(x.shape)} vs delta {tuple(delta.shape)}")
    if B.shape != C.shape or B.shape[:-1] != x.shape[:-1]:
        raise DimensionError(
            f"selective_scan: x {tuple(x.shape)}, B {tuple(B.shape)}, C {tuple(C.shape)} disagree on length"
        )
    if A_log.shape != (x.shape[-1], B.shape[-1]) or D.shape != (x.shape[-1],):
        raise DimensionError(f"selective_scan: A_log {tuple(A_log.shape)} / D {tuple(D.shape)} mismatch")
    if delta.numel() and not bool((delta > 0).all()):
        raise ContractError("selective_scan: delta must be strictly positive")
    squeeze = x.dim() == 2
    if squeeze:
        x, B, C, delta = x[None], B[None], C[None], delta[None]
    A = -torch.exp(A_log)
    tm = lambda t: t.transpose(0, 1).contiguous()  # noqa: E731
    y = _SelectiveScan.apply(tm(x), tm(delta), A, tm(B), tm(C)).transpose(0, 1) + x * D
    return y[0] if squeeze else y


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

class SSMBlock(nn.Module):
    """Pre-norm Mamba-style block with a residual connection."""

    def __init__(self, cfg: EmbedderConfig):
        super().__init__()
        di, n, r = cfg.d_inner, cfg.d_state, cfg.dt_rank
        self.cfg = cfg
        self.norm = RMSNorm(cfg.d_emb)
        self.in_proj = nn.Linear(cfg.d_emb, 2 * di, bias=False)
        self.conv_weight = nn.Parameter(torch.empty(di, cfg.conv_kernel))
        self.conv_bias = nn.Parameter(torch.zeros(di))
        nn.init.uniform_(self.conv_weight, -1 / math.sqrt(cfg.conv_kernel), 1 / math.sqrt(cfg.conv_kernel))
        self.x_proj = nn.Linear(di, r + 2 * n, bias=False)
        self.dt_proj = nn.Linear(r, di)
        # dt initialised log-uniformly in [1e-3, 1e-1] through the inverse softplus of the bias
        dt = torch.exp(torch.rand(di) * (math.log(0.1) - math.log(1e-3)) + math.log(1e-3))
        with torch.no_grad():
            self.dt_proj.bias.copy_(dt + torch.log(-torch.expm1(-dt)))
        self.A_log = nn.Parameter(torch.log(torch.arange(1, n + 1, dtype=torch.float32)).repeat(di, 1))
        self.D = nn.Parameter(torch.ones(di))
        self.out_proj = nn.Linear(di, cfg.d_emb, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        di, n, r = cfg.d_inner, cfg.d_state, cfg.dt_rank
        h = self.norm(x)
        u, z = nx.linear(h, self.in_proj.weight).split(di, dim=-1)
        u = nx.silu(nx.causal_conv1d(u, self.conv_weight, self.conv_bias))
        dt_low, Bt, Ct = nx.linear(u, self.x_proj.weight).split([r, n, n], dim=-1)
        delta = nx.softplus(nx.linear(dt_low, self.dt_proj.weight, self.dt_proj.bias))
        y = selective_scan(u, self.A_log, Bt, Ct, delta, self.D)
        y = y * nx.silu(z)
        return x + nx.linear(y, self.out_proj.weight)


class Embedder(nn.Module):
    def __init__(self, cfg: EmbedderConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Parameter(torch.randn(VOCAB_SIZE, cfg.d_emb) * 0.02)
        if cfg.architecture == "ssm":
            self.layers = nn.ModuleList(SSMBlock(cfg) for _ in range(cfg.n_layers))
            self.pos_emb = None
        else:
            self.layers = nn.ModuleList(TransformerBlock(cfg.d_emb, cfg.n_heads) for _ in range(cfg.n_layers))
            self.pos_emb = nn.Parameter(torch.randn(cfg.max_len, cfg.d_emb) * 0.02)
        self.norm = RMSNorm(cfg.d_emb)

    def token_rows(self, ids: torch.Tensor) -> torch.Tensor:
        return nx.embedding(ids, self.tok_emb)

    def forward(self, rows: torch.Tensor) -> torch.Tensor:
        """(B, T, d_emb) input rows -> (B, T, d_emb) features."""
        if rows.shape[-1] != self.cfg.d_emb:
            raise DimensionError(f"embedder: rows {tuple(rows.shape)} do not have width {self.cfg.d_emb}")
        T = rows.shape[1]
        if T == 0:
            raise ContractError("embedder: empty input sequence")
        x = rows
        if self.pos_emb is not None:
            if T > self.cfg.max_len:
                raise ContractError(f"embedder: length {T} exceeds max_len {self.cfg.max_len}")
            x = x + self.pos_emb[:T]
        for layer in self.layers:
            x = layer(x)
        return self.norm(x)


@dataclass
class EmbedderOutput:
    features: torch.Tensor
    tor_positions: list[int]


@dataclass
class TorFeatures:
    raw: torch.Tensor
    projected: torch.Tensor

    @property
    def k(self) -> int:
        return self.raw.shape[0]


def embed_sequence(embedder: Embedder, tokens, image_rows: torch.Tensor | None = None) -> EmbedderOutput:
    """Run one sequence ``[adapted image rows][token rows]`` through the embedder.

    ``image_rows`` are already adapted to d_emb (see ``VisionAdapter``).
    """
    ids = torch.as_tensor(list(tokens), dtype=torch.long)
    parts = []
    n_img = 0
    if image_rows is not None:
        parts.append(image_rows)
        n_img = image_rows.shape[0]
    if ids.numel():
        parts.append(embedder.token_rows(ids).to(embedder.tok_emb.dtype))
    if not parts:
        raise ContractError("embed_sequence: empty input")
    rows = nx.concat(parts, dim=0)
    feats = embedder(rows[None])[0]
    tor_positions = [n_img + i for i, t in enumerate(ids.tolist()) if t == TOR]
    return EmbedderOutput(features=feats, tor_positions=tor_positions)


def extract_and_project(out: EmbedderOutput, tor_proj: MLPProjector) -> TorFeatures:
    if not out.tor_positions:
        raise ExtractionError("no <tor> positions to extract")
    raw = out.features[torch.as_tensor(out.tor_positions, dtype=torch.long)]
    return TorFeatures(raw=raw, projected=tor_proj(raw))
