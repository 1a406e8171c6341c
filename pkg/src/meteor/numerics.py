"""Tensor primitives, parameter groups, AdamW, cosine schedule and gradient checking.

Reverse-mode differentiation is delegated to torch autograd; everything that
feeds an optimizer step goes through :class:`ParamGroup` so freeze flags are
enforced in one place.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import torch
import torch.nn.functional as F


class DimensionError(ValueError):
    """Raised when a primitive receives operands of incompatible shapes."""


class ContractError(ValueError):
    """Raised when a caller violates a documented precondition."""


def _dim_error(op: str, *shapes) -> DimensionError:
    pretty = ", ".join(str(tuple(s)) for s in shapes)
    return DimensionError(f"{op}: incompatible shapes {pretty}")


# ---------------------------------------------------------------------------
# forward primitives
# ---------------------------------------------------------------------------

def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise _dim_error("matmul", a.shape, b.shape)
    return a @ b


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ weight.T + bias`` with weight stored (out, in) like torch."""
    if x.shape[-1] != weight.shape[1]:
        raise _dim_error("linear", x.shape, weight.shape)
    return F.linear(x, weight, bias)


def _broadcast_check(op: str, a: torch.Tensor, b: torch.Tensor) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise _dim_error(op, a.shape, b.shape) from None


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _broadcast_check("add", a, b)
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _broadcast_check("mul", a, b)
    return a * b


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Max-shifted softmax; safe for large logits."""
    shifted = x - x.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def silu(x: torch.Tensor) -> torch.Tensor:
    return F.silu(x)


def softplus(x: torch.Tensor) -> torch.Tensor:
    return F.softplus(x)


def exp(x: torch.Tensor) -> torch.Tensor:
    return torch.exp(x)


def rms_norm(x: torch.Tensor, weight: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    if weight.shape != x.shape[-1:]:
        raise _dim_error("rms_norm", x.shape, weight.shape)
    scale = torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)
    return x * scale * weight


def causal_conv1d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Depthwise causal convolution over time.

    x: (..., T, C); weight: (C, K); output[t] = sum_j weight[:, j] * x[t - K + 1 + j].
    Written as K shifted multiply-adds so that output[t] never touches x[t+1:].
    """
    if x.dim() < 2 or weight.dim() != 2 or weight.shape[0] != x.shape[-1]:
        raise _dim_error("causal_conv1d", x.shape, weight.shape)
    T = x.shape[-2]
    K = weight.shape[1]
    pad = torch.zeros(*x.shape[:-2], K - 1, x.shape[-1], dtype=x.dtype, device=x.device)
    xp = torch.cat([pad, x], dim=-2)
    out = xp[..., 0:T, :] * weight[:, 0]
    for j in range(1, K):
        out = out + xp[..., j:j + T, :] * weight[:, j]
    if bias is not None:
        out = out + bias
    return out


def embedding(ids: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    if table.dim() != 2:
        raise _dim_error("embedding", ids.shape, table.shape)
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise DimensionError(
            f"embedding: ids outside [0, {table.shape[0]}) for table {tuple(table.shape)}"
        )
    return F.embedding(ids, table)


def concat(parts: Sequence[torch.Tensor], dim: int = 0) -> torch.Tensor:
    if not parts:
        raise DimensionError("concat: no operands")
    ref = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(ref, other)) if i != dim % len(ref)
        ):
            raise _dim_error("concat", *(q.shape for q in parts))
    return torch.cat(list(parts), dim=dim)


def slice_rows(x: torch.Tensor, start: int, stop: int) -> torch.Tensor:
    if not 0 <= start <= stop <= x.shape[0]:
        raise DimensionError(f"slice_rows: [{start}:{stop}] out of range for shape {tuple(x.shape)}")
    return x[start:stop]


# ---------------------------------------------------------------------------
# parameters, gradients, optimizer
# ---------------------------------------------------------------------------

@dataclass
class ParamGroup:
    name: str
    tensor: torch.Tensor
    frozen: bool = False
    exp_avg: torch.Tensor | None = None
    exp_avg_sq: torch.Tensor | None = None

    def __post_init__(self) -> None:
        if self.exp_avg is None:
            self.exp_avg = torch.zeros_like(self.tensor, requires_grad=False)
        if self.exp_avg_sq is None:
            self.exp_avg_sq = torch.zeros_like(self.tensor, requires_grad=False)
        if self.exp_avg.shape != self.tensor.shape or self.exp_avg_sq.shape != self.tensor.shape:
            raise ContractError(f"{self.name}: moment shapes must equal parameter shape")


def backward(loss: torch.Tensor, groups: Iterable[ParamGroup]) -> dict[str, torch.Tensor]:
    """Gradients of a scalar loss for every non-frozen group.

    Frozen groups get no entry. Groups the loss does not depend on get zeros.
    """
    if loss.dim() != 0 and loss.numel() != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
    live = [g for g in groups if not g.frozen]
    if not live:
        return {}
    grads = torch.autograd.grad(
        loss.reshape(()), [g.tensor for g in live], allow_unused=True
    )
    return {
        g.name: (torch.zeros_like(g.tensor) if d is None else d)
        for g, d in zip(live, grads)
    }


@dataclass
class AdamWConfig:
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01


@torch.no_grad()
def adamw_step(
    groups: Iterable[ParamGroup],
    grads: Mapping[str, torch.Tensor],
    lr: float,
    step: int,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> None:
    """One decoupled-weight-decay Adam update, in place, for non-frozen groups.

    ``step`` is the 1-based update counter used for bias correction.
    Groups missing from ``grads`` are left untouched.
    """
    if step < 1:
        raise ContractError(f"adamw_step: step counter must be >= 1, got {step}")
    b1, b2 = betas
    bc1 = 1.0 - b1 ** step
    bc2 = 1.0 - b2 ** step
    for g in groups:
        if g.frozen or g.name not in grads:
            continue
        grad = grads[g.name]
        if grad.shape != g.tensor.shape:
            raise ContractError(
                f"adamw_step: gradient for {g.name} has shape {tuple(grad.shape)}, "
                f"parameter has {tuple(g.tensor.shape)}"
            )
        p = g.tensor
        p.mul_(1.0 - lr * weight_decay)
        g.exp_avg.mul_(b1).add_(grad, alpha=1.0 - b1)
        g.exp_avg_sq.mul_(b2).addcmul_(grad, grad, value=1.0 - b2)
        denom = (g.exp_avg_sq / bc2).sqrt_().add_(eps)
        p.addcdiv_(g.exp_avg, denom, value=-lr / bc1)


@dataclass(frozen=True)
class LrSchedule:
    total_steps: int
    peak: float = 1e-4
    floor: float = 1e-6

    def __post_init__(self) -> None:
        if self.total_steps < 1:
            raise ContractError("LrSchedule.total_steps must be positive")


def cosine_lr(step: int, sched: LrSchedule) -> float:
    if not 0 <= step <= sched.total_steps:
        raise ContractError(f"cosine_lr: step {step} outside [0, {sched.total_steps}]")
    frac = step / sched.total_steps
    return sched.floor + 0.5 * (sched.peak - sched.floor) * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# finite-difference gradient check
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    per_param: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)

    def table(self) -> str:
        width = max((len(k) for k in self.per_param), default=5)
        lines = [f"{'param':<{width}}  entries  max_rel_err"]
        for name, err in self.per_param.items():
            lines.append(f"{name:<{width}}  {self.checked[name]:>7d}  {err:.3e}")
        lines.append(f"{'overall':<{width}}  {sum(self.checked.values()):>7d}  {self.max_rel_err:.3e}")
        return "\n".join(lines)


def rel_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float) -> torch.Tensor:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    denom = torch.maximum(analytic.abs(), numeric.abs()).clamp_min(floor)
    return (analytic - numeric).abs() / denom


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    groups: Sequence[ParamGroup],
    eps: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-5,
) -> GradCheckReport:
    """Compare autograd gradients with central differences.

    ``loss_fn`` re-evaluates the loss from the current parameter values. Entries
    are perturbed in place and restored. With ``max_entries`` only a seeded
    random subset of each parameter is probed. Relative errors use ``floor`` as
    the smallest denominator so exact zeros compare as absolute errors. In
    float64 with eps=1e-5 the difference quotient carries roughly 1e-10 of
    rounding noise, so entries much smaller than ``floor`` cannot be resolved
    to 1e-4 relative accuracy anyway.
    """
    if eps <= 0:
        raise ContractError(f"grad_check: eps must be positive, got {eps}")
    live = [g for g in groups if not g.frozen]
    for g in live:
        if g.tensor.dtype != torch.float64:
            raise ContractError(f"grad_check: {g.name} is {g.tensor.dtype}; run in float64")
    analytic = backward(loss_fn(), live)
    gen = torch.Generator().manual_seed(seed)
    report = GradCheckReport(max_rel_err=0.0)
    with torch.no_grad():
        for g in live:
            flat = g.tensor.view(-1)
            n = flat.numel()
            if max_entries is not None and n > max_entries:
                idx = torch.randperm(n, generator=gen)[:max_entries].sort().values.tolist()
            else:
                idx = range(n)
            a_flat = analytic[g.name].reshape(-1)
            numeric = torch.empty(len(idx), dtype=torch.float64)
            for j, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                numeric[j] = (up - down) / (2 * eps)
            a_sel = a_flat[torch.as_tensor(list(idx), dtype=torch.long)].detach()
            err = float(rel_error(a_sel, numeric, floor).max()) if len(idx) else 0.0
            report.per_param[g.name] = err
            report.checked[g.name] = len(idx)
            report.max_rel_err = max(report.max_rel_err, err)
    return report


def params_of(module: torch.nn.Module, prefix: str = "", frozen: bool = False) -> list[ParamGroup]:
    """Wrap a module's parameters as ParamGroups (without optimizer history)."""
    out = []
    for name, p in module.named_parameters():
        out.append(ParamGroup(f"{prefix}{name}", p, frozen=frozen))
    return out
