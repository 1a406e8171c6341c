import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from meteor import numerics as nx
from meteor.numerics import ContractError, DimensionError, LrSchedule, ParamGroup


def _p(name, values, frozen=False, dtype=torch.float64):
    return ParamGroup(name, torch.tensor(values, dtype=dtype, requires_grad=not frozen), frozen=frozen)


# ---------------------------------------------------------------- primitives

def test_softmax_symmetric():
    assert nx.softmax(torch.tensor([0.0, 0.0])).tolist() == [0.5, 0.5]


def test_softmax_large_logits_do_not_overflow():
    out = nx.softmax(torch.tensor([1000.0, 1000.0]))
    assert out.tolist() == [0.5, 0.5]


def test_softmax_sums_to_one_against_direct_summation():
    rng = np.random.default_rng(3)
    v = rng.normal(size=8) * 4
    expected = [math.exp(x - max(v)) for x in v]
    expected = [e / sum(expected) for e in expected]
    got = nx.softmax(torch.tensor(v, dtype=torch.float32))
    assert abs(float(got.sum()) - 1.0) < 1e-6
    np.testing.assert_allclose(got.numpy(), expected, atol=1e-6)


@pytest.mark.parametrize(
    "call",
    [
        lambda: nx.matmul(torch.zeros(2, 3), torch.zeros(4, 5)),
        lambda: nx.linear(torch.zeros(2, 3), torch.zeros(5, 4)),
        lambda: nx.add(torch.zeros(2, 3), torch.zeros(4)),
        lambda: nx.mul(torch.zeros(3, 2), torch.zeros(3)),
        lambda: nx.rms_norm(torch.zeros(2, 3), torch.ones(4)),
        lambda: nx.causal_conv1d(torch.zeros(5, 3), torch.zeros(4, 4)),
        lambda: nx.concat([torch.zeros(2, 3), torch.zeros(2, 4)], dim=0),
        lambda: nx.slice_rows(torch.zeros(3, 2), 2, 5),
        lambda: nx.embedding(torch.tensor([7]), torch.zeros(5, 2)),
    ],
)
def test_shape_errors_name_the_primitive(call):
    with pytest.raises(DimensionError) as err:
        call()
    assert ":" in str(err.value) and "(" in str(err.value)


def test_causal_conv_matches_direct_sum():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(7, 3))
    w = rng.normal(size=(3, 4))
    out = nx.causal_conv1d(torch.tensor(x), torch.tensor(w)).numpy()
    for t in range(7):
        for c in range(3):
            ref = sum(w[c, j] * x[t - 3 + j, c] for j in range(4) if t - 3 + j >= 0)
            assert out[t, c] == pytest.approx(ref, abs=1e-12)


def _primitive_losses(rng, shape):
    """(name, params, loss_fn) triples exercising every differentiable primitive."""
    d = shape[-1]
    x = torch.tensor(rng.normal(size=shape), dtype=torch.float64, requires_grad=True)
    w = torch.tensor(rng.normal(size=shape), dtype=torch.float64)
    W = torch.tensor(rng.normal(size=(d, 3)), dtype=torch.float64, requires_grad=True)
    g = torch.tensor(rng.uniform(0.5, 1.5, size=d), dtype=torch.float64, requires_grad=True)
    k = torch.tensor(rng.normal(size=(d, 3)), dtype=torch.float64, requires_grad=True)
    table = torch.tensor(rng.normal(size=(6, d)), dtype=torch.float64, requires_grad=True)
    ids = torch.as_tensor(rng.integers(0, 6, size=shape[:-1]))
    wd = torch.tensor(rng.normal(size=(*shape[:-1], 3)), dtype=torch.float64)
    return [
        ("matmul", [x, W], lambda: (nx.matmul(x, W) * wd).sum()),
        ("add", [x], lambda: (nx.add(x, x.pow(2)) * w).sum()),
        ("mul", [x], lambda: (nx.mul(x, x) * w).sum()),
        ("softmax", [x], lambda: (nx.softmax(x) * w).sum()),
        ("gelu", [x], lambda: (nx.gelu(x) * w).sum()),
        ("silu", [x], lambda: (nx.silu(x) * w).sum()),
        ("softplus", [x], lambda: (nx.softplus(x) * w).sum()),
        ("exp", [x], lambda: (nx.exp(0.3 * x) * w).sum()),
        ("rms_norm", [x, g], lambda: (nx.rms_norm(x, g) * w).sum()),
        ("causal_conv1d", [x, k], lambda: (nx.causal_conv1d(x, k) * w).sum()),
        ("embedding", [table], lambda: (nx.embedding(ids, table) * w).sum()),
        ("concat", [x], lambda: (nx.concat([x, 2 * x], dim=-1) * torch.cat([w, w], -1)).sum()),
        ("slice_rows", [x], lambda: (nx.slice_rows(x, 0, 1) * w[:1]).sum()),
    ]


def test_every_primitive_matches_finite_differences_on_20_shapes():
    rng = np.random.default_rng(42)
    worst = {}
    for _ in range(20):
        shape = tuple(int(s) for s in rng.integers(2, 6, size=int(rng.integers(2, 4))))
        for name, params, fn in _primitive_losses(rng, shape):
            groups = [ParamGroup(f"{name}.{i}", p) for i, p in enumerate(params)]
            rep = nx.grad_check(fn, groups, eps=1e-5)
            worst[name] = max(worst.get(name, 0.0), rep.max_rel_err)
    assert max(worst.values()) < 1e-4, worst


# ---------------------------------------------------------------- backward

def test_backward_polynomial():
    x = _p("x", [1.0, 2.0])
    grads = nx.backward((x.tensor ** 2).sum(), [x])
    assert grads["x"].tolist() == [2.0, 4.0]


def test_backward_constant_function_is_zero():
    x = _p("x", [1.0, 2.0])
    y = _p("y", [3.0])
    grads = nx.backward((y.tensor * 2).sum(), [x, y])
    assert grads["x"].tolist() == [0.0, 0.0]


def test_backward_skips_frozen_groups():
    x = _p("x", [1.0, 2.0])
    f = _p("f", [1.0], frozen=True)
    grads = nx.backward((x.tensor.sum() * f.tensor).sum(), [x, f])
    assert set(grads) == {"x"}


def test_backward_rejects_non_scalar():
    x = _p("x", [1.0, 2.0])
    with pytest.raises(ContractError):
        nx.backward(x.tensor * 2, [x])


def test_two_layer_mlp_matches_central_differences():
    torch.manual_seed(0)
    mlp = torch.nn.Sequential(torch.nn.Linear(5, 7), torch.nn.GELU(), torch.nn.Linear(7, 3)).double()
    inp = torch.randn(4, 5, dtype=torch.float64)
    groups = nx.params_of(mlp)
    rep = nx.grad_check(lambda: mlp(inp).pow(2).sum(), groups, eps=1e-5)
    assert rep.max_rel_err < 1e-4
    # independent spot check of one weight entry
    w = mlp[0].weight
    analytic = nx.backward(mlp(inp).pow(2).sum(), groups)["0.weight"][2, 3].item()
    with torch.no_grad():
        w[2, 3] += 1e-5
        up = mlp(inp).pow(2).sum().item()
        w[2, 3] -= 2e-5
        down = mlp(inp).pow(2).sum().item()
        w[2, 3] += 1e-5
    assert analytic == pytest.approx((up - down) / 2e-5, rel=1e-6)


def test_grad_check_identity_map():
    theta = _p("theta", [0.25, -1.5, 3.0])
    rep = nx.grad_check(lambda: theta.tensor.sum(), [theta], eps=1e-5)
    assert rep.max_rel_err < 1e-9


def test_grad_check_rejects_bad_eps_and_float32():
    theta = _p("theta", [1.0])
    with pytest.raises(ContractError):
        nx.grad_check(lambda: theta.tensor.sum(), [theta], eps=0.0)
    t32 = _p("t", [1.0], dtype=torch.float32)
    with pytest.raises(ContractError):
        nx.grad_check(lambda: t32.tensor.sum(), [t32])


def test_grad_check_detects_a_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return x ** 3

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 2 * x ** 2

    theta = _p("theta", [0.7, 1.3])
    rep = nx.grad_check(lambda: Wrong.apply(theta.tensor).sum(), [theta])
    assert rep.max_rel_err > 0.3


# ---------------------------------------------------------------- AdamW

def test_adamw_zero_gradient_no_decay_leaves_params():
    p = _p("p", [1.0, -2.0])
    before = p.tensor.detach().clone()
    nx.adamw_step([p], {"p": torch.zeros(2, dtype=torch.float64)}, lr=0.1, step=1, weight_decay=0.0)
    assert torch.equal(p.tensor.detach(), before)


def test_adamw_first_step_closed_form():
    p = _p("p", [0.0])
    nx.adamw_step([p], {"p": torch.tensor([1.0], dtype=torch.float64)}, lr=0.1, step=1, weight_decay=0.0)
    assert p.tensor.item() == pytest.approx(-0.1, abs=1e-9)


def _adamw_scalar(theta, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8, wd=0.01):
    m = v = 0.0
    out = []
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        theta = theta * (1 - lr * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        theta = theta - lr * mhat / (math.sqrt(vhat) + eps)
        out.append(theta)
    return out


def test_adamw_three_step_trajectory_matches_recurrence():
    grad_fn = lambda th: 2 * (th - 3.0)  # noqa: E731  (d/dθ of (θ-3)^2)
    expected = _adamw_scalar(0.5, grad_fn, lr=0.05, steps=3)
    p = _p("p", [0.5])
    got = []
    for t in range(1, 4):
        g = torch.tensor([grad_fn(p.tensor.item())], dtype=torch.float64)
        nx.adamw_step([p], {"p": g}, lr=0.05, step=t)
        got.append(p.tensor.item())
    assert got == pytest.approx(expected, abs=1e-12)


def test_adamw_matches_torch_optimizer():
    torch.manual_seed(1)
    a = torch.randn(4, 3, dtype=torch.float64)
    mine = ParamGroup("w", a.clone().requires_grad_())
    ref = torch.nn.Parameter(a.clone())
    opt = torch.optim.AdamW([ref], lr=0.01, weight_decay=0.01)
    for t in range(1, 6):
        g = torch.randn(4, 3, dtype=torch.float64)
        nx.adamw_step([mine], {"w": g}, lr=0.01, step=t)
        ref.grad = g.clone()
        opt.step()
    torch.testing.assert_close(mine.tensor.detach(), ref.detach(), rtol=1e-10, atol=1e-12)


def test_adamw_frozen_group_byte_identical():
    f = _p("f", [1.0, 2.0, 3.0], frozen=True)
    before = f.tensor.detach().numpy().tobytes()
    for t in range(1, 11):
        nx.adamw_step([f], {"f": torch.ones(3, dtype=torch.float64)}, lr=0.5, step=t)
    assert f.tensor.detach().numpy().tobytes() == before


def test_adamw_shape_mismatch_and_step_counter():
    p = _p("p", [1.0, 2.0])
    with pytest.raises(ContractError):
        nx.adamw_step([p], {"p": torch.zeros(3, dtype=torch.float64)}, lr=0.1, step=1)
    with pytest.raises(ContractError):
        nx.adamw_step([p], {"p": torch.zeros(2, dtype=torch.float64)}, lr=0.1, step=0)


def test_param_group_moment_shapes():
    with pytest.raises(ContractError):
        ParamGroup("p", torch.zeros(2), exp_avg=torch.zeros(3))


# ---------------------------------------------------------------- schedule

def test_cosine_endpoints_and_midpoint():
    s = LrSchedule(total_steps=100)
    assert nx.cosine_lr(0, s) == pytest.approx(1e-4, rel=1e-12)
    assert nx.cosine_lr(100, s) == pytest.approx(1e-6, rel=1e-12)
    assert nx.cosine_lr(50, s) == pytest.approx(5.05e-5, rel=1e-12)


def test_cosine_out_of_range():
    s = LrSchedule(total_steps=10)
    with pytest.raises(ContractError):
        nx.cosine_lr(11, s)
    with pytest.raises(ContractError):
        nx.cosine_lr(-1, s)


@settings(max_examples=50, deadline=None)
@given(total=st.integers(1, 5000), peak=st.floats(1e-6, 1.0), ratio=st.floats(0.0, 1.0))
def test_cosine_monotone_non_increasing(total, peak, ratio):
    s = LrSchedule(total_steps=total, peak=peak, floor=peak * ratio)
    steps = np.unique(np.linspace(0, total, num=min(total + 1, 200)).astype(int))
    lrs = [nx.cosine_lr(int(t), s) for t in steps]
    assert all(a >= b - 1e-18 for a, b in zip(lrs, lrs[1:]))
