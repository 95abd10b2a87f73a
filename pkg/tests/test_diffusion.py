from types import SimpleNamespace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

import oracles
from trajdiff import diffusion
from trajdiff.diffusion import (
    default_schedule,
    forward_sample,
    guided_noise,
    make_schedule,
    one_step_predict,
    reverse_step,
)


class ZeroNet(nn.Module):
    """Denoiser stand-in that predicts zero noise and records null-condition calls."""

    def __init__(self, n, dtype=torch.float64):
        super().__init__()
        self.w = nn.Parameter(torch.zeros(1, dtype=dtype))
        self.config = SimpleNamespace(input_dim=n)
        self.null_calls = 0

    def forward(self, x, k, y=None, null_mask=None):
        if y is None or (null_mask is not None and bool(null_mask.any())):
            self.null_calls += 1
        return torch.zeros_like(x) + 0 * self.w


class LinearNet(nn.Module):
    """Small deterministic denoiser whose output depends on x, k and the condition."""

    def __init__(self, n, m, seed=0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.a = nn.Parameter(torch.randn(n, n, generator=g, dtype=torch.float64) * 0.1)
        self.b = nn.Parameter(torch.randn(m, n, generator=g, dtype=torch.float64) * 0.1)
        self.null = nn.Parameter(torch.randn(n, generator=g, dtype=torch.float64) * 0.1)
        self.config = SimpleNamespace(input_dim=n)

    def forward(self, x, k, y=None, null_mask=None):
        out = torch.tanh(x @ self.a) * (k[:, None].to(x.dtype) / 10)
        cond = self.null.expand_as(out) if y is None else y @ self.b
        if null_mask is not None:
            cond = torch.where(null_mask[:, None], self.null.expand_as(out), cond)
        return out + cond


# ---------------------------------------------------------------------------
# schedule


def test_single_step_schedule():
    s = make_schedule(1, 0.5, 0.5)
    np.testing.assert_allclose(s.alpha_bar, [0.5])


def test_four_step_alpha_bar():
    s = make_schedule(4, 0.1, 0.4)
    np.testing.assert_allclose(s.beta, [0.1, 0.2, 0.3, 0.4])
    assert s.alpha_bar[-1] == pytest.approx(0.9 * 0.8 * 0.7 * 0.6, abs=1e-15)
    assert s.alpha_bar[-1] == pytest.approx(0.3024, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(K=st.integers(2, 600), b0=st.floats(1e-5, 0.1), span=st.floats(1e-4, 0.5))
def test_schedule_invariants(K, b0, span):
    s = make_schedule(K, b0, b0 + span)
    assert np.all(np.diff(s.beta) > 0) and s.beta[0] > 0 and s.beta[-1] < 1
    assert np.all(np.diff(s.alpha_bar) < 0)
    np.testing.assert_allclose(s.alpha_bar, np.cumprod(1 - s.beta), rtol=1e-12)
    np.testing.assert_allclose(s.sigma**2, s.beta, rtol=1e-12)
    assert s.alpha_bar[-1] < s.alpha_bar[0]


def test_schedule_validation():
    with pytest.raises(ValueError):
        make_schedule(0)
    with pytest.raises(ValueError):
        make_schedule(10, 0.2, 0.1)
    with pytest.raises(ValueError):
        make_schedule(10, 0.0, 0.1)
    with pytest.raises(ValueError):
        make_schedule(10, 0.1, 1.0)


def test_default_schedule_destroys_signal():
    # the short default keeps the total corruption of the 500-step schedule
    assert default_schedule(64).alpha_bar[-1] < 0.01
    assert make_schedule(500).alpha_bar[-1] < 0.01
    # the unscaled endpoints over 64 steps would leave half the signal in place
    assert make_schedule(64).alpha_bar[-1] > 0.5
    np.testing.assert_allclose(default_schedule(500).beta, make_schedule(500).beta)


# ---------------------------------------------------------------------------
# forward corruption


def test_forward_limits():
    s = make_schedule(4, 0.1, 0.4)
    x0 = np.array([0.3, -0.7])
    eps = np.array([1.2, 0.4])
    for k in range(1, 5):
        np.testing.assert_allclose(forward_sample(x0, k, np.zeros(2), s), np.sqrt(s.alpha_bar[k - 1]) * x0)
        np.testing.assert_allclose(forward_sample(np.zeros(2), k, eps, s), np.sqrt(1 - s.alpha_bar[k - 1]) * eps)


def test_forward_hand_value():
    s = make_schedule(4, 0.1, 0.4)
    val = forward_sample(np.array([1.0]), 4, np.array([1.0]), s)[0]
    assert val == pytest.approx(np.sqrt(0.3024) + np.sqrt(0.6976), abs=1e-12)
    assert val == pytest.approx(1.38513, abs=1e-4)


def test_forward_errors():
    s = make_schedule(4, 0.1, 0.4)
    with pytest.raises(IndexError):
        forward_sample(np.zeros(2), 0, np.zeros(2), s)
    with pytest.raises(IndexError):
        forward_sample(np.zeros(2), 5, np.zeros(2), s)
    with pytest.raises(ValueError):
        forward_sample(np.zeros(2), 1, np.zeros(3), s)


@pytest.mark.parametrize("k", [1, 17, 64])
def test_forward_marginal_moments(k):
    s = default_schedule(64)
    rng = np.random.default_rng(k)
    x0 = np.linspace(-0.9, 0.9, 7)
    n = 10_000
    xk = forward_sample(np.tile(x0, (n, 1)), np.full(n, k), rng.standard_normal((n, 7)), s)
    ab = s.alpha_bar[k - 1]
    se = np.sqrt((1 - ab) / n)
    assert np.all(np.abs(xk.mean(axis=0) - np.sqrt(ab) * x0) <= 3 * se + 1e-15)
    # every dimension has the same variance; pooling keeps the 2% band well above sampling noise
    centred = xk - np.sqrt(ab) * x0
    assert np.var(centred, ddof=1) == pytest.approx(1 - ab, rel=0.02)


def test_forward_torch_matches_numpy():
    s = default_schedule(16)
    rng = np.random.default_rng(0)
    x0, eps = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    k = np.array([1, 4, 9, 16, 2])
    out = forward_sample(torch.as_tensor(x0), torch.as_tensor(k), torch.as_tensor(eps), s)
    np.testing.assert_allclose(out.numpy(), forward_sample(x0, k, eps, s), rtol=1e-14)


# ---------------------------------------------------------------------------
# guidance


def test_guided_noise_examples():
    a, b = np.array([0.5, -1.0]), np.array([0.3, 2.0])
    np.testing.assert_array_equal(guided_noise(a, b, 0.0), a)
    assert guided_noise(np.array([0.5]), np.array([0.3]), 1.0)[0] == pytest.approx(0.7)
    for w in (0.0, 0.5, 3.0):
        np.testing.assert_allclose(guided_noise(a, a, w), a, rtol=1e-15)
    with pytest.raises(ValueError):
        guided_noise(np.zeros(2), np.zeros(3), 1.0)


# ---------------------------------------------------------------------------
# reverse step


@pytest.mark.parametrize("sched", [make_schedule(4, 0.1, 0.4), default_schedule(64), make_schedule(500), make_schedule(1, 0.5, 0.5)])
def test_step_one_recovers_x0(sched):
    rng = np.random.default_rng(0)
    x0, eps = rng.uniform(-1, 1, 11), rng.standard_normal(11)
    x1 = forward_sample(x0, 1, eps, sched)
    np.testing.assert_allclose(reverse_step(x1, 1, eps, np.zeros(11), sched), x0, atol=1e-10, rtol=0)


def test_reverse_step_collapses_and_is_homogeneous():
    s = default_schedule(32)
    rng = np.random.default_rng(1)
    xk, e = rng.standard_normal(6), rng.standard_normal(6)
    for k in (1, 5, 32):
        np.testing.assert_allclose(reverse_step(xk, k, np.zeros(6), np.zeros(6), s), xk / np.sqrt(s.alpha[k - 1]))
        a = -2.5
        np.testing.assert_allclose(reverse_step(a * xk, k, a * e, np.zeros(6), s),
                                   a * reverse_step(xk, k, e, np.zeros(6), s), rtol=1e-13)
    with pytest.raises(IndexError):
        reverse_step(xk, 33, e, np.zeros(6), s)


def test_reverse_step_formula():
    s = make_schedule(4, 0.1, 0.4)
    xk, e, z = np.array([0.4]), np.array([-0.2]), np.array([0.7])
    k = 3
    expect = (0.4 - 0.3 / np.sqrt(1 - 0.9 * 0.8 * 0.7) * -0.2) / np.sqrt(0.7) + np.sqrt(0.3) * 0.7
    assert reverse_step(xk, k, e, z, s)[0] == pytest.approx(expect, rel=1e-14)


# ---------------------------------------------------------------------------
# sampling


def _conditional_only_sampler(model, y, sched, gen, n):
    b = y.shape[0]
    x = torch.randn(b, n, generator=gen, dtype=y.dtype)
    for k in range(sched.K, 0, -1):
        ks = torch.full((b,), k, dtype=torch.long)
        eps = model(x, ks, y)
        z = torch.randn(b, n, generator=gen, dtype=y.dtype) if k > 1 else torch.zeros_like(x)
        x = reverse_step(x, ks, eps, z, sched)
    return torch.clamp(x, -1, 1)


def test_omega_zero_matches_conditional_only_sampler():
    s = default_schedule(20)
    model = LinearNet(5, 3)
    y = torch.randn(4, 3, generator=torch.Generator().manual_seed(3), dtype=torch.float64)
    got = diffusion.sample(model, y, 0.0, s, torch.Generator().manual_seed(9))
    ref = _conditional_only_sampler(model, y, s, torch.Generator().manual_seed(9), 5)
    assert torch.equal(got, ref)
    zero = ZeroNet(5)
    diffusion.sample(zero, y, 0.0, s, torch.Generator().manual_seed(0))
    assert zero.null_calls == 0


def test_guided_sampler_matches_separate_branches():
    s = default_schedule(12)
    model = LinearNet(5, 3, seed=4)
    y = torch.randn(3, 3, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    omega = 1.5
    gen = torch.Generator().manual_seed(2)
    x = torch.randn(3, 5, generator=gen, dtype=torch.float64)
    for k in range(s.K, 0, -1):
        ks = torch.full((3,), k)
        eps = guided_noise(model(x, ks, y), model(x, ks, None), omega)
        z = torch.randn(3, 5, generator=gen, dtype=torch.float64) if k > 1 else torch.zeros_like(x)
        x = reverse_step(x, ks, eps, z, s)
    got = diffusion.sample(model, y, omega, s, torch.Generator().manual_seed(2), clip_final=False)
    torch.testing.assert_close(got, x, rtol=1e-12, atol=1e-12)


def test_sample_deterministic_given_seed():
    s = default_schedule(16)
    model = LinearNet(5, 3)
    y = np.random.default_rng(0).uniform(-1, 1, (3, 3))
    a, ia = diffusion.sample_many(model, y, 4, 1.0, s, seed=5)
    b, ib = diffusion.sample_many(model, y, 4, 1.0, s, seed=5)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(ia, np.repeat(np.arange(3), 4))
    assert np.all(np.abs(a) <= 1.0)


def test_zero_denoiser_sample_moments():
    s = default_schedule(16)
    n = 10_000
    model = ZeroNet(3)
    y = torch.zeros(n, 2, dtype=torch.float64)
    x = diffusion.sample(model, y, 0.0, s, torch.Generator().manual_seed(0), clip_final=False).numpy()
    # closed-form variance recursion of x_{k-1} = x_k / sqrt(a_k) + sigma_k z
    var = 1.0
    for k in range(s.K, 0, -1):
        var = var / s.alpha[k - 1] + (s.beta[k - 1] if k > 1 else 0.0)
    se = np.sqrt(var / n)
    assert np.all(np.abs(x.mean(axis=0)) <= 3 * se)
    np.testing.assert_allclose(x.var(axis=0, ddof=1), var, rtol=0.05)


# ---------------------------------------------------------------------------
# one-step prediction


def test_one_step_true_noise_recovers_x0():
    s = default_schedule(64)
    rng = np.random.default_rng(0)
    x0 = torch.as_tensor(rng.uniform(-1, 1, (4, 5)))
    eps = torch.as_tensor(rng.standard_normal((4, 5)))
    k = torch.ones(4, dtype=torch.long)
    xk = forward_sample(x0, k, eps, s)
    out = one_step_predict(xk, k, lambda x, kk, y: eps, torch.zeros(4, 2), torch.zeros(4, 5), s)
    torch.testing.assert_close(out, x0, atol=1e-10, rtol=0)


def test_one_step_clip_saturates():
    s = default_schedule(64)
    xk = torch.full((2, 5), 50.0, dtype=torch.float64)
    k = torch.full((2,), 10)
    out = one_step_predict(xk, k, ZeroNet(5), torch.zeros(2, 2), torch.zeros(2, 5), s)
    assert torch.all(out == 1.0)


def test_one_step_requires_condition():
    s = default_schedule(8)
    with pytest.raises(ValueError, match="violation loss requires condition"):
        one_step_predict(torch.zeros(1, 3), torch.ones(1), ZeroNet(3), None, torch.zeros(1, 3), s)


def test_one_step_gradient_matches_finite_differences():
    s = default_schedule(32)
    rng = np.random.default_rng(3)
    b, n = 3, 6
    xk = torch.as_tensor(rng.uniform(-0.3, 0.3, (b, n)))
    z = torch.as_tensor(rng.standard_normal((b, n)) * 0.1)
    k = torch.tensor([2, 9, 20])
    w = torch.as_tensor(rng.standard_normal((b, n)))
    e0 = rng.uniform(-0.3, 0.3, (b, n))

    def f(e_np):
        e = torch.as_tensor(e_np.reshape(b, n))
        return float((w * one_step_predict(xk, k, lambda x, kk, y: e, torch.zeros(b, 1), z, s)).sum())

    e = torch.as_tensor(e0).requires_grad_(True)
    out = one_step_predict(xk, k, lambda x, kk, y: e, torch.zeros(b, 1), z, s)
    assert torch.all(out.abs() < 0.99)
    (w * out).sum().backward()
    fd = oracles.fd_gradient(f, e0.ravel(), step=1e-6)
    assert oracles.rel_err(e.grad.numpy().ravel(), fd) < 1e-4


def test_one_step_gradient_zero_where_clipped():
    s = default_schedule(8)
    xk = torch.tensor([[5.0, 0.1]], dtype=torch.float64)
    e = torch.zeros(1, 2, dtype=torch.float64, requires_grad=True)
    out = one_step_predict(xk, torch.tensor([3]), lambda x, kk, y: e, torch.zeros(1, 1), torch.zeros(1, 2), s)
    out.sum().backward()
    assert e.grad[0, 0] == 0.0 and e.grad[0, 1] != 0.0
