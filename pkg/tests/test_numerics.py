import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from flexctrl.errors import DimensionError, NumericError, ParameterError
from flexctrl.numerics import (
    SSIM_C1,
    channel_norm,
    conv2d,
    grad_check,
    kron,
    kron_matvec,
    matmul,
    softmax_lastdim,
    ssim,
)

D = torch.float64


def rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=D)


# --- oracles -------------------------------------------------------------------

def loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for l in range(k):
                out[i, j] += a[i, l] * b[l, j]
    return out


def loop_kron(a, b):
    p, q = a.shape
    s, t = b.shape
    out = np.zeros((p * s, q * t))
    for i in range(p):
        for j in range(q):
            for k in range(s):
                for l in range(t):
                    out[i * s + k, j * t + l] = a[i, j] * b[k, l]
    return out


def loop_conv(x, w, b, stride):
    cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    pad = kh // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho, wo = math.ceil(h / stride), math.ceil(wd / stride)
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = b[o]
                for c in range(cin):
                    for di in range(kh):
                        for dj in range(kw):
                            acc += w[o, c, di, dj] * xp[c, i * stride + di, j * stride + dj]
                out[o, i, j] = acc
    return out


# --- matmul --------------------------------------------------------------------

def test_matmul_identity_and_hand_case():
    b = rand(3, 4)
    assert torch.equal(matmul(torch.eye(3, dtype=D), b), b)
    out = matmul(torch.tensor([[1.0, 2], [3, 4]], dtype=D), torch.tensor([[1.0], [1]], dtype=D))
    assert out.tolist() == [[3.0], [7.0]]


def test_matmul_matches_loop_oracle():
    a, b = rand(7, 5, seed=1), rand(5, 3, seed=2)
    assert np.abs(matmul(a, b).numpy() - loop_matmul(a.numpy(), b.numpy())).max() <= 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(rand(2, 3), rand(2, 3))


# --- kron ----------------------------------------------------------------------

def test_kron_identity_is_block_diagonal():
    b = rand(2, 3)
    out = kron(torch.eye(2, dtype=D), b)
    assert torch.equal(out, torch.block_diag(b, b))


def test_kron_hand_expansion():
    a = torch.tensor([[1.0, 2], [3, 4]], dtype=D)
    b = torch.tensor([[0.0, 5]], dtype=D)
    assert kron(a, b).tolist() == [[0, 5, 0, 10], [0, 15, 0, 20]]


def test_kron_shape_law_and_loop_oracle():
    a, b = rand(3, 2, seed=3), rand(4, 5, seed=4)
    out = kron(a, b)
    assert out.shape == (12, 10)
    assert np.abs(out.numpy() - loop_kron(a.numpy(), b.numpy())).max() == 0


def test_kron_matvec_cases():
    x = torch.arange(1, 7, dtype=D)
    assert torch.equal(kron_matvec(torch.eye(2, dtype=D), torch.eye(3, dtype=D), x), x)
    a, b, x = rand(2, 2, seed=5), rand(3, 3, seed=6), rand(6, seed=7)
    assert (kron_matvec(a, b, x) - kron(a, b) @ x).abs().max() <= 1e-12
    assert torch.equal(kron_matvec(torch.zeros(2, 2, dtype=D), b, x), torch.zeros(6, dtype=D))
    with pytest.raises(DimensionError):
        kron_matvec(a, b, rand(9))


def test_kron_matvec_200_random_shapes():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        p, q, s, t = (int(v) for v in rng.integers(1, 7, size=4))
        a = torch.tensor(rng.standard_normal((p, q)))
        b = torch.tensor(rng.standard_normal((s, t)))
        x = torch.tensor(rng.standard_normal(q * t))
        worst = max(worst, (kron_matvec(a, b, x) - kron(a, b) @ x).abs().max().item())
    assert worst <= 1e-11


def test_kron_mixed_product():
    a, b, c, d = (rand(2, 2, seed=i) for i in range(10, 14))
    lhs = kron(a, b) @ kron(c, d)
    rhs = kron(a @ c, b @ d)
    assert (lhs - rhs).abs().max() <= 1e-10


# --- conv2d --------------------------------------------------------------------

def test_conv_zero_kernels_give_zero():
    x = rand(2, 5, 5)
    out = conv2d(x, torch.zeros(3, 2, 3, 3, dtype=D), torch.zeros(3, dtype=D))
    assert torch.equal(out, torch.zeros(3, 5, 5, dtype=D))


def test_conv_identity_kernel():
    x = rand(2, 6, 6)
    w = torch.zeros(2, 2, 3, 3, dtype=D)
    w[0, 0, 1, 1] = w[1, 1, 1, 1] = 1
    assert torch.equal(conv2d(x, w, torch.zeros(2, dtype=D)), x)


@pytest.mark.parametrize("stride,size", [(1, 6), (2, 6), (2, 7)])
def test_conv_matches_loop_oracle(stride, size):
    x, w, b = rand(3, size, size, seed=20), rand(4, 3, 3, 3, seed=21), rand(4, seed=22)
    out = conv2d(x, w, b, stride=stride)
    assert out.shape[-1] == math.ceil(size / stride)
    assert np.abs(out.numpy() - loop_conv(x.numpy(), w.numpy(), b.numpy(), stride)).max() <= 1e-12


def test_conv_bad_stride():
    with pytest.raises(ParameterError):
        conv2d(rand(1, 4, 4), rand(1, 1, 3, 3), stride=3)


# --- channel_norm ---------------------------------------------------------------

def test_channel_norm_constant_channel_is_zero():
    z = torch.full((2, 4, 4), 3.5, dtype=D)
    assert torch.equal(channel_norm(z), torch.zeros_like(z))


def test_channel_norm_moments():
    z = rand(3, 5, 5) * 4 + 2
    out = channel_norm(z)
    mean = out.mean(dim=(1, 2))
    var = out.var(dim=(1, 2), unbiased=False)
    assert mean.abs().max() <= 1e-10
    assert (var - 1).abs().max() <= 1e-6


def test_channel_norm_affine_invariance():
    z = rand(3, 5, 5)
    assert (channel_norm(z - 7) - channel_norm(z)).abs().max() <= 1e-12
    # eps breaks exact scale invariance; it vanishes once the variance dwarfs eps
    wide = 100 * z
    assert (channel_norm(2.5 * wide - 7) - channel_norm(wide)).abs().max() <= 1e-8


# --- softmax --------------------------------------------------------------------

def test_softmax_closed_forms():
    assert softmax_lastdim(torch.zeros(4, dtype=D)).tolist() == [0.25] * 4
    out = softmax_lastdim(torch.tensor([0.0, math.log(3)], dtype=D))
    assert torch.allclose(out, torch.tensor([0.25, 0.75], dtype=D), atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-100, 100))
def test_softmax_shift_invariance_and_rows(values, shift):
    x = torch.tensor(values, dtype=D)
    y = softmax_lastdim(x)
    assert (y - softmax_lastdim(x + shift)).abs().max() <= 1e-12
    assert abs(y.sum().item() - 1) <= 1e-9
    assert (y > 0).all()


# --- ssim -----------------------------------------------------------------------

def test_ssim_identity_and_symmetry():
    g = torch.Generator().manual_seed(3)
    a = torch.rand(12, 12, generator=g, dtype=D)
    b = torch.rand(12, 12, generator=g, dtype=D)
    assert ssim(a, a).item() == pytest.approx(1.0, abs=1e-12)
    assert abs(ssim(a, b).item() - ssim(b, a).item()) <= 1e-12


def test_ssim_constant_patches_closed_form():
    a = torch.zeros(9, 9, dtype=D)
    b = torch.ones(9, 9, dtype=D)
    # mean 0 vs 1, zero variances and covariance: (C1 / (1 + C1)) * (C2 / C2)
    assert ssim(a, b).item() == pytest.approx(SSIM_C1 / (1 + SSIM_C1), rel=1e-12)


def test_ssim_rejects_small_images():
    with pytest.raises(DimensionError):
        ssim(torch.zeros(6, 6, dtype=D), torch.zeros(6, 6, dtype=D))


# --- grad_check -----------------------------------------------------------------

def test_grad_check_quadratic_and_constant():
    x = rand(5).requires_grad_(True)
    assert grad_check(lambda: (x**2).sum(), [x]) <= 1e-8
    assert grad_check(lambda: torch.tensor(3.0, dtype=D), [x]) == 0.0


def test_grad_check_rejects_nonfinite_loss():
    x = rand(3).requires_grad_(True)
    with pytest.raises(NumericError):
        grad_check(lambda: (x * float("inf")).sum(), [x])


def test_every_differentiable_kernel_passes_grad_check():
    a, b = rand(3, 2, seed=30).requires_grad_(True), rand(2, 4, seed=31).requires_grad_(True)
    x = rand(8, seed=32).requires_grad_(True)
    img = rand(2, 7, 7, seed=33).requires_grad_(True)
    w = rand(3, 2, 3, 3, seed=34).requires_grad_(True)
    bias = rand(3, seed=35).requires_grad_(True)
    probe = rand(3, 4, 4, seed=36)
    g = torch.Generator().manual_seed(37)
    s1 = torch.rand(8, 8, generator=g, dtype=D).requires_grad_(True)
    s2 = torch.rand(8, 8, generator=g, dtype=D)
    assert grad_check(lambda: (matmul(a, b) ** 2).sum(), [a, b]) <= 1e-4
    assert grad_check(lambda: (kron(a, b) ** 2).sum(), [a, b]) <= 1e-4
    c = rand(2, 4, seed=38).requires_grad_(True)
    assert grad_check(lambda: (kron_matvec(a, c, x) ** 2).sum(), [a, c, x]) <= 1e-4
    assert grad_check(lambda: (conv2d(img, w, bias, stride=2) ** 2).sum(), [img, w, bias]) <= 1e-4
    assert grad_check(lambda: (channel_norm(img) * rand(2, 7, 7, seed=39)).sum(), [img]) <= 1e-4
    assert grad_check(lambda: (softmax_lastdim(img) * rand(2, 7, 7, seed=40)).sum(), [img]) <= 1e-4
    assert grad_check(lambda: ssim(s1, s2), [s1]) <= 1e-4
    del probe
