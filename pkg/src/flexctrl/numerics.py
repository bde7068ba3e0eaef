"""Dense tensor kernels used by the model, losses and metrics.

Tensors are plain ``torch.Tensor`` objects; reverse-mode differentiation is
torch autograd. Every kernel here is differentiable unless noted, and
``grad_check`` verifies any of them against central finite differences.

Vectorization convention for Kronecker identities is row-major::

    kron(A, B) @ x == (A @ X @ B.T).reshape(-1),   X = x.reshape(q, t)
"""

from __future__ import annotations

from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from .errors import DimensionError, NumericError, ParameterError

SSIM_WINDOW = 7
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise DimensionError(f"matmul: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    return a @ b


def kron(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Kronecker product of two matrices, ``out[i*s+k, j*t+l] = a[i,j] * b[k,l]``."""
    if a.dim() != 2 or b.dim() != 2:
        raise DimensionError("kron expects two matrices")
    p, q = a.shape
    s, t = b.shape
    return (a[:, None, :, None] * b[None, :, None, :]).reshape(p * s, q * t)


def kron_matvec(a: torch.Tensor, b: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Apply ``kron(a, b)`` to ``x`` (last axis) without materializing it.

    Leading axes of ``x`` are treated as a batch.
    """
    p, q = a.shape
    s, t = b.shape
    if x.shape[-1] != q * t:
        raise DimensionError(f"kron_matvec: expected trailing length {q * t}, got {x.shape[-1]}")
    xm = x.reshape(*x.shape[:-1], q, t)
    y = a @ xm @ b.transpose(0, 1)
    return y.reshape(*x.shape[:-1], p * s)


def conv2d(
    x: torch.Tensor,
    kernels: torch.Tensor,
    bias: torch.Tensor | None = None,
    stride: int = 1,
) -> torch.Tensor:
    """Zero-padded 'same' convolution on ``C×H×W`` or ``B×C×H×W`` input.

    Output extent is ``ceil(H / stride)``.
    """
    if stride not in (1, 2):
        raise ParameterError(f"conv2d: stride must be 1 or 2, got {stride}")
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
    if x.dim() != 4 or kernels.dim() != 4 or kernels.shape[1] != x.shape[1]:
        raise DimensionError(
            f"conv2d: input {tuple(x.shape)} incompatible with kernels {tuple(kernels.shape)}"
        )
    kh = kernels.shape[-1]
    out = F.conv2d(x, kernels, bias, stride=stride, padding=kh // 2)
    return out[0] if single else out


def channel_norm(z: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Parameter-free instance normalization over the two trailing (spatial) axes."""
    if z.shape[-1] * z.shape[-2] < 2:
        raise DimensionError("channel_norm needs at least two spatial positions")
    mean = z.mean(dim=(-2, -1), keepdim=True)
    var = ((z - mean) ** 2).mean(dim=(-2, -1), keepdim=True)
    return (z - mean) / torch.sqrt(var + eps)


def softmax_lastdim(x: torch.Tensor) -> torch.Tensor:
    shifted = x - x.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def ssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean local SSIM over every valid 7×7 uniform window of two ``H×W`` images."""
    if a.shape != b.shape or a.dim() != 2:
        raise DimensionError("ssim expects two equally shaped H×W images")
    if min(a.shape) < SSIM_WINDOW:
        raise DimensionError(f"ssim needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}")

    def pool(v: torch.Tensor) -> torch.Tensor:
        return F.avg_pool2d(v[None, None], SSIM_WINDOW, stride=1)[0, 0]

    mu_a, mu_b = pool(a), pool(b)
    var_a = pool(a * a) - mu_a**2
    var_b = pool(b * b) - mu_b**2
    cov = pool(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return (num / den).mean()


def _relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> torch.Tensor:
    den = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.tensor(1e-8, dtype=analytic.dtype))
    return (analytic - numeric).abs() / den


def grad_check_report(
    loss_fn: Callable[[], torch.Tensor],
    leaves: Sequence[torch.Tensor],
    h: float = 1e-5,
) -> list[float]:
    """Max relative error between autograd and central differences, per leaf.

    ``loss_fn`` is re-evaluated with each leaf element nudged by ``±h``; leaves are
    restored afterwards.
    """
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NumericError(f"grad_check: loss is not finite ({loss.item()})")
    if loss.requires_grad:
        grads = torch.autograd.grad(loss, list(leaves), allow_unused=True)
    else:
        grads = [None] * len(leaves)
    errors = []
    with torch.no_grad():
        for leaf, g in zip(leaves, grads):
            analytic = torch.zeros_like(leaf) if g is None else g.detach()
            numeric = torch.empty_like(leaf)
            flat = leaf.view(-1)
            num_flat = numeric.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                plus = loss_fn().item()
                flat[i] = orig - h
                minus = loss_fn().item()
                flat[i] = orig
                num_flat[i] = (plus - minus) / (2 * h)
            if not torch.isfinite(numeric).all():
                raise NumericError("grad_check: non-finite finite-difference gradient")
            errors.append(_relative_error(analytic, numeric).max().item() if leaf.numel() else 0.0)
    return errors


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    leaves: Sequence[torch.Tensor],
    h: float = 1e-5,
) -> float:
    report = grad_check_report(loss_fn, leaves, h)
    return max(report, default=0.0)
