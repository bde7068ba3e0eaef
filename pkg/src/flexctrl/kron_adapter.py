"""Kronecker-decomposed low-rank weight updates.

A weight update of shape ``k×d`` is represented as

    delta = sum_i  H_i ⊗ (u_i @ v_i)

with slow factors ``H_i`` of shape ``p×q`` and fast rank-``r`` factors
``u_i`` (``s×r``) and ``v_i`` (``r×t``), so ``k = p*s`` and ``d = q*t``.
With ``share_slow`` a single ``H`` serves every term.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import torch
from torch import nn

from .errors import DimensionError, ParameterError
from .numerics import kron

INIT_STD = 0.02


@dataclass(frozen=True)
class FactorShape:
    p: int
    q: int
    s: int
    t: int
    r: int = 1
    n: int = 1
    share_slow: bool = False

    def __post_init__(self):
        for name in ("p", "q", "s", "t", "r", "n"):
            if getattr(self, name) < 1:
                raise ParameterError(f"FactorShape.{name} must be >= 1")

    @property
    def k(self) -> int:
        return self.p * self.s

    @property
    def d(self) -> int:
        return self.q * self.t

    @classmethod
    def for_weight(cls, k: int, d: int, p: int = 2, q: int = 2, r: int = 1, n: int = 1,
                   share_slow: bool = False) -> "FactorShape":
        if k % p or d % q:
            raise ParameterError(f"weight {k}×{d} is not divisible by slow extents {p}×{q}")
        return cls(p=p, q=q, s=k // p, t=d // q, r=r, n=n, share_slow=share_slow)


class KronLoRAFactors(nn.Module):
    """Trainable slow/fast factors for one adapted weight matrix."""

    def __init__(self, shape: FactorShape, slow, fast_u, fast_v):
        super().__init__()
        self.shape = shape
        self.slow = nn.ParameterList(slow)
        self.fast_u = nn.ParameterList(fast_u)
        self.fast_v = nn.ParameterList(fast_v)
        n_slow = 1 if shape.share_slow else shape.n
        if len(self.slow) != n_slow or len(self.fast_u) != shape.n or len(self.fast_v) != shape.n:
            raise DimensionError("factor counts do not match FactorShape")

    def slow_factor(self, i: int) -> torch.Tensor:
        return self.slow[0] if self.shape.share_slow else self.slow[i]

    def terms(self) -> Iterator[tuple[torch.Tensor, torch.Tensor, torch.Tensor]]:
        for i in range(self.shape.n):
            yield self.slow_factor(i), self.fast_u[i], self.fast_v[i]


def init_factors(shape: FactorShape, seed: int, dtype=torch.float32) -> KronLoRAFactors:
    """Gaussian slow and ``u`` factors, zero ``v`` factors: the update starts at exactly zero."""
    gen = torch.Generator().manual_seed(int(seed))
    n_slow = 1 if shape.share_slow else shape.n

    def normal(*size):
        return nn.Parameter(torch.randn(*size, generator=gen, dtype=torch.float64).to(dtype) * INIT_STD)

    slow = [normal(shape.p, shape.q) for _ in range(n_slow)]
    fast_u = [normal(shape.s, shape.r) for _ in range(shape.n)]
    fast_v = [nn.Parameter(torch.zeros(shape.r, shape.t, dtype=dtype)) for _ in range(shape.n)]
    return KronLoRAFactors(shape, slow, fast_u, fast_v)


def materialize_delta(f: KronLoRAFactors) -> torch.Tensor:
    delta = None
    for h, u, v in f.terms():
        term = kron(h, u @ v)
        delta = term if delta is None else delta + term
    return delta


def apply_delta(f: KronLoRAFactors, x: torch.Tensor) -> torch.Tensor:
    """``materialize_delta(f) @ x`` over the last axis of ``x``, in factored form."""
    sh = f.shape
    if x.shape[-1] != sh.d:
        raise DimensionError(f"apply_delta: expected trailing length {sh.d}, got {x.shape[-1]}")
    xm = x.reshape(*x.shape[:-1], sh.q, sh.t)
    y = None
    if sh.share_slow:
        inner = None
        for _, u, v in f.terms():
            part = (xm @ v.transpose(0, 1)) @ u.transpose(0, 1)
            inner = part if inner is None else inner + part
        y = f.slow[0] @ inner
    else:
        for h, u, v in f.terms():
            part = h @ ((xm @ v.transpose(0, 1)) @ u.transpose(0, 1))
            y = part if y is None else y + part
    return y.reshape(*x.shape[:-1], sh.k)


def adapted_matmul(w0: torch.Tensor, f: KronLoRAFactors | None, x: torch.Tensor) -> torch.Tensor:
    """Frozen ``w0`` (``k×d``) applied to rows of ``x`` plus the factored update.

    ``w0`` is detached, so it never receives a gradient.
    """
    if x.shape[-1] != w0.shape[1]:
        raise DimensionError(f"adapted_matmul: weight {tuple(w0.shape)} vs input {tuple(x.shape)}")
    base = x @ w0.detach().transpose(0, 1)
    if f is None:
        return base
    if (f.shape.k, f.shape.d) != tuple(w0.shape):
        raise DimensionError("adapter shape does not match frozen weight")
    return base + apply_delta(f, x)


def param_count(shape: FactorShape) -> int:
    fast = shape.r * (shape.s + shape.t)
    if shape.share_slow:
        return shape.p * shape.q + shape.n * fast
    return shape.n * (shape.p * shape.q + fast)


def memory_estimate(trainable_params: int, dtype_bytes: int, optimizer_state_multiplier: int = 2) -> int:
    """Bytes for weights, gradients and optimizer state of the trainable set."""
    if min(trainable_params, dtype_bytes, optimizer_state_multiplier) < 0:
        raise ParameterError("memory_estimate arguments must be non-negative")
    return trainable_params * dtype_bytes * (2 + optimizer_state_multiplier)


class AdapterSet(nn.Module):
    """One factor set per adapted projection, keyed by layer id such as ``enc1.attn.q``."""

    def __init__(self, factors: dict[str, KronLoRAFactors] | None = None):
        super().__init__()
        self._factors = nn.ModuleDict()
        for name, f in (factors or {}).items():
            self[name] = f

    @staticmethod
    def _key(name: str) -> str:
        return name.replace(".", "/")

    def __setitem__(self, name: str, f: KronLoRAFactors) -> None:
        self._factors[self._key(name)] = f

    def __getitem__(self, name: str) -> KronLoRAFactors:
        return self._factors[self._key(name)]

    def __contains__(self, name: str) -> bool:
        return self._key(name) in self._factors

    def __len__(self) -> int:
        return len(self._factors)

    def items(self):
        for key, f in self._factors.items():
            yield key.replace("/", "."), f

    def trainable_count(self) -> int:
        return sum(param_count(f.shape) for _, f in self.items())
