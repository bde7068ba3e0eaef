"""Trainable control branch and condition bundles.

The branch is a trainable copy of the base encoder. Each level input is modulated
by feature denormalization (FDN) with condition features from a multi-scale
extractor, the copied cross-attention projections carry Kronecker adapters,
and every level output leaves through a zero convolution as a residual for the
base U-Net.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .denoiser import AttentionRecord, Conv, UNet
from .errors import DimensionError, InputError
from .kron_adapter import AdapterSet, FactorShape, init_factors
from .numerics import channel_norm

CONDITION_TYPES = ("edge", "segmentation", "depth")


@dataclass(frozen=True)
class ConditionInstance:
    condition_type: str
    map: np.ndarray  # (1, 16, 16) float32 in [0, 1]
    instance_mask: np.ndarray  # (16, 16) uint8, binary
    token_segment: frozenset = field(default_factory=frozenset)
    sparse_flag: bool = False

    def __post_init__(self):
        if self.condition_type not in CONDITION_TYPES:
            raise InputError(f"unknown condition type {self.condition_type!r}")
        if not np.isin(self.instance_mask, (0, 1)).all():
            raise InputError("instance mask must be binary")


@dataclass(frozen=True)
class ConditionBundle:
    instances: tuple = ()
    size: int = 16

    @property
    def fused_input(self) -> np.ndarray:
        """One channel per condition type: the elementwise max over that type's instance maps."""
        fused = np.zeros((len(CONDITION_TYPES), self.size, self.size), dtype=np.float32)
        for ch, ctype in enumerate(CONDITION_TYPES):
            maps = [inst.map for inst in self.instances if inst.condition_type == ctype]
            if maps:
                fused[ch] = merge_homogeneous(maps)[0]
        return fused

    def of_type(self, ctype: str) -> list[ConditionInstance]:
        return [inst for inst in self.instances if inst.condition_type == ctype]


def merge_homogeneous(maps) -> np.ndarray:
    if len(maps) == 0:
        raise InputError("merge_homogeneous needs at least one map")
    return np.maximum.reduce([np.asarray(m, dtype=np.float32) for m in maps])


def build_union_mask(bundle: ConditionBundle) -> np.ndarray:
    """Union of the non-zero supports of every instance map; any sparse instance makes it all ones."""
    mask = np.zeros((bundle.size, bundle.size), dtype=np.uint8)
    for inst in bundle.instances:
        if inst.sparse_flag:
            return np.ones_like(mask)
        mask |= (np.asarray(inst.map).reshape(bundle.size, bundle.size) > 0).astype(np.uint8)
    return mask


class ZeroConv(Conv):
    """1×1 convolution whose weights and bias start at exactly zero."""

    def __init__(self, cin: int, cout: int):
        super().__init__(cin, cout, kernel=1)
        with torch.no_grad():
            self.weight.zero_()
            self.bias.zero_()


class ConditionExtractor(nn.Module):
    """Stride-2 convolution stack producing condition features at every encoder resolution.

    Biases are added only on the exported features, so an all-zero condition yields
    features that are exactly the per-channel biases.
    """

    def __init__(self, in_channels: int, channels: list[int]):
        super().__init__()
        convs = []
        prev = in_channels
        for i, c in enumerate(channels):
            convs.append(Conv(prev, c, stride=1 if i == 0 else 2, bias=False))
            prev = c
        self.convs = nn.ModuleList(convs)
        self.biases = nn.ParameterList(nn.Parameter(torch.zeros(c)) for c in channels)

    def forward(self, c: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = c
        for conv, b in zip(self.convs, self.biases):
            h = F.silu(conv(h))
            feats.append(h + b[:, None, None])
        return feats


class FDN(nn.Module):
    """``norm(Z) * (1 + phi(zero(c))) + phi(zero(c))`` with ``phi`` a 3×3 convolution."""

    def __init__(self, cond_channels: int, channels: int):
        super().__init__()
        self.zero = ZeroConv(cond_channels, channels)
        self.phi = Conv(channels, channels)
        with torch.no_grad():
            self.phi.bias.zero_()

    def modulation(self, c: torch.Tensor) -> torch.Tensor:
        return self.phi(self.zero(c))

    def forward(self, z: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        if z.shape[-2:] != c.shape[-2:]:
            raise DimensionError(f"fdn: spatial shapes {tuple(z.shape)} vs {tuple(c.shape)}")
        gamma = self.modulation(c)
        return channel_norm(z) * (1 + gamma) + gamma


def fdn(z: torch.Tensor, c: torch.Tensor, layer: FDN) -> torch.Tensor:
    return layer(z, c)


def make_adapters(base: UNet, p: int = 2, q: int = 2, r: int = 2, n: int = 2, share_slow: bool = False,
                  seed: int = 0) -> AdapterSet:
    """One factor set per cross-attention projection of the base encoder."""
    adapters = AdapterSet()
    dtype = base.dtype
    j = 0
    for i, lvl in enumerate(base.encoder):
        if lvl.attn is None:
            continue
        for name, (k, d) in lvl.attn.projection_shapes().items():
            shape = FactorShape.for_weight(k, d, p=p, q=q, r=r, n=n, share_slow=share_slow)
            adapters[f"enc{i}.attn.{name}"] = init_factors(shape, seed * 1000 + j, dtype=dtype)
            j += 1
    return adapters


class ControlBranch(nn.Module):
    def __init__(self, base: UNet, adapters: AdapterSet, cond_channels: int = len(CONDITION_TYPES)):
        super().__init__()
        cfg = base.cfg
        chans = [cfg.channels(i) for i in range(cfg.levels)]
        self.encoder = copy.deepcopy(base.encoder)
        # the copy trains, except its attention projections which change only through adapters
        for prm in self.encoder.parameters():
            prm.requires_grad_(True)
        for lvl in self.encoder:
            if lvl.attn is not None:
                for name in lvl.attn.PROJECTIONS:
                    getattr(lvl.attn, name).requires_grad_(False)
        self.extractor = ConditionExtractor(cond_channels, chans)
        self.fdn = nn.ModuleList(FDN(c, c) for c in chans)
        self.zero_out = nn.ModuleList(ZeroConv(c, c) for c in chans)
        self.adapters = adapters
        self.to(base.dtype)

    def trainable_parameters(self) -> list[nn.Parameter]:
        params = []
        for mod in (self.encoder, self.extractor, self.fdn, self.zero_out, self.adapters):
            params.extend(p for p in mod.parameters() if p.requires_grad)
        return params

    def multi_scale_extract(self, fused_input: torch.Tensor) -> list[torch.Tensor]:
        return self.extractor(fused_input)

    def forward(self, z_t, temb, tok, fused_input):
        feats = self.extractor(fused_input)
        residuals = []
        records = []
        h = z_t
        for i, lvl in enumerate(self.encoder):
            h = self.fdn[i](lvl.entry(h), feats[i])
            h = lvl.block(h, temb)
            if lvl.attn is not None:
                h, rec = lvl.attn(h, tok, f"enc{i}.attn", adapters=self.adapters, branch="control")
                records.append(rec)
            residuals.append(self.zero_out[i](h))
        return residuals, records


class ControlledModel(nn.Module):
    """Frozen base U-Net plus an optional control branch."""

    def __init__(self, base: UNet, control: ControlBranch | None = None):
        super().__init__()
        self.base = base
        self.control = control

    @property
    def dtype(self):
        return self.base.dtype

    def forward(self, z_t, t, token_ids, fused_input=None):
        """Return ``(eps_hat, base_records, control_records)``."""
        if self.control is None or fused_input is None:
            eps, recs = self.base(z_t, t, token_ids)
            return eps, recs, []
        residuals, ctrl_recs = self.control_forward(z_t, t, token_ids, fused_input)
        eps, recs = self.base(z_t, t, token_ids, control_residuals=residuals)
        return eps, recs, ctrl_recs

    def control_forward(self, z_t, t, token_ids, fused_input):
        temb = self.base.embed_time(t)
        tok = self.base.tokens(token_ids)
        return self.control(z_t, temb, tok, fused_input)

    def prior_moments(self):
        return self.base.prior_moments()

    @torch.no_grad()
    def predict_eps(self, z_t, t, token_ids, fused_input=None):
        return self(z_t, t, token_ids, fused_input)[0]


def attach_control(base: UNet, p=2, q=2, r=2, n=2, share_slow=False, seed=0) -> ControlledModel:
    for prm in base.parameters():
        prm.requires_grad_(False)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed + 1)
        adapters = make_adapters(base, p, q, r, n, share_slow, seed)
        control = ControlBranch(base, adapters)
    return ControlledModel(base, control)


def loss_layer_records(base_records: list[AttentionRecord], control_records: list[AttentionRecord]):
    """Layers supervised by the attention loss: base decoder plus control branch."""
    return [r for r in base_records if r.layer_id.startswith("dec")] + list(control_records)
