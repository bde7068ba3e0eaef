"""Toy text-conditioned U-Net: the frozen base denoiser.

Encoder levels run at 16, 8 and 4 pixels; cross-attention to the token
sequence sits at the 8×8 and 4×4 levels of the encoder, the middle block and
the mirrored decoder. Every cross-attention layer returns its post-softmax map
as an :class:`AttentionRecord`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DimensionError, InputError
from .kron_adapter import AdapterSet, adapted_matmul
from .numerics import channel_norm, conv2d, softmax_lastdim

VOCAB_SIZE = 24
MAX_TOKENS = 8


@dataclass(frozen=True)
class UNetConfig:
    image_channels: int = 3
    image_size: int = 16
    base_channels: int = 16
    channel_mult: tuple = (1, 2, 4)
    attn_levels: tuple = (1, 2)
    token_dim: int = 32
    time_dim: int = 32
    vocab_size: int = VOCAB_SIZE
    max_tokens: int = MAX_TOKENS

    def __post_init__(self):
        if self.image_size % (2 ** (len(self.channel_mult) - 1)):
            raise DimensionError("image size must halve evenly at every level")

    def channels(self, level: int) -> int:
        return self.base_channels * self.channel_mult[level]

    def resolution(self, level: int) -> int:
        return self.image_size // 2**level

    @property
    def levels(self) -> int:
        return len(self.channel_mult)


@dataclass
class AttentionRecord:
    layer_id: str
    resolution: tuple
    map: torch.Tensor  # (B, H*W, N)
    branch: str = "base"


def timestep_embedding(t, dim: int = 32) -> torch.Tensor:
    """Interleaved ``sin, cos`` pairs at frequencies ``10000**(-j / (dim/2))``."""
    t = torch.as_tensor(t, dtype=torch.float64)
    freqs = torch.exp(-math.log(10000.0) * torch.arange(dim // 2, dtype=torch.float64) / (dim // 2))
    angles = t[..., None] * freqs
    return torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1).reshape(*t.shape, dim)


class Conv(nn.Module):
    def __init__(self, cin: int, cout: int, kernel: int = 3, stride: int = 1, bias: bool = True):
        super().__init__()
        self.stride = stride
        self.weight = nn.Parameter(torch.empty(cout, cin, kernel, kernel))
        self.bias = nn.Parameter(torch.empty(cout)) if bias else None
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        if self.bias is not None:
            bound = 1 / math.sqrt(cin * kernel * kernel)
            nn.init.uniform_(self.bias, -bound, bound)

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, stride=self.stride)


class Norm(nn.Module):
    """Instance normalization with a learnable per-channel affine."""

    def __init__(self, channels: int):
        super().__init__()
        self.scale = nn.Parameter(torch.ones(channels))
        self.shift = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return channel_norm(x) * self.scale[:, None, None] + self.shift[:, None, None]


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int):
        super().__init__()
        self.norm1 = Norm(cin)
        self.conv1 = Conv(cin, cout)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = Norm(cout)
        self.conv2 = Conv(cout, cout)
        self.skip = Conv(cin, cout, kernel=1) if cin != cout else None

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + (x if self.skip is None else self.skip(x))


class CrossAttention(nn.Module):
    """Single-head cross-attention from spatial features to token embeddings.

    Projection weights are stored as ``k×d`` matrices (output × input) so that an
    adapter can wrap each of them through :func:`adapted_matmul`.
    """

    PROJECTIONS = ("q", "k", "v", "out")

    def __init__(self, channels: int, token_dim: int):
        super().__init__()
        self.channels = channels
        self.norm = Norm(channels)
        self.q = nn.Parameter(torch.randn(channels, channels) / math.sqrt(channels))
        self.k = nn.Parameter(torch.randn(channels, token_dim) / math.sqrt(token_dim))
        self.v = nn.Parameter(torch.randn(channels, token_dim) / math.sqrt(token_dim))
        self.out = nn.Parameter(torch.randn(channels, channels) / math.sqrt(channels))

    def projection_shapes(self) -> dict[str, tuple[int, int]]:
        return {name: tuple(getattr(self, name).shape) for name in self.PROJECTIONS}

    def forward(self, x, tokens, layer_id: str, adapters: AdapterSet | None = None, branch: str = "base"):
        b, c, h, w = x.shape
        if c != self.channels or tokens.shape[-1] != self.k.shape[1]:
            raise DimensionError(f"{layer_id}: features {tuple(x.shape)} / tokens {tuple(tokens.shape)}")

        def proj(name, inp):
            f = adapters[f"{layer_id}.{name}"] if adapters is not None else None
            return adapted_matmul(getattr(self, name), f, inp)

        xs = self.norm(x).flatten(2).transpose(1, 2)
        q = proj("q", xs)
        k = proj("k", tokens)
        v = proj("v", tokens)
        attn = softmax_lastdim(q @ k.transpose(1, 2) / math.sqrt(c))
        o = proj("out", attn @ v)
        o = o.transpose(1, 2).reshape(b, c, h, w)
        return x + o, AttentionRecord(layer_id, (h, w), attn, branch)


class TokenEmbedding(nn.Module):
    def __init__(self, vocab_size: int, max_tokens: int, dim: int):
        super().__init__()
        self.vocab_size = vocab_size
        self.table = nn.Parameter(torch.randn(vocab_size, dim) * 0.5)
        self.position = nn.Parameter(torch.randn(max_tokens, dim) * 0.1)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise InputError("token id outside vocabulary")
        if ids.shape[-1] > self.position.shape[0]:
            raise InputError(f"at most {self.position.shape[0]} tokens supported")
        return self.table[ids] + self.position[: ids.shape[-1]]


class EncoderLevel(nn.Module):
    """Input transform (``conv_in`` or a stride-2 downsample) followed by a block and optional attention."""

    def __init__(self, cfg: UNetConfig, level: int, temb_dim: int):
        super().__init__()
        c = cfg.channels(level)
        if level == 0:
            self.entry = Conv(cfg.image_channels, c)
        else:
            self.entry = Conv(cfg.channels(level - 1), c, stride=2)
        self.block = ResBlock(c, c, temb_dim)
        self.attn = CrossAttention(c, cfg.token_dim) if level in cfg.attn_levels else None


class DecoderLevel(nn.Module):
    def __init__(self, cfg: UNetConfig, level: int, temb_dim: int):
        super().__init__()
        c = cfg.channels(level)
        self.block = ResBlock(2 * c, c, temb_dim)
        self.attn = CrossAttention(c, cfg.token_dim) if level in cfg.attn_levels else None
        self.up = Conv(c, cfg.channels(level - 1)) if level > 0 else None


class UNet(nn.Module):
    def __init__(self, cfg: UNetConfig = UNetConfig()):
        super().__init__()
        self.cfg = cfg
        temb_dim = 2 * cfg.time_dim
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_dim, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.tokens = TokenEmbedding(cfg.vocab_size, cfg.max_tokens, cfg.token_dim)
        self.encoder = nn.ModuleList(EncoderLevel(cfg, i, temb_dim) for i in range(cfg.levels))
        top = cfg.levels - 1
        self.mid = ResBlock(cfg.channels(top), cfg.channels(top), temb_dim)
        self.mid_attn = CrossAttention(cfg.channels(top), cfg.token_dim)
        self.decoder = nn.ModuleList(DecoderLevel(cfg, i, temb_dim) for i in range(cfg.levels))
        self.out_norm = Norm(cfg.channels(0))
        self.out_conv = Conv(cfg.channels(0), cfg.image_channels)
        # per-pixel moments of the training images, used to place the sampler's starting point
        shape = (cfg.image_channels, cfg.image_size, cfg.image_size)
        self.register_buffer("prior_mean", torch.zeros(shape))
        self.register_buffer("prior_var", torch.ones(shape))

    @property
    def dtype(self):
        return self.out_conv.weight.dtype

    @torch.no_grad()
    def fit_prior(self, images: torch.Tensor) -> None:
        """Store the per-pixel mean and (population) variance of ``images`` in model space."""
        self.prior_mean.copy_(images.mean(dim=0))
        self.prior_var.copy_(images.var(dim=0, unbiased=False))

    def prior_moments(self) -> tuple[torch.Tensor, torch.Tensor]:
        return self.prior_mean, self.prior_var

    def embed_time(self, t: torch.Tensor) -> torch.Tensor:
        return self.time_mlp(timestep_embedding(t, self.cfg.time_dim).to(self.dtype))

    def feature_shapes(self) -> list[tuple[int, int, int]]:
        return [(self.cfg.channels(i), self.cfg.resolution(i), self.cfg.resolution(i))
                for i in range(self.cfg.levels)]

    def forward(self, z_t, t, token_ids, control_residuals=None):
        """Return ``(eps_hat, records)``; ``control_residuals[i]`` is added to encoder level ``i`` output."""
        if z_t.dim() != 4 or tuple(z_t.shape[1:]) != (self.cfg.image_channels, self.cfg.image_size, self.cfg.image_size):
            raise DimensionError(f"unet_forward: bad latent shape {tuple(z_t.shape)}")
        if control_residuals is not None:
            if len(control_residuals) != self.cfg.levels:
                raise DimensionError("one control residual per encoder level expected")
            for r, shape in zip(control_residuals, self.feature_shapes()):
                if tuple(r.shape[1:]) != shape:
                    raise DimensionError(f"control residual {tuple(r.shape)} does not match {shape}")
        temb = self.embed_time(t)
        tok = self.tokens(token_ids)
        records = []
        skips = []
        h = z_t
        for i, lvl in enumerate(self.encoder):
            h = lvl.block(lvl.entry(h), temb)
            if lvl.attn is not None:
                h, rec = lvl.attn(h, tok, f"enc{i}.attn")
                records.append(rec)
            if control_residuals is not None:
                h = h + control_residuals[i]
            skips.append(h)
        h = self.mid(h, temb)
        h, rec = self.mid_attn(h, tok, "mid.attn")
        records.append(rec)
        for i in reversed(range(self.cfg.levels)):
            lvl = self.decoder[i]
            h = lvl.block(torch.cat([h, skips[i]], dim=1), temb)
            if lvl.attn is not None:
                h, rec = lvl.attn(h, tok, f"dec{i}.attn")
                records.append(rec)
            if lvl.up is not None:
                h = lvl.up(F.interpolate(h, scale_factor=2, mode="nearest"))
        eps_hat = self.out_conv(F.silu(self.out_norm(h)))
        return eps_hat, records


def build_unet(cfg: UNetConfig = UNetConfig(), seed: int = 0, dtype=torch.float32) -> UNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = UNet(cfg)
    return model.to(dtype)
