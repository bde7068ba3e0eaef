"""Training objectives: denoising, per-segment attention supervision, masked denoising, and their sum."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .denoiser import AttentionRecord
from .errors import DimensionError, InputError, ParameterError


@dataclass(frozen=True)
class SegmentAnnotation:
    token_segment: frozenset
    mask: np.ndarray  # (16, 16) uint8

    def __post_init__(self):
        if not self.token_segment:
            raise InputError("a segment needs at least one token")
        if not np.isin(self.mask, (0, 1)).all():
            raise InputError("segment mask must be binary")


def ldm_loss(eps_hat: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    if eps_hat.shape != eps.shape:
        raise DimensionError(f"ldm_loss: {tuple(eps_hat.shape)} vs {tuple(eps.shape)}")
    return ((eps_hat - eps) ** 2).mean()


def mask_loss(eps_hat: torch.Tensor, eps: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Squared masked error averaged over *all* elements; ``mask`` is broadcast across channels."""
    if eps_hat.shape != eps.shape:
        raise DimensionError(f"mask_loss: {tuple(eps_hat.shape)} vs {tuple(eps.shape)}")
    mask = torch.as_tensor(mask)
    if not ((mask == 0) | (mask == 1)).all():
        raise InputError("mask_loss: mask must be binary")
    if mask.shape[-2:] != eps.shape[-2:]:
        raise DimensionError("mask_loss: mask spatial shape mismatch")
    m = mask.to(eps.dtype).unsqueeze(-3)
    return (((eps - eps_hat) * m) ** 2).mean()


def total_loss(ldm, ca, mask, lambda_ca: float = 0.01, lambda_mask: float = 0.01):
    if lambda_ca < 0 or lambda_mask < 0:
        raise ParameterError("loss weights must be non-negative")
    return ldm + lambda_ca * ca + lambda_mask * mask


def token_membership(token_segment, n_tokens: int, dtype=torch.float64) -> torch.Tensor:
    if not token_segment:
        raise InputError("empty token segment")
    member = torch.zeros(n_tokens, dtype=dtype)
    for i in token_segment:
        if not 0 <= i < n_tokens:
            raise IndexError(f"token index {i} outside sequence of {n_tokens}")
        member[i] = 1
    return member


def segment_attention_map(records: Sequence[AttentionRecord], segment: SegmentAnnotation, layer: int) -> torch.Tensor:
    """Summed attention over the segment's tokens at one layer, shaped ``(..., H_l, W_l)``."""
    if not records:
        raise InputError("no attention records")
    rec = records[layer]
    member = token_membership(segment.token_segment, rec.map.shape[-1], rec.map.dtype)
    return (rec.map @ member).reshape(*rec.map.shape[:-2], *rec.resolution)


def downsample_nearest(mask: torch.Tensor, size: tuple) -> torch.Tensor:
    """Nearest-neighbour resize of the trailing two axes: source index ``floor(i * H / h)``."""
    h, w = size
    H, W = mask.shape[-2:]
    rows = (torch.arange(h) * H) // h
    cols = (torch.arange(w) * W) // w
    return mask[..., rows[:, None], cols[None, :]]


def ca_loss_batch(records: Sequence[AttentionRecord], seg_tokens: torch.Tensor, seg_masks: torch.Tensor,
                  seg_valid: torch.Tensor) -> torch.Tensor:
    """Batched attention loss.

    ``seg_tokens`` (B, J, N) token membership, ``seg_masks`` (B, J, H, W), ``seg_valid`` (B, J).
    Per sample: mean over valid segments of the layer-averaged mean squared error;
    the batch value is the mean over samples that have at least one segment.
    """
    if not records:
        raise InputError("no attention records")
    dtype = records[0].map.dtype
    seg_tokens = seg_tokens.to(dtype)
    seg_masks = seg_masks.to(dtype)
    valid = seg_valid.to(dtype)
    per_seg = 0
    for rec in records:
        # (B, HW, N) @ (B, N, J) -> (B, HW, J)
        amap = rec.map @ seg_tokens.transpose(1, 2)
        amap = amap.transpose(1, 2).reshape(*seg_tokens.shape[:2], *rec.resolution)
        target = downsample_nearest(seg_masks, rec.resolution)
        per_seg = per_seg + ((amap - target) ** 2).mean(dim=(-2, -1))
    per_seg = per_seg / len(records)
    counts = valid.sum(dim=1)
    has = counts > 0
    per_sample = (per_seg * valid).sum(dim=1)[has] / counts[has]
    if per_sample.numel() == 0:
        return torch.zeros((), dtype=dtype)
    return per_sample.mean()


def ca_loss(records: Sequence[AttentionRecord], segments: Sequence[SegmentAnnotation]) -> torch.Tensor:
    """Attention loss for a single sample (records may carry a leading batch axis of 1)."""
    if not segments:
        raise InputError("ca_loss needs at least one segment")
    n_tok = records[0].map.shape[-1]
    tokens = torch.stack([token_membership(s.token_segment, n_tok) for s in segments])[None]
    masks = torch.stack([torch.as_tensor(np.asarray(s.mask)) for s in segments])[None]
    valid = torch.ones(1, len(segments))
    recs = [r if r.map.dim() == 3 else AttentionRecord(r.layer_id, r.resolution, r.map[None], r.branch)
            for r in records]
    return ca_loss_batch(recs, tokens, masks, valid)
