"""Two-stage training, checkpoints, evaluation and the parameter benchmark."""

from __future__ import annotations

import csv
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig, config_to_text, parse_config, parse_pairs
from .control import ControlledModel, attach_control, build_union_mask, loss_layer_records
from .denoiser import UNetConfig, build_unet
from .diffusion import add_noise, linear_schedule, sample
from .errors import ConfigError, FormatError, InputError
from .kron_adapter import FactorShape, memory_estimate, param_count
from .losses import ca_loss_batch, ldm_loss, mask_loss, total_loss
from .numerics import ssim
from .synthdata import COLORS, MAX_TOKENS, PAD_ID, DatasetRecord, extract_edge

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}
MAX_SEGMENTS = 3


# --- batching ----------------------------------------------------------------

@dataclass
class DatasetTensors:
    """Whole corpus collated into padded tensors."""

    images: torch.Tensor  # (R, 3, 16, 16) in [-1, 1]
    tokens: torch.Tensor  # (R, 8) long
    fused: torch.Tensor  # (R, 3, 16, 16)
    union_mask: torch.Tensor  # (R, 16, 16)
    seg_tokens: torch.Tensor  # (R, J, 8)
    seg_masks: torch.Tensor  # (R, J, 16, 16)
    seg_valid: torch.Tensor  # (R, J)

    def __len__(self):
        return self.images.shape[0]

    def take(self, idx: torch.Tensor) -> "DatasetTensors":
        return DatasetTensors(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))


def pad_tokens(ids) -> list[int]:
    ids = list(ids)
    if len(ids) > MAX_TOKENS:
        raise InputError(f"at most {MAX_TOKENS} tokens")
    return ids + [PAD_ID] * (MAX_TOKENS - len(ids))


def collate(records: list[DatasetRecord], dtype=torch.float32) -> DatasetTensors:
    if not records:
        raise InputError("empty dataset")
    r = len(records)
    seg_tokens = np.zeros((r, MAX_SEGMENTS, MAX_TOKENS), dtype=np.float32)
    seg_masks = np.zeros((r, MAX_SEGMENTS, 16, 16), dtype=np.float32)
    seg_valid = np.zeros((r, MAX_SEGMENTS), dtype=np.float32)
    for i, rec in enumerate(records):
        for j, seg in enumerate(rec.segments[:MAX_SEGMENTS]):
            seg_tokens[i, j, list(seg.token_segment)] = 1
            seg_masks[i, j] = seg.mask
            seg_valid[i, j] = 1
    return DatasetTensors(
        images=torch.tensor(np.stack([rec.image for rec in records]) * 2 - 1, dtype=dtype),
        tokens=torch.tensor([pad_tokens(rec.tokens) for rec in records], dtype=torch.long),
        fused=torch.tensor(np.stack([rec.bundle.fused_input for rec in records]), dtype=dtype),
        union_mask=torch.tensor(np.stack([build_union_mask(rec.bundle) for rec in records]), dtype=dtype),
        seg_tokens=torch.tensor(seg_tokens, dtype=dtype),
        seg_masks=torch.tensor(seg_masks, dtype=dtype),
        seg_valid=torch.tensor(seg_valid, dtype=dtype),
    )


# --- checkpoints --------------------------------------------------------------

@dataclass
class Checkpoint:
    config: TrainConfig
    tensors: dict
    step: int = 0
    rng_state: torch.Tensor | None = None
    losses: list = field(default_factory=list)

    @property
    def has_control(self) -> bool:
        return any(name.startswith("control.") for name in self.tensors)


def unet_config(cfg: TrainConfig) -> UNetConfig:
    return UNetConfig(base_channels=cfg.base_channels)


def build_model(cfg: TrainConfig, with_control: bool = False) -> ControlledModel:
    base = build_unet(unet_config(cfg), seed=cfg.seed, dtype=DTYPES[cfg.dtype])
    if with_control:
        return attach_control(base, cfg.slow_p, cfg.slow_q, cfg.rank, cfg.n_terms, cfg.share_slow, cfg.seed)
    return ControlledModel(base)


def model_from_checkpoint(ckpt: Checkpoint) -> ControlledModel:
    model = build_model(ckpt.config, with_control=ckpt.has_control)
    state = {k: v.to(DTYPES[ckpt.config.dtype]) for k, v in ckpt.tensors.items()}
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise ConfigError(f"checkpoint does not match its configuration: {exc}") from exc
    return model


def snapshot(model: ControlledModel, cfg: TrainConfig, step: int, gen: torch.Generator | None = None,
             losses=None) -> Checkpoint:
    tensors = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return Checkpoint(cfg, tensors, step, None if gen is None else gen.get_state(), list(losses or []))


CKPT_MAGIC = b"FXEC"
CKPT_VERSION = 1
TENSOR_TAGS = {torch.float32: 0, torch.uint8: 1, torch.float64: 2, torch.int64: 3}
TAG_DTYPES = {0: ("<f4", torch.float32), 1: ("u1", torch.uint8), 2: ("<f8", torch.float64), 3: ("<i8", torch.int64)}


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    blob = config_to_text(ckpt.config) + f"@step = {ckpt.step}\n"
    tensors = dict(ckpt.tensors)
    if ckpt.rng_state is not None:
        tensors["@rng_state"] = ckpt.rng_state
    buf = bytearray(CKPT_MAGIC + struct.pack("<I", CKPT_VERSION))
    raw = blob.encode("utf-8")
    buf += struct.pack("<I", len(raw)) + raw
    buf += struct.pack("<I", len(tensors))
    for name, t in tensors.items():
        t = t.detach().contiguous()
        if t.dtype not in TENSOR_TAGS:
            raise FormatError(f"cannot store dtype {t.dtype} for {name}")
        nb = name.encode("utf-8")
        buf += struct.pack("<I", len(nb)) + nb
        buf += struct.pack("<BB", TENSOR_TAGS[t.dtype], t.dim())
        buf += struct.pack(f"<{t.dim()}I", *t.shape)
        np_dtype = TAG_DTYPES[TENSOR_TAGS[t.dtype]][0]
        buf += t.numpy().astype(np_dtype).tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {CKPT_MAGIC!r}")
    if len(data) < 12:
        raise FormatError(f"{path}: truncated checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise FormatError(f"{path}: CRC mismatch")
    pos = 4

    def unpack(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(body):
            raise FormatError(f"{path}: truncated checkpoint")
        out = struct.unpack_from(fmt, body, pos)
        pos += size
        return out

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise FormatError(f"{path}: truncated checkpoint")
        out = body[pos:pos + n]
        pos += n
        return out

    (version,) = unpack("<I")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (blob_len,) = unpack("<I")
    text = take(blob_len).decode("utf-8")
    cfg_lines, step = [], 0
    for key, value in parse_pairs(text):
        if key == "@step":
            step = int(value)
        else:
            cfg_lines.append(f"{key} = {value}")
    cfg = parse_config("\n".join(cfg_lines))
    (count,) = unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = unpack("<I")
        name = take(nlen).decode("utf-8")
        tag, rank = unpack("<BB")
        if tag not in TAG_DTYPES:
            raise FormatError(f"{path}: unknown dtype tag {tag}")
        shape = unpack(f"<{rank}I") if rank else ()
        np_dtype, torch_dtype = TAG_DTYPES[tag]
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(n * np.dtype(np_dtype).itemsize), dtype=np_dtype).reshape(shape)
        tensors[name] = torch.from_numpy(arr.copy()).to(torch_dtype)
    if pos != len(body):
        raise FormatError(f"{path}: trailing bytes in checkpoint")
    rng = tensors.pop("@rng_state", None)
    return Checkpoint(cfg, tensors, step, rng)


def parameter_checksum(module: torch.nn.Module) -> int:
    crc = 0
    for name, t in module.state_dict().items():
        crc = zlib.crc32(name.encode(), crc)
        crc = zlib.crc32(t.detach().contiguous().numpy().tobytes(), crc)
    return crc


# --- training ----------------------------------------------------------------

LOSS_COLUMNS = {"base": ("step", "ldm"), "control": ("step", "ldm", "ca", "mask", "total")}


def write_loss_csv(rows: list[dict], path, stage: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS[stage])
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def _optimizer(params, cfg: TrainConfig):
    return torch.optim.AdamW(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)


def _draw(gen: torch.Generator, data: DatasetTensors, cfg: TrainConfig, T: int, dtype):
    idx = torch.randint(len(data), (cfg.batch_size,), generator=gen)
    t = torch.randint(T, (cfg.batch_size,), generator=gen)
    eps = torch.randn(cfg.batch_size, 3, 16, 16, generator=gen, dtype=torch.float64).to(dtype)
    return data.take(idx), t, eps


def train_base(cfg: TrainConfig, dataset, log_path=None, progress=None) -> Checkpoint:
    """Stage A: fit the text-conditioned U-Net with the denoising loss only."""
    if cfg.stage != "base":
        raise ConfigError("train_base needs stage = base")
    data = dataset if isinstance(dataset, DatasetTensors) else collate(list(dataset), DTYPES[cfg.dtype])
    if len(data) == 0:
        raise InputError("empty dataset")
    torch.manual_seed(cfg.seed)
    model = build_model(cfg)
    model.base.fit_prior(data.images)
    sched = linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = _optimizer(list(model.base.parameters()), cfg)
    rows = []
    for step in range(cfg.steps):
        batch, t, eps = _draw(gen, data, cfg, sched.T, model.dtype)
        z_t = add_noise(batch.images, t, eps, sched)
        eps_hat, _ = model.base(z_t, t, batch.tokens)
        loss = ldm_loss(eps_hat, eps)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        rows.append({"step": step, "ldm": loss.item()})
        if progress:
            progress(step, rows[-1])
    if log_path is not None:
        write_loss_csv(rows, log_path, "base")
    return snapshot(model, cfg, cfg.steps, gen, rows)


def control_losses(model: ControlledModel, batch: DatasetTensors, t, eps, sched, cfg: TrainConfig, fused=None,
                   union_mask=None):
    """Forward one batch through base + control and return ``(total, ldm, ca, mask)``."""
    fused = batch.fused if fused is None else fused
    union_mask = batch.union_mask if union_mask is None else union_mask
    z_t = add_noise(batch.images, t, eps, sched)
    eps_hat, base_recs, ctrl_recs = model(z_t, t, batch.tokens, fused)
    ldm = ldm_loss(eps_hat, eps)
    if cfg.objective == "ldm":
        zero = torch.zeros((), dtype=ldm.dtype)
        return ldm, ldm, zero, zero
    ca = ca_loss_batch(loss_layer_records(base_recs, ctrl_recs), batch.seg_tokens, batch.seg_masks, batch.seg_valid)
    msk = mask_loss(eps_hat, eps, union_mask)
    return total_loss(ldm, ca, msk, cfg.lambda_ca, cfg.lambda_mask), ldm, ca, msk


def train_control(cfg: TrainConfig, base_ckpt: Checkpoint, dataset, log_path=None, progress=None,
                  verify_frozen: bool = True) -> Checkpoint:
    """Stage B: freeze the base and train the control branch and adapters."""
    if cfg.stage != "control":
        raise ConfigError("train_control needs stage = control")
    if base_ckpt.has_control:
        raise ConfigError("base checkpoint already carries a control branch")
    if base_ckpt.config.base_channels != cfg.base_channels or base_ckpt.config.dtype != cfg.dtype:
        raise ConfigError("control config does not match the base checkpoint architecture")
    data = dataset if isinstance(dataset, DatasetTensors) else collate(list(dataset), DTYPES[cfg.dtype])
    if len(data) == 0:
        raise InputError("empty dataset")
    torch.manual_seed(cfg.seed)
    base = model_from_checkpoint(base_ckpt).base
    model = attach_control(base, cfg.slow_p, cfg.slow_q, cfg.rank, cfg.n_terms, cfg.share_slow, cfg.seed)
    sched = linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    gen = torch.Generator().manual_seed(cfg.seed + 7919)
    opt = _optimizer(model.control.trainable_parameters(), cfg)
    checksum = parameter_checksum(model.base)
    rows = []
    for step in range(cfg.steps):
        batch, t, eps = _draw(gen, data, cfg, sched.T, model.dtype)
        keep = (torch.rand(cfg.batch_size, generator=gen) >= cfg.cond_drop).to(model.dtype)
        fused = batch.fused * keep[:, None, None, None]
        union = batch.union_mask * keep[:, None, None]
        total, ldm, ca, msk = control_losses(model, batch, t, eps, sched, cfg, fused, union)
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        if verify_frozen and parameter_checksum(model.base) != checksum:
            raise RuntimeError(f"frozen base weights changed at step {step}")
        rows.append({"step": step, "ldm": ldm.item(), "ca": ca.item(), "mask": msk.item(), "total": total.item()})
        if progress:
            progress(step, rows[-1])
    if log_path is not None:
        write_loss_csv(rows, log_path, "control")
    return snapshot(model, cfg, cfg.steps, gen, rows)


# --- evaluation --------------------------------------------------------------

BASIS = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=np.float64)


def classify_pixels(image: np.ndarray) -> np.ndarray:
    """Nearest basis colour per pixel: 0 background, 1 red, 2 green, 3 blue."""
    px = np.asarray(image, dtype=np.float64).reshape(3, -1).T
    dist = ((px[:, None, :] - BASIS[None]) ** 2).sum(-1)
    return dist.argmin(1).reshape(image.shape[1:])


def snap_to_basis(image: np.ndarray) -> np.ndarray:
    return BASIS[classify_pixels(image)].transpose(2, 0, 1).astype(np.float32)


def seg_iou(image: np.ndarray, record: DatasetRecord) -> float:
    """Mean IoU over the colours named in the prompt between condition instance masks and classified pixels."""
    classes = classify_pixels(image)
    gt = {}
    colors = record.segment_colors()
    for seg, color in zip(record.segments, colors):
        gt.setdefault(color, np.zeros((16, 16), dtype=bool))
        gt[color] |= seg.mask.astype(bool)
    ious = []
    for color, mask in gt.items():
        pred = classes == COLORS.index(color) + 1
        union = (pred | mask).sum()
        ious.append((pred & mask).sum() / union if union else 1.0)
    return float(np.mean(ious))


def edge_ssim(image: np.ndarray, record: DatasetRecord) -> float:
    edges = extract_edge(snap_to_basis(image))[0]
    cond = record.bundle.fused_input[0]
    return float(ssim(torch.tensor(edges, dtype=torch.float64), torch.tensor(cond, dtype=torch.float64)))


def generate(model: ControlledModel, records, steps: int, seeds, conditioned: bool, cfg: TrainConfig,
             batch_size: int = 64) -> np.ndarray:
    sched = linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    out = []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        data = collate(chunk, model.dtype)
        fused = data.fused if conditioned else torch.zeros_like(data.fused)
        if model.control is None:
            fused = None
        imgs = sample(model, fused, data.tokens, sched, steps, list(seeds[start:start + batch_size]))
        out.append(imgs.double().numpy())
    return np.concatenate(out)


def evaluate(ckpt: Checkpoint, records, n_samples: int = 64, steps: int = 20, seed: int = 1000,
             images_override=None) -> list[dict]:
    return run_evaluation(ckpt, records, n_samples, steps, seed, images_override)[0]


def run_evaluation(ckpt: Checkpoint, records, n_samples: int = 64, steps: int = 20, seed: int = 1000,
                   images_override=None):
    """Seg-IoU and edge-SSIM of conditioned samples and of empty-bundle samples with the same seeds.

    Returns ``(rows, conditioned_images, unconditioned_images)``. ``images_override``
    replaces both sample sets (used to check the metric ceiling on ground truth).
    """
    records = list(records)[:n_samples]
    seeds = [seed + i for i in range(len(records))]
    if images_override is not None:
        cond = uncond = np.asarray(images_override)
    else:
        model = model_from_checkpoint(ckpt)
        model.eval()
        cond = generate(model, records, steps, seeds, True, ckpt.config)
        uncond = generate(model, records, steps, seeds, False, ckpt.config)
    rows = []
    for i, rec in enumerate(records):
        rows.append({
            "record_id": i,
            "seg_iou": seg_iou(cond[i], rec),
            "edge_ssim": edge_ssim(cond[i], rec),
            "uncond_seg_iou": seg_iou(uncond[i], rec),
            "uncond_edge_ssim": edge_ssim(uncond[i], rec),
        })
    return rows, cond, uncond


EVAL_COLUMNS = ("record_id", "seg_iou", "edge_ssim", "uncond_seg_iou", "uncond_edge_ssim")


def write_eval_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=EVAL_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def summarize(rows) -> dict:
    return {k: float(np.mean([r[k] for r in rows])) for k in EVAL_COLUMNS[1:]}


# --- parameter benchmark -----------------------------------------------------

@dataclass
class Manifest:
    layers: list  # (name, k, d)
    p: int = 2
    q: int = 2
    rank: int = 2
    n_terms: int = 2
    share_slow: bool = False
    lora_rank: int = 4
    phm_n: int = 4
    dtype_bytes: int = 4


def parse_manifest(text: str) -> Manifest:
    """``key = value`` lines; each ``layer = <name> <k> <d>`` adds one adapted projection."""
    layers = []
    opts = {}
    ints = {"p", "q", "rank", "n_terms", "lora_rank", "phm_n", "dtype_bytes"}
    for key, value in parse_pairs(text):
        if key == "layer":
            parts = value.split()
            if len(parts) != 3:
                raise InputError(f"layer line needs '<name> <k> <d>', got {value!r}")
            try:
                layers.append((parts[0], int(parts[1]), int(parts[2])))
            except ValueError:
                raise InputError(f"non-integer extent in layer {value!r}") from None
        elif key in ints:
            try:
                opts[key] = int(value)
            except ValueError:
                raise InputError(f"{key} must be an integer") from None
        elif key == "share_slow":
            opts[key] = value.lower() in ("1", "true", "yes", "on")
        else:
            raise InputError(f"unknown manifest key {key!r}")
    if not layers:
        raise InputError("manifest lists no layers")
    return Manifest(layers, **opts)


def toy_manifest(cfg: TrainConfig | None = None) -> Manifest:
    """Every adapted cross-attention projection of the control branch."""
    cfg = cfg or TrainConfig()
    unet = build_unet(unet_config(cfg))
    layers = []
    for i, lvl in enumerate(unet.encoder):
        if lvl.attn is None:
            continue
        for name, (k, d) in lvl.attn.projection_shapes().items():
            layers.append((f"enc{i}.attn.{name}", k, d))
    return Manifest(layers, cfg.slow_p, cfg.slow_q, cfg.rank, cfg.n_terms, cfg.share_slow)


def manifest_text(m: Manifest) -> str:
    lines = [f"p = {m.p}", f"q = {m.q}", f"rank = {m.rank}", f"n_terms = {m.n_terms}",
             f"share_slow = {str(m.share_slow).lower()}", f"lora_rank = {m.lora_rank}", f"phm_n = {m.phm_n}",
             f"dtype_bytes = {m.dtype_bytes}"]
    lines += [f"layer = {name} {k} {d}" for name, k, d in m.layers]
    return "\n".join(lines) + "\n"


def bench_params(m: Manifest) -> list[dict]:
    full = lora = phm = kron_total = 0
    for name, k, d in m.layers:
        shape = FactorShape.for_weight(k, d, m.p, m.q, m.rank, m.n_terms, m.share_slow)
        kron_count = param_count(shape)
        if shape.r * (shape.s + shape.t) + shape.p * shape.q < shape.s * shape.t * shape.p * shape.q / shape.n:
            if kron_count >= k * d:
                raise AssertionError(f"{name}: Kronecker adapter ({kron_count}) not smaller than full ({k * d})")
        full += k * d
        lora += m.lora_rank * (k + d)
        phm += m.phm_n**3 + (k * d) // m.phm_n
        kron_total += kron_count
    counts = {
        "full": full,
        f"lora_r{m.lora_rank}": lora,
        f"phm_n{m.phm_n}": phm,
        f"phm_n{m.phm_n}_shared": phm // 2,
        "kron_lora": kron_total,
    }
    if not kron_total < full:
        raise AssertionError("Kronecker adapter count is not below full fine-tuning")
    return [{"scheme": name, "trainable_params": c, "memory_bytes": memory_estimate(c, m.dtype_bytes)}
            for name, c in counts.items()]


def write_bench_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=("scheme", "trainable_params", "memory_bytes"))
        writer.writeheader()
        writer.writerows(rows)
