"""Command-line entry point: ``flexctrl <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import plotting
from .config import TrainConfig, load_config
from .diffusion import linear_schedule, sample
from .errors import FlexCtrlError, InputError
from .synthdata import encode_prompt, make_corpus, read_dataset, write_dataset
from .training import (
    bench_params,
    load_checkpoint,
    model_from_checkpoint,
    pad_tokens,
    parse_manifest,
    run_evaluation,
    save_checkpoint,
    summarize,
    toy_manifest,
    train_base,
    train_control,
    write_bench_csv,
    write_eval_csv,
)

log = logging.getLogger("flexctrl")


def write_ppm(image: np.ndarray, path) -> None:
    """Binary PPM (P6) from a ``3×H×W`` array in [0, 1]."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0, 1)
    _, h, w = img.shape
    pixels = np.round(img.transpose(1, 2, 0) * 255).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise InputError(f"{path}: not a P6 image")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    pixels = np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return pixels.transpose(2, 0, 1).astype(np.float32) / maxval


def _config(path, stage: str) -> TrainConfig:
    cfg = load_config(path) if path else TrainConfig()
    return cfg.replace(stage=stage)


def _progress(every: int = 100):
    def report(step, row):
        if step % every == 0:
            log.info("step %d %s", step, " ".join(f"{k}={v:.5f}" for k, v in row.items() if k != "step"))
    return report


def _loss_csv(out: Path) -> Path:
    return out.with_suffix(".losses.csv")


def cmd_gen_data(args) -> None:
    records = make_corpus(args.seed, args.count)
    write_dataset(records, args.out)
    log.info("wrote %d records to %s", len(records), args.out)


def cmd_train_base(args) -> None:
    cfg = _config(args.config, "base")
    out = Path(args.out)
    log_path = _loss_csv(out)
    ckpt = train_base(cfg, read_dataset(args.data), log_path=log_path, progress=_progress())
    save_checkpoint(ckpt, out)
    plotting.plot_losses(ckpt.losses, plotting.figure_path(log_path))
    log.info("saved %s and %s", out, log_path)


def cmd_train_control(args) -> None:
    cfg = _config(args.config, "control")
    out = Path(args.out)
    log_path = _loss_csv(out)
    ckpt = train_control(cfg, load_checkpoint(args.base), read_dataset(args.data), log_path=log_path,
                         progress=_progress())
    save_checkpoint(ckpt, out)
    plotting.plot_losses(ckpt.losses, plotting.figure_path(log_path))
    log.info("saved %s and %s", out, log_path)


def _cond_record(spec: str):
    path, sep, index = spec.rpartition(":")
    if not sep or not index.isdigit():
        path, index = spec, "0"
    records = read_dataset(path)
    i = int(index)
    if not 0 <= i < len(records):
        raise InputError(f"record index {i} outside dataset of {len(records)}")
    return records[i]


def cmd_sample(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    model.eval()
    record = _cond_record(args.cond_record) if args.cond_record else None
    if args.prompt is not None:
        ids = encode_prompt(args.prompt)
    elif record is not None:
        ids = list(record.tokens)
    else:
        raise InputError("sample needs --prompt or --cond-record")
    tokens = torch.tensor([pad_tokens(ids)], dtype=torch.long)
    fused = None
    if record is not None and model.control is not None:
        fused = torch.tensor(record.bundle.fused_input[None], dtype=model.dtype)
    cfg = ckpt.config
    sched = linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    image = sample(model, fused, tokens, sched, args.steps, args.seed)[0]
    write_ppm(image.double().numpy(), args.out)
    log.info("wrote %s", args.out)


def cmd_eval(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    records = read_dataset(args.data)
    rows, cond, uncond = run_evaluation(ckpt, records, args.n, args.steps, args.seed)
    write_eval_csv(rows, args.out)
    plotting.plot_metrics(rows, plotting.figure_path(args.out))
    plotting.plot_samples(cond, uncond, plotting.figure_path(args.out, "_samples"))
    for key, value in summarize(rows).items():
        print(f"{key}\t{value:.4f}")


def cmd_bench(args) -> None:
    if args.manifest == "toy":
        manifest = toy_manifest()
    else:
        manifest = parse_manifest(Path(args.manifest).read_text(encoding="utf-8"))
    rows = bench_params(manifest)
    write_bench_csv(rows, args.out)
    plotting.plot_bench(rows, plotting.figure_path(args.out))
    for row in rows:
        print(f"{row['scheme']}\t{row['trainable_params']}\t{row['memory_bytes']}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flexctrl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic shapes corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=2048)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-base", help="stage A: train the text-conditioned base U-Net")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("train-control", help="stage B: train the control branch on a frozen base")
    p.add_argument("--config")
    p.add_argument("--base", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_control)

    p = sub.add_parser("sample", help="generate one image as a binary PPM")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt")
    p.add_argument("--cond-record", help="DATASET[:INDEX] whose condition bundle steers sampling")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="seg-IoU and edge-SSIM against an empty-bundle baseline")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--seed", type=int, default=1000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="trainable-parameter and memory table per adaptation scheme")
    p.add_argument("--manifest", default="toy", help="manifest file, or 'toy' for the built-in architecture")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (FlexCtrlError, OSError) as exc:
        print(f"flexctrl: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
