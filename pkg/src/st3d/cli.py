"""``st3d`` command-line tool: inspect, train, eval, predict, compute-mean."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import arch
from .checkpoint import (checkpoint_from_network, load_checkpoint, load_into_network,
                         network_from_checkpoint, save_checkpoint)
from .config import RunConfig, load_run_config
from .data import (FRAME_PATTERN, AugmentConfig, VideoRecord, compute_channel_mean,
                   frame_path, load_manifest, write_mean_file)
from .errors import (CheckpointError, ConfigError, DataError, ShapeError, TrainingDiverged)
from .train import Trainer, TrainingLog, evaluate_videos, recognize_video

log = logging.getLogger(__name__)

LOG_NAME = "train_log.csv"
EVAL_LOG_NAME = "eval_log.csv"
BEST_NAME = "best.ckpt"
LAST_NAME = "last.ckpt"
MEAN_NAME = "mean.txt"


class CommandError(Exception):
    """Usage problem detected after argument parsing."""


def _config(args, check_paths: bool = True) -> RunConfig:
    if args.config is None:
        raise CommandError("--config is required")
    cfg = load_run_config(args.config, check_paths)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None) is not None:
        cfg.out_dir = str(args.out)
    return cfg


def _aug_meta(aug: AugmentConfig) -> dict:
    return {"channel_mean": list(aug.channel_mean), "sample_size": aug.out_size,
            "clip_len": aug.clip_len, "scales": list(aug.scales), "flip_prob": aug.flip_prob}


def _aug_from_meta(meta: dict, spec) -> AugmentConfig:
    a = meta.get("augment", {})
    kw = {}
    if "scales" in a:
        kw["scales"] = tuple(a["scales"])
    return AugmentConfig(clip_len=a.get("clip_len", spec.clip_len),
                         out_size=a.get("sample_size", 112),
                         channel_mean=tuple(a.get("channel_mean", (0.0, 0.0, 0.0))), **kw)


# ------------------------------------------------------------------ commands

def cmd_inspect(args) -> int:
    cfg = _config(args, check_paths=False)
    spec = cfg.network_spec()
    net = arch.make_network(spec, seed=None)
    report = arch.summarize_shapes(net, (1, 3, cfg.clip_len, cfg.sample_size, cfg.sample_size))
    print(report.to_json() if args.json else report.to_table())
    return 0


def _split(records, name):
    return [r for r in records if r.split == name] or records


def _build_network(cfg: RunConfig):
    spec = cfg.network_spec()
    if cfg.mode == "finetune" and cfg.pretrained is not None:
        net = network_from_checkpoint(load_checkpoint(cfg.pretrained))
        if net.spec.num_classes != cfg.num_classes:
            arch.replace_classifier(net, cfg.num_classes, seed=cfg.seed)
        if net.spec.to_dict() != spec.to_dict():
            raise ConfigError(f"pretrained network {net.spec.model}-{net.spec.depth} does not match "
                              f"config {cfg.model}-{cfg.depth}")
        return net
    return arch.make_network(spec, seed=cfg.seed)


def cmd_train(args) -> int:
    cfg = _config(args)
    if cfg.train_manifest is None:
        raise CommandError("config field 'train_manifest' is required for training")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_set = _split(load_manifest(cfg.train_manifest, cfg.num_classes), "train")
    val_set = (_split(load_manifest(cfg.val_manifest, cfg.num_classes), "val")
               if cfg.val_manifest else None)
    aug = cfg.augment_config()
    meta = {"augment": _aug_meta(aug)}

    resume = None
    if args.checkpoint is not None:
        resume = load_checkpoint(args.checkpoint)
        net = network_from_checkpoint(resume)
        if net.spec.to_dict() != cfg.network_spec().to_dict():
            raise CheckpointError("resume checkpoint does not match the configured network")
    else:
        net = _build_network(cfg)
    trainer = Trainer(net, cfg.train_config(), aug)
    if resume is not None and "trainer" in resume.meta:
        trainer.load_state(resume.meta["trainer"], resume.velocity())

    def snapshot(name):
        save_checkpoint(out / name, checkpoint_from_network(net, trainer, meta))

    csv_log = TrainingLog(out / LOG_NAME, append=resume is not None)
    try:
        trainer.fit(train_set, val_set, csv_log, on_best=lambda t: snapshot(BEST_NAME),
                    on_epoch=lambda t: snapshot(LAST_NAME))
    except TrainingDiverged as e:
        print(f"error: {e}; last good state kept in {out / LAST_NAME}", file=sys.stderr)
        return 3
    finally:
        csv_log.close()
    if not (out / BEST_NAME).exists():
        snapshot(BEST_NAME)
    print(f"trained {trainer.epoch} epochs; checkpoints in {out}")
    return 0


def _eval_net(args, cfg):
    if args.checkpoint is None:
        raise CommandError("--checkpoint is required")
    ckpt = load_checkpoint(args.checkpoint)
    net = arch.make_network(cfg.network_spec(), seed=None)
    load_into_network(net, ckpt)
    return net, ckpt


def cmd_eval(args) -> int:
    cfg = _config(args)
    manifest = cfg.val_manifest or cfg.train_manifest
    if manifest is None:
        raise CommandError("config needs 'val_manifest' (or 'train_manifest') to evaluate")
    net, ckpt = _eval_net(args, cfg)
    dataset = _split(load_manifest(manifest, cfg.num_classes), "val")
    m = evaluate_videos(net, dataset, cfg.augment_config(), cfg.batch_size)
    print(f"clip_acc {m.clip_accuracy:.6f}")
    print(f"top1 {m.top1:.6f}")
    print(f"top5 {m.top5:.6f}")
    print(f"average {m.average:.6f}")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    epoch = int(ckpt.meta.get("trainer", {}).get("epoch", 0))
    lr = float(ckpt.meta.get("trainer", {}).get("lr", 0.0))
    csv_log = TrainingLog(out / EVAL_LOG_NAME, append=True)
    try:
        csv_log.write(epoch, "eval", m.clip_loss, lr, m)
    finally:
        csv_log.close()
    return 0


def count_frames(frame_dir) -> int:
    """Number of consecutively numbered frames in ``frame_dir``."""
    frame_dir = Path(frame_dir)
    if not frame_dir.is_dir():
        raise DataError(f"frame directory {frame_dir} does not exist")
    n = 0
    while frame_path(frame_dir, n).exists():
        n += 1
    if n == 0:
        raise DataError(f"no frames named like {FRAME_PATTERN.format(1)} in {frame_dir}")
    return n


def cmd_predict(args) -> int:
    if args.checkpoint is None:
        raise CommandError("--checkpoint is required")
    ckpt = load_checkpoint(args.checkpoint)
    net = network_from_checkpoint(ckpt)
    aug = _aug_from_meta(ckpt.meta, net.spec)
    video = VideoRecord(Path(args.frame_dir).name, Path(args.frame_dir), count_frames(args.frame_dir), 0)
    scores, _ = recognize_video(net, video, aug)
    order = np.argsort(-scores, kind="stable")[:5]
    for rank, idx in enumerate(order, 1):
        print(f"{rank} {int(idx)} {float(scores[idx]):.6f}")
    return 0


def cmd_compute_mean(args) -> int:
    if args.manifest is not None:
        manifest, out_dir = args.manifest, args.out or Path(".")
    else:
        cfg = _config(args, check_paths=False)
        if cfg.train_manifest is None:
            raise CommandError("config field 'train_manifest' is required")
        manifest, out_dir = cfg.train_manifest, Path(cfg.out_dir)
    records = [r for r in load_manifest(manifest) if r.split == "train"] or load_manifest(manifest)
    if not records:
        raise DataError(f"manifest {manifest} has no videos")
    mean = compute_channel_mean(records)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_mean_file(out_dir / MEAN_NAME, mean)
    print(" ".join(f"{m:.4f}" for m in mean))
    return 0


# ------------------------------------------------------------------- parsing

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="st3d", description="3D residual networks for video action recognition")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False):
        sp.add_argument("--config", type=Path, help="JSON run configuration")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", type=Path, help="output directory")
        if checkpoint:
            sp.add_argument("--checkpoint", type=Path, help="checkpoint file")

    sp = sub.add_parser("inspect", help="print per-stage output shapes and parameter counts")
    common(sp)
    sp.add_argument("--json", action="store_true", help="emit JSON rows instead of a table")
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("train", help="train from scratch or fine-tune; --checkpoint resumes")
    common(sp, checkpoint=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the validation manifest")
    common(sp, checkpoint=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("predict", help="print the top-5 classes for one frame directory")
    common(sp, checkpoint=True)
    sp.add_argument("frame_dir", type=Path)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("compute-mean", help="write the per-channel mean of the training frames")
    common(sp)
    sp.add_argument("--manifest", type=Path, help="manifest to scan instead of the config's")
    sp.set_defaults(func=cmd_compute_mean)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CommandError, ConfigError, DataError, CheckpointError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
