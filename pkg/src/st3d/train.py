"""Optimization, learning-rate schedule, training loops and evaluation metrics."""
from __future__ import annotations

import csv
import logging
import math
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

from . import ops
from .arch import Network, freeze_stages
from .data import AugmentConfig, Clip, Rng, inference_clips, sample_training_clip
from .errors import ConfigError, TrainingDiverged
from .tensor import DTYPE, Tensor, backward, no_grad, zero_grads

log = logging.getLogger(__name__)

LOG_HEADER = ("epoch", "phase", "loss", "clip_acc", "video_top1", "video_top5", "lr")

MODE_DEFAULTS = {
    "scratch": {"initial_lr": 0.1, "weight_decay": 1e-3, "trainable_prefixes": None},
    "finetune": {"initial_lr": 1e-3, "weight_decay": 1e-5, "trainable_prefixes": ("conv5_x", "fc")},
}


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 1e-3
    velocity: dict = field(default_factory=dict)


def sgd_step(params: Iterable[tuple[str, Tensor]], state: OptimizerState) -> None:
    """One SGD-with-momentum update of every parameter that requires gradients.

    ``g' = g + weight_decay * w``; ``v = momentum * v + g'``; ``w = w - lr * v``.
    """
    lr, mom, wd = DTYPE(state.lr), DTYPE(state.momentum), DTYPE(state.weight_decay)
    for name, p in params:
        if not p.requires_grad:
            continue
        if p.grad is None:
            raise ValueError(f"trainable parameter {name} has no gradient")
        g = p.grad + wd * p.data if wd else p.grad
        v = state.velocity.get(name)
        v = g.astype(DTYPE, copy=True) if v is None else mom * v + g
        state.velocity[name] = v
        p.data -= lr * v


class SGD:
    """Stateful wrapper binding :func:`sgd_step` to a network's named parameters."""

    def __init__(self, net, lr: float, momentum: float = 0.9, weight_decay: float = 1e-3):
        if lr < 0 or weight_decay < 0 or not 0 <= momentum < 1:
            raise ConfigError("need lr >= 0, weight_decay >= 0 and momentum in [0, 1)")
        self.net = net
        self.state = OptimizerState(lr, momentum, weight_decay)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def step(self) -> None:
        sgd_step(self.net.named_parameters(), self.state)

    def zero_grad(self) -> None:
        zero_grads(self.net.parameters())


# ----------------------------------------------------------------- schedule

@dataclass
class PlateauSchedule:
    """Divide the learning rate by 1/factor after ``patience`` epochs without improvement.

    An epoch improves when its validation loss is below ``best - min_delta``.
    """

    lr: float
    factor: float = 0.1
    patience: int = 10
    min_delta: float = 1e-3
    best_loss: float = math.inf
    epochs_since_improve: int = 0

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise ConfigError(f"factor must lie in (0, 1), got {self.factor}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")

    def step(self, val_loss: float) -> float:
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"validation loss is {val_loss}")
        if val_loss < self.best_loss - self.min_delta:
            self.best_loss = val_loss
            self.epochs_since_improve = 0
        else:
            self.epochs_since_improve += 1
            if self.epochs_since_improve >= self.patience:
                self.lr = self.lr / (1.0 / self.factor)
                self.epochs_since_improve = 0
        return self.lr


# ------------------------------------------------------------------- config

@dataclass
class TrainConfig:
    mode: str = "scratch"
    initial_lr: Optional[float] = None
    weight_decay: Optional[float] = None
    momentum: float = 0.9
    batch_size: int = 8
    max_epochs: int = 50
    seed: int = 0
    trainable_prefixes: Optional[tuple] = None
    patience: int = 10
    min_delta: float = 1e-3
    target_top1: Optional[float] = None

    def __post_init__(self):
        if self.mode not in MODE_DEFAULTS:
            raise ConfigError(f"mode must be one of {tuple(MODE_DEFAULTS)}, got {self.mode!r}")
        defaults = MODE_DEFAULTS[self.mode]
        for key, value in defaults.items():
            if getattr(self, key) is None:
                setattr(self, key, value)
        if self.trainable_prefixes is not None:
            self.trainable_prefixes = tuple(self.trainable_prefixes)
        if self.initial_lr <= 0:
            raise ConfigError(f"initial_lr must be > 0, got {self.initial_lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ConfigError("batch_size must be >= 1 and max_epochs >= 0")


# ------------------------------------------------------------------ metrics

@dataclass
class Metrics:
    clip_accuracy: float = float("nan")
    clip_loss: float = float("nan")
    top1: float = float("nan")
    top5: float = float("nan")

    @property
    def average(self) -> float:
        return (self.top1 + self.top5) / 2


def top_k_hits(scores: np.ndarray, labels, k: int = 5) -> np.ndarray:
    """Whether each label is among its row's ``k`` highest scores (ties favour lower indices)."""
    scores = np.asarray(scores)
    labels = np.asarray(labels).reshape(-1)
    k = min(k, scores.shape[1])
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return (order == labels[:, None]).any(axis=1)


def video_metrics(scores: np.ndarray, labels) -> tuple[float, float]:
    """(top-1, top-5) accuracy of per-video class scores."""
    scores = np.asarray(scores)
    if scores.shape[0] == 0:
        raise ValueError("no videos to score")
    return float(top_k_hits(scores, labels, 1).mean()), float(top_k_hits(scores, labels, 5).mean())


def average_accuracy(top1: float, top5: float) -> float:
    return (top1 + top5) / 2


# --------------------------------------------------------------- inference

def _logits(net, batch: np.ndarray) -> np.ndarray:
    out = net(Tensor(batch))
    return out.data if isinstance(out, Tensor) else np.asarray(out, DTYPE)


def _clip_logits(net, clips: Sequence[Clip], batch_size: int) -> np.ndarray:
    parts = []
    for i in range(0, len(clips), batch_size):
        batch = np.stack([c.tensor for c in clips[i:i + batch_size]])
        parts.append(_logits(net, batch))
    return np.concatenate(parts).astype(np.float64)


def _set_eval(net) -> None:
    if hasattr(net, "eval"):
        net.eval()


def recognize_video(net, video, cfg: AugmentConfig, batch_size: int = 8) -> tuple[np.ndarray, int]:
    """Average the softmax scores of all sliding-window clips; return (scores, argmax)."""
    _set_eval(net)
    clips = inference_clips(video, cfg)
    with no_grad():
        probs = ops.softmax(_clip_logits(net, clips, batch_size))
    scores = probs.mean(axis=0)
    return scores, int(np.argmax(scores))


def _scan(net, dataset, cfg: AugmentConfig, batch_size: int):
    """Per-clip logits grouped by video, computed in inference mode."""
    videos = list(dataset)
    if not videos:
        raise ValueError("cannot evaluate an empty dataset")
    _set_eval(net)
    with no_grad():
        for v in videos:
            yield v, _clip_logits(net, inference_clips(v, cfg), batch_size)


def evaluate_clips(net, dataset, cfg: AugmentConfig, batch_size: int = 8) -> tuple[float, float]:
    """Per-clip accuracy and mean cross-entropy; every window counts on its own."""
    hits, losses = [], []
    for v, logits in _scan(net, dataset, cfg, batch_size):
        hits.extend(np.argmax(logits, axis=1) == v.label)
        losses.extend(-ops.log_softmax(logits)[:, v.label])
    return float(np.mean(hits)), float(np.mean(losses))


def evaluate_videos(net, dataset, cfg: AugmentConfig, batch_size: int = 8) -> Metrics:
    """Clip-level and video-level accuracies in one pass over the dataset."""
    hits, losses, scores, labels = [], [], [], []
    for v, logits in _scan(net, dataset, cfg, batch_size):
        hits.extend(np.argmax(logits, axis=1) == v.label)
        losses.extend(-ops.log_softmax(logits)[:, v.label])
        scores.append(ops.softmax(logits).mean(axis=0))
        labels.append(v.label)
    top1, top5 = video_metrics(np.stack(scores), labels)
    return Metrics(float(np.mean(hits)), float(np.mean(losses)), top1, top5)


# ---------------------------------------------------------------- training

def _prefetch(items: Iterator, depth: int = 2) -> Iterator:
    """Run ``items`` on a background thread, at most ``depth`` results ahead."""
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()
    stop = threading.Event()

    def produce():
        try:
            for item in items:
                if stop.is_set():
                    return
                q.put((item, None))
        except BaseException as e:  # surfaced to the consumer
            q.put((None, e))
            return
        q.put((done, None))

    t = threading.Thread(target=produce, daemon=True)
    t.start()
    try:
        while True:
            item, err = q.get()
            if err is not None:
                raise err
            if item is done:
                return
            yield item
    finally:
        stop.set()
        while t.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                t.join(timeout=0.01)


def _training_batches(videos, order, cfg, epoch_rng: Rng, batch_size):
    for b, i in enumerate(range(0, len(order), batch_size)):
        chunk = [videos[j] for j in order[i:i + batch_size]]
        clips = [sample_training_clip(v, cfg, epoch_rng.fork(v.id)) for v in chunk]
        x = np.stack([c.tensor for c in clips])
        y = np.array([c.label for c in clips], dtype=np.int64)
        yield b, x, y


def train_epoch(net: Network, dataset, cfg: AugmentConfig, opt: SGD, rng: Rng,
                batch_size: int = 8) -> float:
    """One pass over shuffled videos, one random clip each; returns the mean training loss.

    Clip randomness comes from a per-video generator forked from ``rng``, so
    it does not depend on batch composition or loader threading.
    """
    videos = list(dataset)
    if not videos:
        raise ValueError("cannot train on an empty dataset")
    net.train()
    order = list(range(len(videos)))
    rng.shuffle(order)
    epoch_rng = Rng(rng.next_u64())
    total, count = 0.0, 0
    for b, x, y in _prefetch(_training_batches(videos, order, cfg, epoch_rng, batch_size)):
        try:
            loss = ops.softmax_cross_entropy(net(Tensor(x)), y)
        except ValueError as e:
            raise type(e)(f"batch {b}: {e}") from e
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"loss became {value} at batch {b}")
        if loss.requires_grad:
            backward(loss)
            opt.step()
            opt.zero_grad()
        total += value * len(y)
        count += len(y)
    return total / count


class TrainingLog:
    """CSV writer for per-epoch training and validation rows."""

    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        fresh = not (append and self.path.exists())
        self._fh = open(self.path, "w" if fresh else "a", newline="", encoding="utf-8")
        self._w = csv.writer(self._fh, lineterminator="\n")
        if fresh:
            self._w.writerow(LOG_HEADER)
            self._fh.flush()

    def write(self, epoch: int, phase: str, loss: float, lr: float, metrics: Optional[Metrics] = None):
        extra = ("", "", "") if metrics is None else (
            repr(metrics.clip_accuracy), repr(metrics.top1), repr(metrics.top5))
        self._w.writerow((epoch, phase, repr(float(loss))) + extra + (repr(float(lr)),))
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


class Trainer:
    """Scratch training or fine-tuning with plateau-driven learning-rate decay.

    Validation loss (per-clip cross-entropy on ``val_set``; the training loss
    when no validation set is given) drives the schedule.  ``on_best`` is
    called whenever that loss reaches a new minimum.
    """

    def __init__(self, net: Network, cfg: TrainConfig, aug: AugmentConfig):
        self.net = net
        self.cfg = cfg
        self.aug = aug
        if cfg.trainable_prefixes is not None:
            freeze_stages(net, cfg.trainable_prefixes)
        self.opt = SGD(net, cfg.initial_lr, cfg.momentum, cfg.weight_decay)
        self.schedule = PlateauSchedule(cfg.initial_lr, patience=cfg.patience, min_delta=cfg.min_delta)
        self.rng = Rng(cfg.seed)
        self.epoch = 0
        self.history: list[dict] = []

    def fit(self, train_set, val_set=None, csv_log: Optional[TrainingLog] = None,
            on_best: Optional[Callable[["Trainer"], None]] = None,
            on_epoch: Optional[Callable[["Trainer"], None]] = None) -> list[dict]:
        train_set = list(train_set)
        val_set = None if val_set is None else list(val_set)
        while self.epoch < self.cfg.max_epochs:
            self.epoch += 1
            lr = self.opt.lr
            loss = train_epoch(self.net, train_set, self.aug, self.opt, self.rng, self.cfg.batch_size)
            row = {"epoch": self.epoch, "train_loss": loss, "lr": lr}
            if csv_log is not None:
                csv_log.write(self.epoch, "train", loss, lr)
            monitor = loss
            if val_set:
                m = evaluate_videos(self.net, val_set, self.aug, self.cfg.batch_size)
                row.update(val_loss=m.clip_loss, clip_acc=m.clip_accuracy, top1=m.top1, top5=m.top5)
                if csv_log is not None:
                    csv_log.write(self.epoch, "val", m.clip_loss, lr, m)
                monitor = m.clip_loss
            improved = monitor < self.schedule.best_loss - self.schedule.min_delta
            self.opt.lr = self.schedule.step(monitor)
            self.history.append(row)
            log.info("epoch %d: %s", self.epoch,
                     " ".join(f"{k}={v:.4g}" for k, v in row.items() if k != "epoch"))
            if improved and on_best is not None:
                on_best(self)
            if on_epoch is not None:
                on_epoch(self)
            target = self.cfg.target_top1
            if target is not None and row.get("top1", -1.0) >= target:
                break
        return self.history

    def state(self) -> dict:
        """Resumable state other than the network weights."""
        return {
            "epoch": self.epoch,
            "lr": self.opt.lr,
            "schedule": {"lr": self.schedule.lr, "best_loss": self.schedule.best_loss,
                         "epochs_since_improve": self.schedule.epochs_since_improve},
            "rng_state": self.rng.state,
        }

    def load_state(self, state: dict, velocity: Optional[dict] = None) -> None:
        self.epoch = int(state["epoch"])
        self.opt.lr = float(state["lr"])
        s = state["schedule"]
        self.schedule.lr = float(s["lr"])
        self.schedule.best_loss = float(s["best_loss"])
        self.schedule.epochs_since_improve = int(s["epochs_since_improve"])
        self.rng.state = int(state["rng_state"])
        if velocity:
            self.opt.state.velocity = {k: np.array(v, DTYPE) for k, v in velocity.items()}
