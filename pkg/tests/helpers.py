"""Shared test utilities: finite-difference checks and synthetic datasets."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from st3d.data import ArrayVideo, VideoRecord, frame_path, write_manifest, write_ppm
from st3d.tensor import Tensor, backward

FD_STEP = 1e-2
FD_ABS = 1e-3
FD_REL = 1e-2


def fd_violations(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Elements breaking |g_a - g_fd| <= 1e-3 + 1e-2 * |g_fd|."""
    return np.abs(analytic - numeric) > FD_ABS + FD_REL * np.abs(numeric)


def numeric_grad(f, arr: np.ndarray, indices=None, step: float = FD_STEP) -> dict:
    """Central differences of scalar ``f()`` w.r.t. entries of ``arr`` (perturbed in place)."""
    flat = arr.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    out = {}
    for i in indices:
        old = flat[i]
        flat[i] = old + step
        hi = float(f())
        flat[i] = old - step
        lo = float(f())
        flat[i] = old
        out[int(i)] = (hi - lo) / (2 * step)
    return out


def check_op_gradients(build, inputs: list[Tensor], seed: int = 0):
    """Compare analytic and numeric gradients of ``sum(build(*inputs) * R)``.

    Returns a list of (input index, flat index, analytic, numeric) failures.
    """
    out = build(*inputs)
    weights = np.random.default_rng(seed).standard_normal(out.shape).astype(np.float32)

    def loss_value():
        return float(np.sum(build(*inputs).data.astype(np.float64) * weights))

    for t in inputs:
        t.grad = None
    out = build(*inputs)
    loss = (out * Tensor(weights)).sum()
    backward(loss)
    failures = []
    for k, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        numeric = numeric_grad(loss_value, t.data)
        analytic = t.grad.reshape(-1)
        for i, g in numeric.items():
            if fd_violations(np.float64(analytic[i]), np.float64(g)):
                failures.append((k, i, float(analytic[i]), g))
    return failures


def moving_square_video(label: int, n_frames: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Noisy frames with a bright square moving down (label 0) or up (label 1)."""
    bg = rng.integers(40, 90, (size, size, 3))
    x = int(rng.integers(0, size - 16))
    frames = np.empty((n_frames, size, size, 3), np.uint8)
    for t in range(n_frames):
        img = bg + rng.integers(0, 20, (size, size, 3))
        y = (8 + 3 * t) if label == 0 else (size - 24 - 3 * t)
        y %= size - 16
        img[y:y + 16, x:x + 16] = 220
        frames[t] = img
    return frames


def write_synthetic_dataset(root, n_videos: int = 8, n_frames: int = 16, size: int = 64,
                            seed: int = 0, split: str = "train") -> Path:
    """Two-class PPM dataset plus a manifest; returns the manifest path."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_videos):
        label = i % 2
        d = root / f"vid{i}"
        d.mkdir(parents=True, exist_ok=True)
        for t, img in enumerate(moving_square_video(label, n_frames, size, rng)):
            write_ppm(frame_path(d, t), img)
        records.append(VideoRecord(f"vid{i}", Path(f"vid{i}"), n_frames, label, split))
    manifest = root / f"{split}.tsv"
    write_manifest(manifest, records)
    return manifest


def color_videos(seed=0, n=8, frames=16, size=64):
    """Two classes told apart by a red or blue cast."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        base = rng.integers(60, 100, (frames, size, size, 3))
        base[..., 0 if i % 2 == 0 else 2] += 80
        out.append(ArrayVideo(f"v{i}", base.astype(np.uint8), i % 2))
    return out


SMOKE_CONFIG = {
    "model": "resnet", "depth": 18, "num_classes": 2, "width_divisor": 8, "sample_size": 56,
    "channel_mean": [70.0, 70.0, 70.0], "batch_size": 4, "seed": 0,
}


def write_config(path, **fields) -> Path:
    cfg = dict(SMOKE_CONFIG)
    cfg.update(fields)
    Path(path).write_text(json.dumps(cfg), encoding="utf-8")
    return Path(path)
