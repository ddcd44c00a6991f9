"""Video ingestion and clip generation for training and recognition.

Training clips: uniform temporal start (clips wrap around the end of the
video), one of five crop anchors (four corners or center), one of five
scales of the frame's short side, square crop, bilinear resize, horizontal
flip with probability 0.5, per-channel mean subtraction.

Recognition clips: non-overlapping windows starting at 0, L, 2L, ...; the
last partial window wraps around; each window is center-cropped at scale 1.

Frames live on disk as binary PPM (P6, 8-bit RGB) files named
``frame_000001.ppm``, ``frame_000002.ppm``, ... (1-based) inside the video's
frame directory.  Pixel values stay in [0, 255] before mean subtraction.
"""
from __future__ import annotations

import functools
import hashlib
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
POSITIONS = ("center", "top_left", "top_right", "bottom_left", "bottom_right")
DEFAULT_SCALES = tuple(2.0 ** (-i / 4) for i in range(5))
FRAME_PATTERN = "frame_{:06d}.ppm"

_MASK64 = (1 << 64) - 1


# ----------------------------------------------------------------------- rng

def _splitmix(z: int) -> int:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK64
    return z ^ (z >> 31)


def _hash64(key) -> int:
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """SplitMix64 generator.

    ``state`` advances by the golden-ratio increment 0x9E3779B97F4A7C15 and
    each output is the SplitMix64 finalizer of the new state.  Bounded
    integers use the multiply-shift map ``(x * n) >> 64``; floats take the top
    53 bits.
    """

    GAMMA = 0x9E3779B97F4A7C15

    def __init__(self, seed: int = 0):
        self.state = int(seed) & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + self.GAMMA) & _MASK64
        return _splitmix(self.state)

    def randbelow(self, n: int) -> int:
        if n < 1:
            raise ValueError("randbelow needs n >= 1")
        return (self.next_u64() * n) >> 64

    def random(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def choice(self, seq: Sequence):
        return seq[self.randbelow(len(seq))]

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

    def fork(self, key) -> "Rng":
        """Child generator determined by the current state and ``key``; does not advance self."""
        return Rng(_splitmix((self.state ^ _hash64(key)) & _MASK64))


# -------------------------------------------------------------------- frames

def frame_path(frame_dir, index: int) -> Path:
    """Path of the 0-based frame ``index``."""
    return Path(frame_dir) / FRAME_PATTERN.format(index + 1)


def _ppm_tokens(buf: bytes, count: int, path) -> tuple[list[int], int]:
    tokens, pos, n = [], 0, len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DataError(f"truncated PPM header in {path}")
        tokens.append(buf[start:pos])
    return tokens, pos + 1


def read_ppm(path) -> np.ndarray:
    """Read a binary 8-bit PPM into an (H, W, 3) uint8 array."""
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read frame {path}: {e.strerror}") from e
    tokens, offset = _ppm_tokens(buf, 4, path)
    if tokens[0] != b"P6":
        raise DataError(f"{path} is not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise DataError(f"malformed PPM header in {path}") from e
    if maxval != 255 or w < 1 or h < 1:
        raise DataError(f"unsupported PPM in {path}: {w}x{h}, maxval {maxval}")
    need = w * h * 3
    if len(buf) - offset < need:
        raise DataError(f"truncated pixel data in {path}")
    return np.frombuffer(buf, np.uint8, need, offset).reshape(h, w, 3)


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError("write_ppm expects an (H, W, 3) uint8 array")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(image).tobytes())


@functools.lru_cache(maxsize=1024)
def _cached_frame(path: str, mtime_ns: int) -> np.ndarray:
    return read_ppm(path)


def load_frame(path) -> np.ndarray:
    try:
        mtime = os.stat(path).st_mtime_ns
    except OSError as e:
        raise DataError(f"cannot read frame {path}: {e.strerror}") from e
    return _cached_frame(str(path), mtime)


# ------------------------------------------------------------------- records

@dataclass(frozen=True)
class VideoRecord:
    """One video: a directory of numbered PPM frames plus its label."""

    id: str
    frame_dir: Path
    n_frames: int
    label: int
    split: str = "train"

    def frames(self, indices: Sequence[int]) -> np.ndarray:
        """Stack the requested 0-based frames into an (L, H, W, 3) uint8 array."""
        return np.stack([load_frame(frame_path(self.frame_dir, i)) for i in indices])


@dataclass(frozen=True, eq=False)
class ArrayVideo:
    """In-memory video backed by a (T, H, W, 3) uint8 array."""

    id: str
    data: np.ndarray
    label: int = 0
    split: str = "train"

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    def frames(self, indices: Sequence[int]) -> np.ndarray:
        return self.data[np.asarray(indices, dtype=np.intp)]


def load_manifest(path, num_classes: Optional[int] = None) -> list[VideoRecord]:
    """Parse a tab-separated manifest ``id, frame_dir, n_frames, label, split``.

    Relative frame directories resolve against the manifest's directory.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e.strerror}") from e
    records = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            raise DataError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(fields)}")
        vid, frame_dir, n_frames, label, split = (f.strip() for f in fields)
        try:
            n_frames, label = int(n_frames), int(label)
        except ValueError:
            raise DataError(f"{path}:{lineno}: n_frames and label must be integers") from None
        if not vid:
            raise DataError(f"{path}:{lineno}: empty id")
        if n_frames < 1:
            raise DataError(f"{path}:{lineno}: n_frames must be >= 1, got {n_frames}")
        if label < 0 or (num_classes is not None and label >= num_classes):
            raise DataError(f"{path}:{lineno}: label {label} outside [0, {num_classes})")
        if split not in SPLITS:
            raise DataError(f"{path}:{lineno}: split must be one of {SPLITS}, got {split!r}")
        fdir = Path(frame_dir)
        if not fdir.is_absolute():
            fdir = path.parent / fdir
        if not fdir.is_dir():
            raise DataError(f"{path}:{lineno}: frame directory {fdir} does not exist")
        records.append(VideoRecord(vid, fdir, n_frames, label, split))
    if not records:
        log.warning("manifest %s contains no records", path)
    return records


def write_manifest(path, records: Iterable[VideoRecord]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(f"{r.id}\t{r.frame_dir}\t{r.n_frames}\t{r.label}\t{r.split}\n")


# ------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentConfig:
    scales: tuple = DEFAULT_SCALES
    positions: tuple = POSITIONS
    clip_len: int = 16
    out_size: int = 112
    flip_prob: float = 0.5
    channel_mean: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        object.__setattr__(self, "positions", tuple(self.positions))
        object.__setattr__(self, "channel_mean", tuple(float(m) for m in self.channel_mean))
        if not self.scales or any(not 0.0 < s <= 1.0 for s in self.scales):
            raise ConfigError(f"scales must lie in (0, 1], got {self.scales}")
        if not self.positions or any(p not in POSITIONS for p in self.positions):
            raise ConfigError(f"positions must be drawn from {POSITIONS}")
        if self.out_size < 1 or self.clip_len < 1:
            raise ConfigError("out_size and clip_len must be positive")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        if len(self.channel_mean) != 3:
            raise ConfigError("channel_mean needs three values (R, G, B)")


@dataclass(frozen=True)
class Provenance:
    t_start: int
    position: str
    scale: float
    flipped: bool


@dataclass
class Clip:
    tensor: np.ndarray = field(repr=False)
    source_id: str
    provenance: Provenance
    label: int = 0


def clip_indices(n_frames: int, clip_len: int, t_start: int) -> list[int]:
    """``clip_len`` frame indices from ``t_start``, looping over the video as often as needed."""
    if n_frames < 1:
        raise ValueError("video has no frames")
    if not 0 <= t_start < n_frames:
        raise ValueError(f"t_start {t_start} outside [0, {n_frames})")
    return [(t_start + j) % n_frames for j in range(clip_len)]


def crop_box(height: int, width: int, scale: float, position: str) -> tuple[int, int, int]:
    """(top, left, side) of the square crop for one scale and anchor."""
    short = min(height, width)
    side = max(1, min(short, int(math.floor(scale * short + 0.5))))
    if position == "center":
        return (height - side) // 2, (width - side) // 2, side
    if position == "top_left":
        return 0, 0, side
    if position == "top_right":
        return 0, width - side, side
    if position == "bottom_left":
        return height - side, 0, side
    if position == "bottom_right":
        return height - side, width - side, side
    raise ConfigError(f"unknown crop position {position!r}")


def _linear_taps(n_in: int, n_out: int):
    # half-pixel centers: source coordinate (i + 0.5) * n_in / n_out - 0.5
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = (src - lo).astype(np.float32)
    return lo, hi, frac


def resize_bilinear(frames: np.ndarray, out_h: int, out_w: Optional[int] = None) -> np.ndarray:
    """Bilinear resize of (..., H, W, C) frames, half-pixel sample centers, edge clamping."""
    out_w = out_h if out_w is None else out_w
    x = np.asarray(frames, dtype=np.float32)
    h, w = x.shape[-3:-1]
    y0, y1, fy = _linear_taps(h, out_h)
    x0, x1, fx = _linear_taps(w, out_w)
    rows = x[..., y0, :, :] * (1 - fy)[:, None, None] + x[..., y1, :, :] * fy[:, None, None]
    return rows[..., x0, :] * (1 - fx)[:, None] + rows[..., x1, :] * fx[:, None]


def hflip(clip: np.ndarray) -> np.ndarray:
    """Reverse the width (last) axis."""
    return np.ascontiguousarray(clip[..., ::-1])


def mean_subtract(clip: np.ndarray, mean) -> np.ndarray:
    """Subtract a per-channel constant from a (3, ...) array; no variance scaling."""
    mean = np.asarray(mean, dtype=np.float32).reshape((3,) + (1,) * (clip.ndim - 1))
    return (clip - mean).astype(np.float32)


def render_clip(video, prov: Provenance, cfg: AugmentConfig) -> Clip:
    """Deterministically build the clip described by ``prov`` from the video's frames."""
    idx = clip_indices(video.n_frames, cfg.clip_len, prov.t_start)
    frames = video.frames(idx)
    h, w = frames.shape[1:3]
    top, left, side = crop_box(h, w, prov.scale, prov.position)
    crop = frames[:, top:top + side, left:left + side]
    x = resize_bilinear(crop, cfg.out_size)                  # (L, S, S, 3)
    x = np.ascontiguousarray(x.transpose(3, 0, 1, 2))        # (3, L, S, S)
    if prov.flipped:
        x = hflip(x)
    return Clip(mean_subtract(x, cfg.channel_mean), video.id, prov, video.label)


def draw_provenance(n_frames: int, cfg: AugmentConfig, rng: Rng) -> Provenance:
    """Random temporal start, anchor, scale and flip, drawn in that order."""
    t_start = rng.randbelow(n_frames)
    position = rng.choice(cfg.positions)
    scale = rng.choice(cfg.scales)
    flipped = rng.random() < cfg.flip_prob
    return Provenance(t_start, position, scale, flipped)


def sample_training_clip(video, cfg: AugmentConfig, rng: Rng) -> Clip:
    return render_clip(video, draw_provenance(video.n_frames, cfg, rng), cfg)


def window_starts(n_frames: int, clip_len: int) -> list[int]:
    if n_frames < 1:
        raise DataError("video has no frames")
    return list(range(0, n_frames, clip_len))


def inference_clips(video, cfg: AugmentConfig) -> list[Clip]:
    """Center-cropped scale-1 clips over non-overlapping windows of ``cfg.clip_len`` frames."""
    return [render_clip(video, Provenance(s, "center", 1.0, False), cfg)
            for s in window_starts(video.n_frames, cfg.clip_len)]


# --------------------------------------------------------------------- means

def compute_channel_mean(videos: Sequence, budget: int = 1_000_000) -> tuple[float, float, float]:
    """Per-channel mean pixel value over a deterministic frame subsample.

    Every frame is used while the total pixel count stays within ``budget``;
    otherwise every k-th frame of the concatenated frame list, with k the
    smallest stride that fits the budget.
    """
    refs = [(v, i) for v in videos for i in range(v.n_frames)]
    if not refs:
        raise DataError("no frames to compute a mean from")
    first = refs[0][0].frames([0])
    per_frame = first.shape[1] * first.shape[2]
    stride = max(1, math.ceil(len(refs) * per_frame / budget))
    total = np.zeros(3, np.float64)
    count = 0
    for v, i in refs[::stride]:
        f = v.frames([i])[0]
        total += f.reshape(-1, 3).sum(axis=0, dtype=np.float64)
        count += f.shape[0] * f.shape[1]
    return tuple(float(t / count) for t in total)


def write_mean_file(path, mean) -> None:
    Path(path).write_text("".join(f"{float(m)!r}\n" for m in mean), encoding="utf-8")


def read_mean_file(path) -> tuple[float, float, float]:
    try:
        lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
        values = tuple(float(ln) for ln in lines)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read mean file {path}: {e}") from e
    if len(values) != 3:
        raise DataError(f"mean file {path} must hold three values, got {len(values)}")
    return values
