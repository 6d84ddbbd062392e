"""Synthetic temporal-order videos, the STV1 clip container, frame sampling and augmentation.

Frames are kept as ``uint8`` arrays shaped [F, 3, H, W] until they are
handed to the model; :func:`to_float` maps bytes to [-1, 1].
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from stsep.errors import ConfigError, FormatError

TASK_CLASSES = {"direction4": 4, "playback2": 2, "shape_static": 3}
# horizontal flips would swap left/right motion, so only the static task uses them
TASK_FLIP_P = {"direction4": 0.0, "playback2": 0.0, "shape_static": 0.5}


@dataclass
class VideoRecord:
    id: int
    frames: np.ndarray  # uint8 [F, 3, H, W]
    label: int
    source: str = ""

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[0] < 1 or self.frames.shape[1] != 3:
            raise ConfigError(f"frames must be [F>=1, 3, H, W], got {self.frames.shape}")

    @property
    def length(self) -> int:
        return self.frames.shape[0]


@dataclass
class SyntheticTask:
    kind: str = "playback2"
    resolution: int = 32
    T: int = 8
    noise: float = 0.05
    seed: int = 0
    # frames per generated video; defaults to T
    length: int | None = None

    def __post_init__(self):
        if self.kind not in TASK_CLASSES:
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.resolution < 8:
            raise ConfigError(f"resolution must be >= 8, got {self.resolution}")
        if self.T < 1 or (self.length is not None and self.length < 1):
            raise ConfigError("T and length must be positive")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")

    @property
    def num_classes(self) -> int:
        return TASK_CLASSES[self.kind]

    @property
    def frames(self) -> int:
        return self.length or self.T


# generators -----------------------------------------------------------------

def _quantize(x: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    if noise:
        x = x + rng.normal(0.0, noise, size=x.shape)
    return np.clip(np.rint(np.clip(x, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)


def _canvas(n: int, res: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    bg = rng.uniform(0.0, 0.3, size=3)
    fg = rng.uniform(0.6, 1.0, size=3)
    return np.broadcast_to(bg[None, :, None, None], (n, 3, res, res)).copy(), fg


def bar_position(c: int, v: int, t: int, res: int) -> int:
    """Leading coordinate of the direction4 bar at frame t (clamped to the frame)."""
    return int(min(max(c + v * t, 0), res - 1))


def _direction4(label: int, task: SyntheticTask, rng) -> np.ndarray:
    res, n = task.resolution, task.frames
    frames, fg = _canvas(n, res, rng)
    v = int(rng.integers(1, 4))
    width = max(1, res // 16)
    travel = v * (n - 1)
    lo, hi = 0, max(0, res - width - travel)
    c = int(rng.integers(lo, hi + 1))
    sign = 1 if label in (1, 3) else -1  # 0 left, 1 right, 2 up, 3 down
    start = c if sign > 0 else res - width - c
    for t in range(n):
        p = bar_position(start, sign * v, t, res)
        p0, p1 = max(0, min(p, res - width)), max(0, min(p, res - width)) + width
        if label < 2:
            frames[t, :, :, p0:p1] = fg[:, None, None]
        else:
            frames[t, :, p0:p1, :] = fg[:, None, None]
    return frames


def _blob(frames, t, cy, cx, size, fg, shape="square"):
    res = frames.shape[-1]
    yy, xx = np.mgrid[0:res, 0:res]
    dy, dx = yy - cy, xx - cx
    if shape == "square":
        mask = (np.abs(dy) <= size) & (np.abs(dx) <= size)
    elif shape == "disk":
        mask = dy * dy + dx * dx <= size * size
    else:  # triangle pointing up
        mask = (dy <= size) & (dy >= -size) & (np.abs(dx) <= (dy + size) / 2)
    frames[t][:, mask] = fg[:, None]


def _playback_sequence(task: SyntheticTask, rng) -> np.ndarray:
    """An object drifting rightward with wobble; the reverse clip moves leftward."""
    res, n = task.resolution, task.frames
    frames, fg = _canvas(n, res, rng)
    size = max(1, res // 10)
    v = rng.uniform(1.0, 2.5)
    x0 = rng.uniform(size, max(size, res - size - 1 - v * (n - 1)))
    y0 = rng.uniform(size, res - size - 1)
    for t in range(n):
        cy = np.clip(y0 + rng.normal(0, 0.5), size, res - size - 1)
        cx = min(x0 + v * t, res - size - 1)
        _blob(frames, t, cy, cx, size, fg)
    return frames


def _shape_static(label: int, task: SyntheticTask, rng) -> np.ndarray:
    res, n = task.resolution, task.frames
    frames, fg = _canvas(n, res, rng)
    size = max(2, res // 6)
    cy, cx = rng.uniform(size, res - size - 1, size=2)
    for t in range(n):
        _blob(frames, t, cy, cx, size, fg, ("square", "disk", "triangle")[label])
    return frames


def generate(task: SyntheticTask, count: int) -> list[VideoRecord]:
    """Deterministic, class-balanced synthetic videos.

    playback2 is emitted in pairs: one sequence forward (label 0) followed
    by the same frames reversed (label 1), so both classes share every
    frame.
    """
    if count < 1:
        raise ConfigError("count must be >= 1")
    rng = np.random.default_rng([task.seed, 7919])
    k = task.num_classes
    out: list[VideoRecord] = []
    src = f"{task.kind}:seed={task.seed}"
    i = 0
    while len(out) < count:
        if task.kind == "playback2":
            seq = _quantize(_playback_sequence(task, rng), task.noise, rng)
            out.append(VideoRecord(len(out), seq, 0, src))
            if len(out) < count:
                out.append(VideoRecord(len(out), seq[::-1].copy(), 1, src))
        else:
            label = i % k
            gen = _direction4 if task.kind == "direction4" else _shape_static
            out.append(VideoRecord(len(out), _quantize(gen(label, task, rng), task.noise, rng), label, src))
        i += 1
    return out


def frame_hashes(frames: np.ndarray) -> list[str]:
    return [hashlib.sha1(f.tobytes()).hexdigest() for f in frames]


# sampling -------------------------------------------------------------------

@dataclass(frozen=True)
class SamplerSpec:
    kind: str = "tsn"
    T: int = 8
    stride: int = 2
    mode: str = "train"

    def __post_init__(self):
        if self.kind not in ("dense", "tsn"):
            raise ConfigError(f"sampler kind must be 'dense' or 'tsn', got {self.kind!r}")
        if self.mode not in ("train", "eval"):
            raise ConfigError(f"sampler mode must be 'train' or 'eval', got {self.mode!r}")
        if self.T < 1 or self.stride < 1:
            raise ConfigError("T and stride must be >= 1")


def tsn_segment_index(seg: int, length: int, T: int, frac: float = 0.5) -> int:
    """Frame at fraction ``frac`` through segment ``seg``; frac=0.5 is floor(seg*L/T + L/(2T))."""
    return min(int(np.floor(seg * length / T + frac * length / T)), length - 1)


def sample_indices(length: int, spec: SamplerSpec, rng: np.random.Generator | None = None,
                   position: float | None = None) -> np.ndarray:
    """Frame indices for one clip.

    ``position`` in [0, 1) fixes the clip placement (used for multi-clip
    testing): the start fraction of the valid range for dense sampling,
    the within-segment fraction for TSN. Without it, training draws at
    random and evaluation takes the center.
    """
    if length < 1:
        raise ConfigError("video has no frames")
    T = spec.T
    if spec.kind == "tsn":
        if position is None and spec.mode == "train":
            rng = rng if rng is not None else np.random.default_rng()
            lo = np.floor(np.arange(T) * length / T).astype(int)
            hi = np.maximum(lo + 1, np.floor((np.arange(T) + 1) * length / T).astype(int))
            idx = np.array([rng.integers(a, b) for a, b in zip(lo, hi)])
        else:
            frac = 0.5 if position is None else position
            idx = np.array([tsn_segment_index(s, length, T, frac) for s in range(T)])
    else:
        span = max(0, length - 1 - (T - 1) * spec.stride)
        if position is not None:
            start = int(np.floor(position * (span + 1)))
        elif spec.mode == "train":
            rng = rng if rng is not None else np.random.default_rng()
            start = int(rng.integers(0, span + 1))
        else:
            start = span // 2
        idx = start + spec.stride * np.arange(T)
    return np.minimum(idx, length - 1)


def sample_clip(video: VideoRecord, spec: SamplerSpec, rng=None, position=None) -> np.ndarray:
    return video.frames[sample_indices(video.length, spec, rng, position)]


# augmentation ---------------------------------------------------------------

def hflip(clip: np.ndarray) -> np.ndarray:
    return clip[..., ::-1].copy()


def resize_shorter(clip: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of every frame so the shorter side equals ``size``."""
    t, c, h, w = clip.shape
    if min(h, w) == size:
        return clip
    if h <= w:
        nh, nw = size, max(1, int(round(w * size / h)))
    else:
        nh, nw = max(1, int(round(h * size / w))), size
    out = np.empty((t, c, nh, nw), dtype=np.uint8)
    for i in range(t):
        img = Image.fromarray(np.ascontiguousarray(clip[i].transpose(1, 2, 0)))
        out[i] = np.asarray(img.resize((nw, nh), Image.BILINEAR)).transpose(2, 0, 1)
    return out


def crop_offset(h: int, w: int, size: int, mode: str, rng=None) -> tuple[int, int]:
    if mode == "train":
        rng = rng if rng is not None else np.random.default_rng()
        return int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1))
    return (h - size) // 2, (w - size) // 2


def augment(clip: np.ndarray, mode: str, rng=None, size: int | None = None, scale: float = 1.2,
            flip_p: float = 0.5) -> np.ndarray:
    """Resize the shorter side to scale*size, crop size x size, maybe flip.

    Train mode draws one crop offset and one flip decision for the whole
    clip; eval mode center-crops and never flips.
    """
    size = size or min(clip.shape[-2:])
    clip = resize_shorter(clip, int(round(size * scale)))
    y, x = crop_offset(clip.shape[-2], clip.shape[-1], size, mode, rng)
    clip = clip[:, :, y:y + size, x:x + size]
    if mode == "train" and flip_p > 0 and rng.random() < flip_p:
        clip = hflip(clip)
    return np.ascontiguousarray(clip)


def to_float(clip: np.ndarray) -> np.ndarray:
    """uint8 -> float32 in [0, 1], then normalized with mean 0.5 and std 0.5."""
    return ((clip.astype(np.float32) / np.float32(255.0)) - np.float32(0.5)) / np.float32(0.5)


@dataclass
class ClipLoader:
    """Turns records into model-ready batches [T, N, 3, S, S]."""

    sampler: SamplerSpec
    size: int
    flip_p: float = 0.0
    augment: bool = True
    scale: float = 1.2

    def clip(self, video: VideoRecord, rng=None, position=None) -> np.ndarray:
        clip = sample_clip(video, self.sampler, rng, position)
        if self.augment:
            clip = augment(clip, self.sampler.mode, rng, self.size, self.scale, self.flip_p)
        elif clip.shape[-1] != self.size or clip.shape[-2] != self.size:
            clip = augment(clip, "eval", None, self.size, 1.0)
        return to_float(clip)

    def batch(self, videos, rng=None, position=None) -> np.ndarray:
        return np.stack([self.clip(v, rng, position) for v in videos], axis=1)


# STV1 container -------------------------------------------------------------

MAGIC = b"STV1"
_HEAD = struct.Struct("<4sI")
_REC = struct.Struct("<IHHH")


def write_container(path, records) -> None:
    records = list(records)
    chunks = [_HEAD.pack(MAGIC, len(records))]
    for rec in records:
        f, c, h, w = rec.frames.shape
        if max(h, w, f) > 0xFFFF or rec.label > 0xFFFFFFFF:
            raise FormatError(f"record {rec.id} does not fit the container limits")
        chunks.append(_REC.pack(rec.label, h, w, f))
        chunks.append(np.ascontiguousarray(rec.frames, dtype=np.uint8).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def parse_container(buf: bytes, source: str = "") -> list[VideoRecord]:
    if len(buf) < _HEAD.size:
        raise FormatError("file too short for STV1 header", 0)
    magic, count = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    off = _HEAD.size
    out = []
    for i in range(count):
        if off + _REC.size > len(buf):
            raise FormatError(f"truncated header of record {i}", off)
        label, h, w, f = _REC.unpack_from(buf, off)
        if h == 0 or w == 0 or f == 0:
            raise FormatError(f"record {i} has a zero dimension", off)
        off += _REC.size
        n = f * 3 * h * w
        if off + n > len(buf):
            raise FormatError(f"truncated frames of record {i}: need {n} bytes", off)
        frames = np.frombuffer(buf, dtype=np.uint8, count=n, offset=off).reshape(f, 3, h, w).copy()
        off += n
        out.append(VideoRecord(i, frames, label, source))
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes", off)
    return out


def read_container(path) -> list[VideoRecord]:
    path = Path(path)
    return parse_container(path.read_bytes(), str(path))
