"""Grayscale video containers, block datasets and synthetic clips.

GSV layout (all integers little-endian)::

    b"GSV1" | u32 width | u32 height | u32 frames | width*height*frames luma bytes

Frames are stored frame-major, rows top to bottom.
"""

import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, FormatError
from .mh import SearchWindow, hypothesis_indices
from .network import frame_to_blocks

GSV_MAGIC = b"GSV1"
_GSV_HEADER = struct.Struct("<4sIII")


@dataclass(eq=False)
class RawVideo:
    frames: np.ndarray  # (T, H, W) uint8

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.uint8)
        if self.frames.ndim != 3:
            raise ConfigError(f"video must be (frames, height, width), got {self.frames.shape}")

    @property
    def frame_count(self):
        return self.frames.shape[0]

    @property
    def height(self):
        return self.frames.shape[1]

    @property
    def width(self):
        return self.frames.shape[2]

    def as_float(self):
        return self.frames.astype(np.float64) / 255.0

    def __eq__(self, other):
        return isinstance(other, RawVideo) and np.array_equal(self.frames, other.frames)


def to_bytes(video):
    t, h, w = video.frames.shape
    return _GSV_HEADER.pack(GSV_MAGIC, w, h, t) + video.frames.tobytes()


def from_bytes(data):
    if len(data) < _GSV_HEADER.size:
        raise FormatError(f"truncated header: expected {_GSV_HEADER.size} bytes, "
                          f"got {len(data)}", offset=len(data))
    magic, w, h, t = _GSV_HEADER.unpack_from(data)
    if magic != GSV_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {GSV_MAGIC!r}", offset=0)
    expected = w * h * t
    actual = len(data) - _GSV_HEADER.size
    if actual != expected:
        raise FormatError(f"payload is {actual} bytes, expected {expected} "
                          f"for {t} frames of {w}x{h}",
                          offset=_GSV_HEADER.size + min(actual, expected))
    frames = np.frombuffer(data, dtype=np.uint8, offset=_GSV_HEADER.size).reshape(t, h, w)
    return RawVideo(frames.copy())


def read_gsv(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def write_gsv(path, video):
    with open(path, "wb") as fh:
        fh.write(to_bytes(video))


def read_png_sequence(directory):
    """Load ``frame_%06d.png`` files (8-bit grayscale) in index order."""
    from PIL import Image

    names = sorted(n for n in os.listdir(directory)
                   if n.startswith("frame_") and n.endswith(".png"))
    if not names:
        raise ConfigError(f"no frame_%06d.png files in {directory}")
    frames = []
    for name in names:
        with Image.open(os.path.join(directory, name)) as im:
            frames.append(np.asarray(im.convert("L"), dtype=np.uint8))
    return RawVideo(np.stack(frames))


# -- datasets ----------------------------------------------------------------

def center_crop(frames, size):
    """Crop (T, H, W) to the central size x size patch."""
    _, h, w = frames.shape
    if h < size or w < size:
        raise ConfigError(f"video {w}x{h} is smaller than the {size}x{size} crop")
    top, left = (h - size) // 2, (w - size) // 2
    return frames[:, top:top + size, left:left + size]


@dataclass(eq=False)
class BlockDataset:
    """Blocks of frame t with the search-window neighbourhood of frame t-1.

    ``patches[i]`` is a (P, P) region of the previous frame (P = B + 2R)
    positioned so that clamped candidate positions inside the patch coincide
    with those in the full frame; ``rel_pos[i]`` is the block origin inside
    the patch. Rows with ``has_ref`` False (first frames) carry zero patches.
    """

    x: np.ndarray
    patches: np.ndarray
    rel_pos: np.ndarray
    has_ref: np.ndarray
    window: SearchWindow
    block_size: int = 16
    meta: list = field(default_factory=list)

    def __len__(self):
        return self.x.shape[0]

    def subset(self, idx):
        idx = np.asarray(idx)
        idx = np.flatnonzero(idx) if idx.dtype == bool else idx.astype(np.intp)
        return BlockDataset(self.x[idx], self.patches[idx], self.rel_pos[idx],
                            self.has_ref[idx], self.window, self.block_size,
                            [self.meta[i] for i in idx] if self.meta else [])

    def hypotheses(self, idx):
        """(len(idx), N, K) hypothesis matrices; zeros where there is no reference."""
        idx = np.asarray(idx)
        p = self.patches.shape[1]
        out = np.zeros((len(idx), self.block_size ** 2, self.window.k))
        for j, i in enumerate(idx):
            if self.has_ref[i]:
                hi = hypothesis_indices((p, p), tuple(self.rel_pos[i]), self.window,
                                        self.block_size)
                out[j] = self.patches[i].ravel()[hi]
        return out


def concat_datasets(parts):
    parts = [p for p in parts if len(p)]
    if not parts:
        raise ConfigError("no blocks to concatenate")
    first = parts[0]
    return BlockDataset(
        np.concatenate([p.x for p in parts]),
        np.concatenate([p.patches for p in parts]),
        np.concatenate([p.rel_pos for p in parts]),
        np.concatenate([p.has_ref for p in parts]),
        first.window, first.block_size,
        [m for p in parts for m in p.meta])


def _patch_origin(pos, frame_len, patch_len, radius):
    return min(max(pos - radius, 0), frame_len - patch_len)


def build_dataset(video, window=SearchWindow(), block_size=16, crop=160, video_id=0):
    """Crop, scale to [0, 1], split into blocks and pair each block of frame
    t >= 1 with its reference neighbourhood in frame t-1."""
    frames = video.frames if isinstance(video, RawVideo) else np.asarray(video)
    if frames.shape[0] < 2:
        raise ConfigError("need at least two frames to build reference pairs")
    if crop:
        frames = center_crop(frames, crop)
    t, h, w = frames.shape
    b = block_size
    if h % b or w % b:
        raise ConfigError(f"frame {w}x{h} is not tiled by {b}x{b} blocks")
    p = b + 2 * window.radius
    if h < p or w < p:
        raise ConfigError(f"frame {w}x{h} is smaller than the {p}x{p} search neighbourhood")
    data = frames.astype(np.float64) / 255.0
    origins = [(r, c) for r in range(0, h, b) for c in range(0, w, b)]
    n_blocks = t * len(origins)
    x = np.empty((n_blocks, b * b))
    patches = np.zeros((n_blocks, p, p))
    rel = np.zeros((n_blocks, 2), dtype=np.int64)
    has_ref = np.zeros(n_blocks, dtype=bool)
    meta = []
    i = 0
    for f in range(t):
        x[i:i + len(origins)] = frame_to_blocks(data[f], b)
        for r, c in origins:
            if f > 0:
                pr = _patch_origin(r, h, p, window.radius)
                pc = _patch_origin(c, w, p, window.radius)
                patches[i] = data[f - 1, pr:pr + p, pc:pc + p]
                rel[i] = (r - pr, c - pc)
                has_ref[i] = True
            meta.append((video_id, f, r, c))
            i += 1
    return BlockDataset(x, patches, rel, has_ref, window, b, meta)


def split_videos(videos, val_fraction=0.2, seed=0):
    """Random split by whole video; returns (train, val) index lists."""
    if not 0 <= val_fraction < 1:
        raise ConfigError("val_fraction must be in [0, 1)")
    order = np.random.Generator(np.random.PCG64(seed)).permutation(len(videos))
    n_val = int(round(val_fraction * len(videos)))
    return sorted(order[n_val:].tolist()), sorted(order[:n_val].tolist())


# -- synthetic clips ---------------------------------------------------------

SYNTHETIC_KINDS = ("translate", "bounce", "static")


def _texture(rng, h, w):
    img = np.zeros((h, w))
    for sigma, amp in ((1.0, 0.25), (2.5, 0.5), (6.0, 1.0)):
        layer = gaussian_filter(rng.standard_normal((h, w)), sigma, mode="wrap")
        img += amp * layer / layer.std()
    img = (img - img.mean()) / (3.0 * img.std())
    return np.clip(np.round(127.5 + 100.0 * img), 0, 255).astype(np.uint8)


def make_synthetic(kind, width=160, height=160, frames=8, velocity=(2, 0), seed=0,
                   max_speed=8):
    """Seeded synthetic clip.

    ``velocity`` is (dx, dy) pixels per frame. ``translate`` moves a textured
    background so that frame[t][r, c] == frame[t-1][r - dy, c - dx];
    ``bounce`` moves a textured square over a fixed background, reflecting
    at the borders; ``static`` repeats one frame.
    """
    if kind not in SYNTHETIC_KINDS:
        raise ConfigError(f"unknown synthetic kind {kind!r}; choose from {SYNTHETIC_KINDS}")
    if frames < 1 or width < 1 or height < 1:
        raise ConfigError("width, height and frames must be positive")
    dx, dy = (int(v) for v in velocity)
    rng = np.random.Generator(np.random.PCG64(seed))
    if kind == "static":
        frame = _texture(rng, height, width)
        return RawVideo(np.repeat(frame[None], frames, axis=0))
    if kind == "translate":
        if max(abs(dx), abs(dy)) > max_speed:
            raise ConfigError(f"velocity {velocity} exceeds the search radius {max_speed}")
        span_y, span_x = abs(dy) * (frames - 1), abs(dx) * (frames - 1)
        canvas = _texture(rng, height + span_y, width + span_x)
        oy0 = span_y if dy > 0 else 0
        ox0 = span_x if dx > 0 else 0
        out = np.empty((frames, height, width), dtype=np.uint8)
        for t in range(frames):
            oy, ox = oy0 - t * dy, ox0 - t * dx
            out[t] = canvas[oy:oy + height, ox:ox + width]
        return RawVideo(out)
    background = _texture(rng, height, width)
    size = max(4, min(height, width) // 4)
    sprite = _texture(rng, size, size)
    y, x = rng.integers(0, height - size + 1), rng.integers(0, width - size + 1)
    out = np.empty((frames, height, width), dtype=np.uint8)
    for t in range(frames):
        frame = background.copy()
        frame[y:y + size, x:x + size] = sprite
        out[t] = frame
        x, dx = _reflect(x + dx, dx, width - size)
        y, dy = _reflect(y + dy, dy, height - size)
    return RawVideo(out)


def _reflect(pos, vel, hi):
    if pos < 0:
        return min(-pos, hi), -vel
    if pos > hi:
        return max(2 * hi - pos, 0), -vel
    return pos, vel
