"""Synthetic moving-blob action clips, darkening, stratified split and clip I/O.

Each class is one motion pattern of a bright Gaussian blob over a static
textured background. Every clip's randomness comes only from
(dataset seed, clip index), so clips can be rendered in any order.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from dlkd.errors import ConfigError, FormatError, ParameterError

MOTIONS = (
    "translate-left",
    "translate-right",
    "translate-up",
    "translate-down",
    "rotate-cw",
    "rotate-ccw",
    "expand",
    "contract",
)

CLIP_MAGIC = b"DLKC"
CLIP_VERSION = 1
MANIFEST_NAME = "manifest.txt"
MANIFEST_TAG = "#dlkd-manifest v1"

# pinned benchmark shared by every acceptance run
BENCH_NAME = "dlkd-bench-v1"
BENCH_CLASSES = 8
BENCH_PER_CLASS = 40
BENCH_DIMS = (3, 8, 32, 32)
BENCH_SEED = 20240917
BENCH_GAMMA_DARK = 2.2
BENCH_SCALE = 0.3
BENCH_NOISE = 0.02
BENCH_SPLIT_SEED = 7
BENCH_TRAIN_FRACTION = 0.8

# rendering constants of the dlkd-bench-v1 family; ranges are (lo, hi) draws,
# lengths are fractions of min(H, W) and amplitudes are in [0, 1] pixel units
RENDER = dict(
    base=(0.42, 0.55), texture=0.12, texture_sigma=1.5, tint=0.04,
    amplitude=(0.35, 0.45), blob=(0.07, 0.10), travel=0.4,
    radius=(0.18, 0.24), sweep=1.2, grow=2.2,
)


@dataclass(frozen=True)
class VideoClip:
    data: np.ndarray
    label: int
    clip_id: str

    @property
    def shape(self):
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, VideoClip):
            return NotImplemented
        return (
            self.label == other.label
            and self.clip_id == other.clip_id
            and self.data.dtype == other.data.dtype
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None


@dataclass
class Dataset:
    clips: list
    class_names: list
    params: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.clips)

    @property
    def labels(self):
        return np.array([c.label for c in self.clips], dtype=np.int64)

    @property
    def ids(self):
        return [c.clip_id for c in self.clips]

    @property
    def num_classes(self):
        return len(self.class_names)

    @property
    def dims(self):
        return self.clips[0].data.shape

    def stacked(self, indices=None):
        clips = self.clips if indices is None else [self.clips[i] for i in indices]
        return np.stack([c.data for c in clips])

    def subset(self, indices):
        return Dataset([self.clips[i] for i in indices], list(self.class_names), dict(self.params))


@dataclass(frozen=True)
class DarkenParams:
    gamma_dark: float = BENCH_GAMMA_DARK
    scale: float = BENCH_SCALE
    sigma: float = BENCH_NOISE
    seed: int = 0

    def __post_init__(self):
        if not self.gamma_dark >= 1:
            raise ParameterError(f"gamma_dark must be >= 1, got {self.gamma_dark}")
        if not 0 < self.scale <= 1:
            raise ParameterError(f"scale must lie in (0, 1], got {self.scale}")
        if not self.sigma >= 0:
            raise ParameterError(f"noise sigma must be >= 0, got {self.sigma}")


# ---------------------------------------------------------------------------
# rendering


def _blob_track(motion, rng, t, h, w):
    """Per-frame (row, col, sigma) of the blob for one clip."""
    u = np.linspace(0.0, 1.0, t)
    size = min(h, w)
    sigma = rng.uniform(*RENDER["blob"]) * size
    travel = RENDER["travel"] * size
    margin = 2 * sigma
    rows = np.full(t, rng.uniform(margin, h - margin))
    cols = np.full(t, rng.uniform(margin, w - margin))
    sigmas = np.full(t, sigma)
    if motion.startswith("translate"):
        travel = min(travel, size - 2 * margin)
        start = rng.uniform(margin, size - margin - travel)
        path = start + travel * u
        if motion == "translate-right":
            cols = path * (w / size)
        elif motion == "translate-left":
            cols = (size - path) * (w / size)
        elif motion == "translate-down":
            rows = path * (h / size)
        else:
            rows = (size - path) * (h / size)
    elif motion.startswith("rotate"):
        radius = rng.uniform(*RENDER["radius"]) * size
        centre_r = rng.uniform(margin + radius, h - margin - radius)
        centre_c = rng.uniform(margin + radius, w - margin - radius)
        theta0 = rng.uniform(0, 2 * np.pi)
        # image rows grow downward, so increasing angle turns clockwise on screen
        direction = 1.0 if motion == "rotate-cw" else -1.0
        theta = theta0 + direction * RENDER["sweep"] * np.pi * u
        rows = centre_r + radius * np.sin(theta)
        cols = centre_c + radius * np.cos(theta)
    else:
        lo, hi = sigma, RENDER["grow"] * sigma
        sigmas = lo + (hi - lo) * (u if motion == "expand" else 1 - u)
        margin = 2 * hi
        rows = np.full(t, rng.uniform(min(margin, h / 2), max(h - margin, h / 2)))
        cols = np.full(t, rng.uniform(min(margin, w / 2), max(w - margin, w / 2)))
    return rows, cols, sigmas


def render_clip(label, dims, seed, index):
    """Bright-domain clip for one class; deterministic in (seed, index)."""
    c, t, h, w = dims
    rng = np.random.default_rng([seed, index])
    base = rng.uniform(*RENDER["base"])
    texture = gaussian_filter(rng.standard_normal((c, h, w)), sigma=(0, RENDER["texture_sigma"], RENDER["texture_sigma"]))
    texture -= texture.mean()
    texture /= max(np.abs(texture).max(), 1e-12)
    tint = rng.uniform(-RENDER["tint"], RENDER["tint"], size=(c, 1, 1))
    tint -= tint.mean()  # zero-mean texture and tint keep the clip mean at or above `base`
    background = base + tint + RENDER["texture"] * texture
    amplitude = rng.uniform(*RENDER["amplitude"])
    rows, cols, sigmas = _blob_track(MOTIONS[label], rng, t, h, w)
    yy, xx = np.mgrid[0:h, 0:w]
    frames = np.empty((c, t, h, w))
    for i in range(t):
        blob = np.exp(-((yy - rows[i]) ** 2 + (xx - cols[i]) ** 2) / (2 * sigmas[i] ** 2))
        frames[:, i] = background + amplitude * blob
    return np.clip(frames, 0.0, 1.0).astype(np.float32)


def generate_dataset(num_classes, clips_per_class, dims, seed):
    dims = tuple(int(d) for d in dims)
    if not 2 <= num_classes <= len(MOTIONS):
        raise ConfigError(f"num_classes must be in [2, {len(MOTIONS)}], got {num_classes}")
    if clips_per_class < 1:
        raise ConfigError(f"clips_per_class must be >= 1, got {clips_per_class}")
    if len(dims) != 4 or any(d < m for d, m in zip(dims, (1, 4, 8, 8))):
        raise ConfigError(f"dims must be at least (1, 4, 8, 8), got {dims}")
    clips = []
    for label in range(num_classes):
        for j in range(clips_per_class):
            index = label * clips_per_class + j
            clips.append(VideoClip(render_clip(label, dims, seed, index), label, f"c{index:05d}"))
    params = {
        "classes": num_classes,
        "per_class": clips_per_class,
        "dims": "x".join(str(d) for d in dims),
        "seed": seed,
    }
    return Dataset(clips, list(MOTIONS[:num_classes]), params)


def _id_hash(clip_id):
    return int.from_bytes(hashlib.blake2b(clip_id.encode(), digest_size=8).digest(), "little")


def darken(clip, params):
    """``clip01(scale * x**gamma_dark + noise)``; noise seeded by (seed xor hash(clip id))."""
    x = clip.data.astype(np.float64)
    out = params.scale * np.power(x, params.gamma_dark)
    if params.sigma > 0:
        rng = np.random.default_rng(params.seed ^ _id_hash(clip.clip_id))
        out = out + rng.normal(0.0, params.sigma, size=x.shape)
    return replace(clip, data=np.clip(out, 0.0, 1.0).astype(np.float32))


def darken_dataset(dataset, params):
    record = dict(dataset.params)
    record.update(gamma_dark=params.gamma_dark, scale=params.scale, noise=params.sigma, noise_seed=params.seed)
    return Dataset([darken(c, params) for c in dataset.clips], list(dataset.class_names), record)


def bench_dataset():
    """The pinned dlkd-bench-v1 dark dataset (not yet split)."""
    bright = generate_dataset(BENCH_CLASSES, BENCH_PER_CLASS, BENCH_DIMS, BENCH_SEED)
    dark = darken_dataset(bright, DarkenParams(BENCH_GAMMA_DARK, BENCH_SCALE, BENCH_NOISE, BENCH_SEED))
    dark.params["name"] = BENCH_NAME
    return dark


def split(dataset, train_fraction, seed):
    """Stratified seeded split; per-class train count is round(fraction * class count)."""
    if not 0 < train_fraction < 1:
        raise ConfigError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    labels = dataset.labels
    train_idx = []
    for label in range(dataset.num_classes):
        members = np.flatnonzero(labels == label)
        if len(members) < 2:
            raise ConfigError(f"class {label} has {len(members)} clip(s); at least 2 are needed to split")
        order = np.random.default_rng([seed, label]).permutation(members)
        n_train = int(np.floor(train_fraction * len(members) + 0.5))
        train_idx.extend(order[:n_train].tolist())
    chosen = set(train_idx)
    train = sorted(chosen)
    test = [i for i in range(len(dataset)) if i not in chosen]
    return dataset.subset(train), dataset.subset(test)


# ---------------------------------------------------------------------------
# clip files:
#   "DLKC" | u16 version | u16 label | u32 C,T,H,W | u16 id length | id | f32 LE values

_CLIP_HEADER = struct.Struct("<4sHH4IH")


def clip_header_size(clip_id):
    return _CLIP_HEADER.size + len(clip_id.encode())


def clip_to_bytes(clip):
    encoded = clip.clip_id.encode()
    header = _CLIP_HEADER.pack(CLIP_MAGIC, CLIP_VERSION, clip.label, *clip.data.shape, len(encoded))
    return header + encoded + np.ascontiguousarray(clip.data, dtype="<f4").tobytes()


def clip_from_bytes(buf):
    if len(buf) < 4 or buf[:4] != CLIP_MAGIC:
        raise FormatError("bad clip magic", offset=0)
    if len(buf) < _CLIP_HEADER.size:
        raise FormatError("truncated clip header", offset=len(buf))
    _, version, label, c, t, h, w, id_len = _CLIP_HEADER.unpack_from(buf)
    if version != CLIP_VERSION:
        raise FormatError(f"unsupported clip version {version}", offset=4)
    pos = _CLIP_HEADER.size
    if len(buf) < pos + id_len:
        raise FormatError("truncated clip id", offset=len(buf))
    clip_id = buf[pos : pos + id_len].decode()
    pos += id_len
    n_bytes = 4 * c * t * h * w
    if len(buf) < pos + n_bytes:
        raise FormatError(f"truncated clip data: expected {n_bytes} bytes", offset=len(buf))
    if len(buf) > pos + n_bytes:
        raise FormatError("trailing bytes after clip data", offset=pos + n_bytes)
    data = np.frombuffer(buf, dtype="<f4", count=c * t * h * w, offset=pos).reshape(c, t, h, w)
    return VideoClip(data.astype(np.float32), int(label), clip_id)


def write_clip(clip, path):
    with open(path, "wb") as fh:
        fh.write(clip_to_bytes(clip))


def read_clip(path):
    with open(path, "rb") as fh:
        return clip_from_bytes(fh.read())


# ---------------------------------------------------------------------------
# dataset directories: manifest.txt + clips/<id>.dlkc


def save_dataset(dataset, directory):
    directory = Path(directory)
    (directory / "clips").mkdir(parents=True, exist_ok=True)
    header = dict(dataset.params)
    header["class_names"] = ",".join(dataset.class_names)
    lines = [MANIFEST_TAG + " " + " ".join(f"{k}={v}" for k, v in header.items())]
    for clip in dataset.clips:
        rel = f"clips/{clip.clip_id}.dlkc"
        write_clip(clip, directory / rel)
        lines.append(f"{clip.clip_id}\t{rel}\t{clip.label}")
    (directory / MANIFEST_NAME).write_text("\n".join(lines) + "\n")


def _parse_value(text):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def load_dataset(directory):
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.is_file():
        raise FormatError(f"no {MANIFEST_NAME} in {directory}")
    lines = manifest.read_text().splitlines()
    if not lines or not lines[0].startswith(MANIFEST_TAG):
        raise FormatError(f"{manifest} does not start with '{MANIFEST_TAG}'", offset=0)
    params = {}
    for token in lines[0][len(MANIFEST_TAG):].split():
        key, _, value = token.partition("=")
        params[key] = _parse_value(value)
    class_names = str(params.pop("class_names")).split(",")
    clips = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise FormatError(f"{manifest}:{lineno}: expected 3 tab-separated fields")
        clip_id, rel, label = fields
        clip = read_clip(directory / rel)
        if clip.clip_id != clip_id or clip.label != int(label):
            raise FormatError(f"{manifest}:{lineno}: record does not match {rel}")
        clips.append(clip)
    return Dataset(clips, class_names, params)


