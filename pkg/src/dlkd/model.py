"""(2+1)D video classifier shared by the teacher and the student.

Each block is a 1 x k x k spatial convolution with spatial stride 2, ReLU, a
kt x 1 x 1 temporal convolution, ReLU. Blocks are followed by global average
pooling over (T, H, W) and an affine class head.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from dlkd.errors import ConfigError, FormatError, ShapeError
from dlkd.tensor import Tensor, affine, avg_pool_global, conv3d, relu

CHECKPOINT_MAGIC = b"DLKD"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 8
    input_shape: tuple = (3, 8, 32, 32)
    widths: tuple = (8, 16)
    spatial_kernel: int = 3
    temporal_kernel: int = 3
    seed: int = 0
    input_mean: float = 0.0
    input_std: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.input_shape) != 4 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be four positive extents, got {self.input_shape}")
        if not self.widths or min(self.widths) < 1:
            raise ConfigError(f"block widths must be >= 1, got {self.widths}")
        for name in ("spatial_kernel", "temporal_kernel"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"{name} must be a positive odd integer, got {k}")
        if not (np.isfinite(self.input_mean) and self.input_std > 0):
            raise ConfigError(f"input normalization needs a finite mean and std > 0, got {self.input_mean}, {self.input_std}")
        _, t, h, w = self.input_shape
        if self.temporal_kernel > t:
            raise ConfigError(f"temporal kernel {self.temporal_kernel} exceeds clip length {t}")
        for i, (bh, bw) in enumerate(self.block_input_extents()):
            if self.spatial_kernel > min(bh, bw):
                raise ConfigError(
                    f"spatial kernel {self.spatial_kernel} exceeds block {i} input extent {bh}x{bw}"
                )

    def block_input_extents(self):
        _, _, h, w = self.input_shape
        extents = []
        for _ in self.widths:
            extents.append((h, w))
            h, w = _strided(h, self.spatial_kernel), _strided(w, self.spatial_kernel)
        return extents

    def parameter_shapes(self):
        shapes = {}
        c_in = self.input_shape[0]
        k, kt = self.spatial_kernel, self.temporal_kernel
        for i, c_out in enumerate(self.widths):
            shapes[f"block{i}.spatial.weight"] = (c_out, c_in, 1, k, k)
            shapes[f"block{i}.spatial.bias"] = (c_out,)
            shapes[f"block{i}.temporal.weight"] = (c_out, c_out, kt, 1, 1)
            shapes[f"block{i}.temporal.bias"] = (c_out,)
            c_in = c_out
        shapes["head.weight"] = (self.num_classes, c_in)
        shapes["head.bias"] = (self.num_classes,)
        return shapes


def _strided(extent, kernel):
    return (extent + 2 * (kernel // 2) - kernel) // 2 + 1


@dataclass
class Model:
    config: ModelConfig
    params: dict = field(default_factory=dict)

    def parameters(self):
        return list(self.params.values())

    def num_parameters(self):
        return sum(p.size for p in self.params.values())

    def digest(self):
        return hashlib.sha256(checkpoint_bytes(self)).hexdigest()


def build_classifier(config, dtype=None):
    """Seeded fan-in uniform init (+-sqrt(3/fan_in)); biases start at zero."""
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in config.parameter_shapes().items():
        if name.endswith("bias"):
            values = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(3.0 / fan_in)
            values = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(values, requires_grad=True, dtype=dtype)
    return Model(config, params)


def r2plus1d_block(x, params, spatial_stride=2):
    """One factorized block; ``params`` = (spatial_w, spatial_b, temporal_w, temporal_b)."""
    spatial_w, spatial_b, temporal_w, temporal_b = params
    kh, kw = spatial_w.shape[3], spatial_w.shape[4]
    kt = temporal_w.shape[2]
    if spatial_w.shape[2] != 1 or temporal_w.shape[3:] != (1, 1):
        raise ShapeError(
            f"expected 1xkxk spatial and kx1x1 temporal kernels, got {spatial_w.shape} and {temporal_w.shape}"
        )
    h = conv3d(
        x, spatial_w, spatial_b,
        stride=(1, spatial_stride, spatial_stride),
        padding=(0, kh // 2, kw // 2),
    )
    h = relu(h)
    h = conv3d(h, temporal_w, temporal_b, stride=1, padding=(kt // 2, 0, 0))
    return relu(h)


def _clip_values(clip):
    if isinstance(clip, Tensor):
        return clip
    data = clip.data if hasattr(clip, "label") else clip
    return Tensor(np.asarray(data))


def forward(model, clip):
    """Logits [K] for one clip, or [N,K] for a stacked batch [N,C,T,H,W]."""
    x = _clip_values(clip)
    expected = model.config.input_shape
    if x.shape[-4:] != expected or x.ndim not in (4, 5):
        raise ShapeError(f"clip shape mismatch: expected {expected} (optionally batched), got {x.shape}")
    dtype = model.params["head.weight"].dtype
    if x.dtype != dtype:
        x = Tensor(x.data.astype(dtype))
    if model.config.input_mean != 0.0 or model.config.input_std != 1.0:
        x = (x - model.config.input_mean) * (1.0 / model.config.input_std)
    p = model.params
    for i in range(len(model.config.widths)):
        x = r2plus1d_block(
            x,
            (
                p[f"block{i}.spatial.weight"],
                p[f"block{i}.spatial.bias"],
                p[f"block{i}.temporal.weight"],
                p[f"block{i}.temporal.bias"],
            ),
        )
    return affine(avg_pool_global(x), p["head.weight"], p["head.bias"])


# ---------------------------------------------------------------------------
# checkpoint format:
#   "DLKD" | u16 version | u32 config-json length | config json
#   | u32 param count | per param: u16 name length, name, u8 ndim, u32 dims, f32 LE values


def checkpoint_bytes(model):
    config = json.dumps(asdict(model.config), sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(config)), config]
    parts.append(struct.pack("<I", len(model.params)))
    for name, tensor in model.params.items():
        encoded = name.encode()
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack(f"<B{tensor.ndim}I", tensor.ndim, *tensor.shape))
        parts.append(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated while reading {what}", offset=self.pos)
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def model_from_bytes(buf):
    r = _Reader(buf)
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    version, config_len = r.unpack("<HI", "header")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    at = r.pos
    try:
        config = ModelConfig(**json.loads(r.take(config_len, "config").decode()))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"unreadable model config: {exc}", offset=at) from None
    (count,) = r.unpack("<I", "parameter count")
    params = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "name length")
        name = r.take(name_len, "name").decode()
        (ndim,) = r.unpack("<B", "ndim")
        shape = r.unpack(f"<{ndim}I", "shape")
        n = int(np.prod(shape))
        values = np.frombuffer(r.take(4 * n, f"values of {name}"), dtype="<f4").reshape(shape)
        params[name] = Tensor(values.astype(np.float32), requires_grad=True)
    if r.pos != len(buf):
        raise FormatError("trailing bytes after last parameter", offset=r.pos)
    expected = config.parameter_shapes()
    if {k: tuple(v.shape) for k, v in params.items()} != expected:
        raise FormatError("parameter shapes do not match the stored config", offset=r.pos)
    return Model(config, params)


def save_model(model, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def load_model(path):
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
