"""Model checkpoints (little-endian).

    magic    b"LUDM"
    version  u16 = 1
    config   u32 length + UTF-8 JSON (sorted keys)
    norm     u16 band count (0 when absent), then f32 means, f32 stds
    tensors  u32 count, then per tensor sorted by name:
             u16 name length, name, u8 ndim, u32 dims..., f32 payload

Batch-norm running statistics are stored as tensors named
``<layer>.running_mean`` and ``<layer>.running_var``.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError
from .model import Model, ModelConfig, build_model

MAGIC = b"LUDM"
VERSION = 1


def _tensors(model: Model) -> dict:
    out = dict(model.params)
    for name, state in model.buffers.items():
        out[f"{name}.running_mean"] = state.mean
        out[f"{name}.running_var"] = state.var
    return out


def encode_checkpoint(model: Model) -> bytes:
    cfg = json.dumps(model.config.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<HI", VERSION, len(cfg)), cfg]
    if model.norm_mean is None:
        parts.append(struct.pack("<H", 0))
    else:
        parts.append(struct.pack("<H", len(model.norm_mean)))
        parts.append(np.asarray(model.norm_mean, dtype="<f4").tobytes())
        parts.append(np.asarray(model.norm_std, dtype="<f4").tobytes())
    tensors = _tensors(model)
    parts.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("truncated checkpoint")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))


def decode_checkpoint(buf: bytes) -> Model:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise FormatError("not a model checkpoint")
    version, cfg_len = r.unpack("HI")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        cfg = ModelConfig.from_dict(json.loads(r.take(cfg_len)))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"bad model config: {exc}") from None
    model = build_model(cfg)
    (nb,) = r.unpack("H")
    if nb:
        mean = np.frombuffer(r.take(4 * nb), dtype="<f4").astype(np.float32)
        std = np.frombuffer(r.take(4 * nb), dtype="<f4").astype(np.float32)
        model.set_normalization(mean, std)
    (count,) = r.unpack("I")
    expected = _tensors(model)
    seen = set()
    for _ in range(count):
        (nlen,) = r.unpack("H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("B")
        dims = r.unpack(f"{ndim}I") if ndim else ()
        size = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims)
        if name not in expected or expected[name].shape != arr.shape:
            raise FormatError(f"tensor {name!r} {arr.shape} does not fit the model")
        seen.add(name)
        if name.endswith(".running_mean"):
            model.buffers[name[: -len(".running_mean")]].mean = arr.astype(np.float64)
        elif name.endswith(".running_var"):
            model.buffers[name[: -len(".running_var")]].var = arr.astype(np.float64)
        else:
            model.params[name] = arr.astype(np.float32)
    if seen != set(expected):
        raise FormatError(f"missing tensors: {sorted(set(expected) - seen)[:5]}")
    if r.pos != len(buf):
        raise FormatError("trailing bytes after checkpoint")
    return model


def save_checkpoint(model: Model, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(model))


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
