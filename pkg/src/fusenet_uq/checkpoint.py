"""Binary checkpoint format.

All integers are little-endian::

    magic       4s   b"UFNC"
    version     u16  FORMAT_VERSION
    header      u32 length + UTF-8 JSON (sorted keys): model spec, branch-2 identity
    params      u32 count, then per tensor:
                  u16 name length, name, u8 dtype tag, u8 ndim, u32 dims[ndim], raw values
    bn stats    u32 count, then per layer:
                  u16 name length, name, u8 dtype tag, u32 channels,
                  raw running mean, raw running var, f64 momentum
    seed        u64  training seed
    digest      32s  SHA-256 of the training config JSON

The whole file is parsed before a model is built, so a defective file never
yields a partially loaded model.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fusenet_uq.models import Model, ModelSpec, build_model

MAGIC = b"UFNC"
FORMAT_VERSION = 1
BRANCH2_IDENTITY = "surrogate-conv-stack"
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


class CheckpointError(ValueError):
    pass


@dataclass
class CheckpointMeta:
    seed: int
    config_digest: bytes
    branch2: str


def config_digest(config: dict) -> bytes:
    return hashlib.sha256(json.dumps(config, sort_keys=True, separators=(",", ":")).encode()).digest()


def _name(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def dumps(model: Model, seed: int = 0, config: dict | None = None) -> bytes:
    header = {"spec": model.spec.to_dict(), "branch2": BRANCH2_IDENTITY if model.spec.kind == "fusenet" else None}
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(hb)), hb]
    params = model.parameters()
    out.append(struct.pack("<I", len(params)))
    for name, p in params.items():
        tag = _TAGS[p.dtype]
        out += [_name(name), struct.pack(f"<BB{p.ndim}I", tag, p.ndim, *p.shape), p.data.astype(_DTYPES[tag]).tobytes()]
    bufs = model.buffers()
    out.append(struct.pack("<I", len(bufs)))
    for name, b in bufs.items():
        tag = _TAGS[b.mean.dtype]
        dt = _DTYPES[tag]
        out += [_name(name), struct.pack("<BI", tag, len(b.mean)), b.mean.astype(dt).tobytes(), b.var.astype(dt).tobytes(), struct.pack("<d", b.momentum)]
    out.append(struct.pack("<Q", seed))
    out.append(config_digest(config or {}))
    return b"".join(out)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def name(self, what: str) -> str:
        (n,) = self.unpack("<H", what)
        return self.take(n, what).decode("utf-8")

    def array(self, tag: int, shape: tuple, what: str) -> np.ndarray:
        if tag not in _DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} for {what}")
        dt = _DTYPES[tag]
        count = int(np.prod(shape))
        return np.frombuffer(self.take(count * dt.itemsize, what), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def loads(raw: bytes) -> tuple[Model, CheckpointMeta]:
    r = _Reader(raw)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic: not a UFNC checkpoint")
    (version,) = r.unpack("<H", "version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint version mismatch: file has {version}, expected {FORMAT_VERSION}")
    (hlen,) = r.unpack("<I", "header length")
    try:
        header = json.loads(r.take(hlen, "header").decode("utf-8"))
        spec = ModelSpec.from_dict(header["spec"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    params = {}
    (n,) = r.unpack("<I", "parameter count")
    for _ in range(n):
        name = r.name("parameter name")
        tag, ndim = r.unpack("<BB", f"parameter {name}")
        shape = r.unpack(f"<{ndim}I", f"parameter {name} shape")
        params[name] = r.array(tag, shape, f"parameter {name}")
    bufs = {}
    (n,) = r.unpack("<I", "buffer count")
    for _ in range(n):
        name = r.name("buffer name")
        tag, ch = r.unpack("<BI", f"buffer {name}")
        mean = r.array(tag, (ch,), f"buffer {name} mean")
        var = r.array(tag, (ch,), f"buffer {name} var")
        (momentum,) = r.unpack("<d", f"buffer {name} momentum")
        bufs[name] = (mean, var, momentum)
    (seed,) = r.unpack("<Q", "seed")
    digest = r.take(32, "config digest")
    if r.pos != len(raw):
        raise CheckpointError(f"trailing bytes after checkpoint ({len(raw) - r.pos})")

    dtype = next(iter(params.values())).dtype if params else np.float32
    model = build_model(spec, 0, dtype=dtype)
    mp, mb = model.parameters(), model.buffers()
    if set(mp) != set(params) or set(mb) != set(bufs):
        raise CheckpointError("checkpoint tensors do not match the model spec")
    for name, p in mp.items():
        if p.shape != params[name].shape:
            raise CheckpointError(f"shape mismatch for {name}: {params[name].shape} vs {p.shape}")
        p.data[...] = params[name]
    for name, b in mb.items():
        mean, var, momentum = bufs[name]
        if mean.shape != b.mean.shape:
            raise CheckpointError(f"shape mismatch for buffer {name}")
        b.mean[...] = mean
        b.var[...] = var
        b.momentum = momentum
    return model, CheckpointMeta(seed, digest, header.get("branch2") or "")


def save_checkpoint(model: Model, path, seed: int = 0, config: dict | None = None) -> None:
    Path(path).write_bytes(dumps(model, seed, config))


def load_checkpoint(path) -> tuple[Model, CheckpointMeta]:
    return loads(Path(path).read_bytes())
