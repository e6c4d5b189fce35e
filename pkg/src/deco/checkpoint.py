"""Binary checkpoint format.

Layout (all integers little-endian):

    magic b"DECO" | u16 version | u16 flags
    u32 config length  | config bytes (YAML)
    u32 meta length    | meta bytes (JSON)
    u32 param count    | param records
    [flags bit 0] optimizer section: u64 t | u32 count | moment records
    u32 CRC32 of everything above

A param record is: u16 name length | name utf-8 | u8 dtype tag | u8 rank |
u32 dims... | raw values.  A moment record is the same but with two raw
blocks (m then v).  The checksum is verified before any field is trusted.
"""

from __future__ import annotations

import io
import json
import os
import struct
import zlib

import numpy as np

MAGIC = b"DECO"
VERSION = 1
_FLAG_OPTIMIZER = 1

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TAG_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class BadVersionError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


def _write_array(buf: io.BytesIO, arr: np.ndarray):
    tag = _TAG_OF.get(arr.dtype)
    if tag is None:
        raise CheckpointError(f"unsupported parameter dtype {arr.dtype}")
    buf.write(struct.pack("<BB", tag, arr.ndim))
    for dim in arr.shape:
        buf.write(struct.pack("<I", dim))
    buf.write(np.ascontiguousarray(arr).astype(_DTYPE_TAGS[tag], copy=False).tobytes())


def _write_name(buf: io.BytesIO, name: str):
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


class _Reader:
    def __init__(self, data: bytes, offset: int):
        self.data = data
        self.pos = offset

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("record extends past end of file")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def name(self) -> str:
        return self.take(self.u16()).decode("utf-8")

    def array(self) -> np.ndarray:
        tag, rank = struct.unpack("<BB", self.take(2))
        if tag not in _DTYPE_TAGS:
            raise CheckpointError(f"unknown dtype tag {tag}")
        dims = tuple(self.u32() for _ in range(rank))
        dtype = _DTYPE_TAGS[tag]
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        raw = self.take(count * dtype.itemsize)
        return np.frombuffer(raw, dtype=dtype).reshape(dims).copy()


def save_checkpoint(path: str, named_params: list, config_text: str, meta: dict,
                    optimizer_state: dict | None = None):
    """Write atomically; ``named_params`` is an ordered [(name, array)] list."""
    buf = io.BytesIO()
    flags = _FLAG_OPTIMIZER if optimizer_state is not None else 0
    buf.write(MAGIC)
    buf.write(struct.pack("<HH", VERSION, flags))
    config_raw = config_text.encode("utf-8")
    buf.write(struct.pack("<I", len(config_raw)))
    buf.write(config_raw)
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta_raw)))
    buf.write(meta_raw)
    buf.write(struct.pack("<I", len(named_params)))
    for name, arr in named_params:
        _write_name(buf, name)
        _write_array(buf, arr)
    if optimizer_state is not None:
        moments = optimizer_state["moments"]
        buf.write(struct.pack("<QI", int(optimizer_state["t"]), len(moments)))
        for name, (m, v) in moments.items():
            _write_name(buf, name)
            _write_array(buf, m)
            _write_array(buf, v)
    body = buf.getvalue()
    blob = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> dict:
    """Read and verify; returns {params, config_text, meta, optimizer_state}."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < 8:
        raise ChecksumError(f"{path}: truncated header")
    version = struct.unpack("<H", data[4:6])[0]
    if version != VERSION:
        raise BadVersionError(f"{path}: format version {version}, expected {VERSION}")
    if len(data) < 12:
        raise ChecksumError(f"{path}: truncated file")
    stored = struct.unpack("<I", data[-4:])[0]
    actual = zlib.crc32(data[:-4]) & 0xFFFFFFFF
    if stored != actual:
        raise ChecksumError(f"{path}: checksum mismatch (corrupt or truncated)")

    flags = struct.unpack("<H", data[6:8])[0]
    r = _Reader(data[:-4], 8)
    config_text = r.take(r.u32()).decode("utf-8")
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    params = []
    for _ in range(r.u32()):
        name = r.name()
        params.append((name, r.array()))
    optimizer_state = None
    if flags & _FLAG_OPTIMIZER:
        t = r.u64()
        moments = {}
        for _ in range(r.u32()):
            name = r.name()
            moments[name] = (r.array(), r.array())
        optimizer_state = {"t": t, "moments": moments}
    return {"params": params, "config_text": config_text, "meta": meta,
            "optimizer_state": optimizer_state}


def restore_model(model, params: list):
    """Copy loaded arrays into the model; strict on names and shapes."""
    current = dict(model.named_parameters())
    loaded = dict(params)
    missing = sorted(set(current) - set(loaded))
    extra = sorted(set(loaded) - set(current))
    if missing or extra:
        raise CheckpointError(f"parameter mismatch: missing={missing[:3]} extra={extra[:3]}")
    for name, arr in params:
        p = current[name]
        if p.data.shape != arr.shape:
            raise CheckpointError(
                f"shape mismatch for '{name}': checkpoint {arr.shape}, model {p.data.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)
