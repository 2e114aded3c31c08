"""VAPI checkpoint files.

Layout (all integers little-endian)::

    b"VAPI"  u32 version
    str stage            (u16 length + utf-8)
    u64 step
    32 bytes config hash (sha-256 digest)
    u32 n_tensors, then per tensor: str name, u8 ndim, u64 dims..., f64 payload
    u32 n_ints,    then per entry:  str name, i64 value
    u32 n_rngs,    then per entry:  str name, Philox state
        (u64 counter[4], u64 key[2], u64 buffer[4], u32 buffer_pos, u32 has_uint32, u32 uinteger)

Tables are written in sorted name order, so save -> load -> save is byte-identical.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"VAPI"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    stage: str
    step: int
    config_hash: str
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    ints: dict[str, int] = field(default_factory=dict)
    rng_states: dict[str, dict] = field(default_factory=dict)


def _w_str(buf: io.BytesIO, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def _r_exact(buf: io.BytesIO, n: int) -> bytes:
    raw = buf.read(n)
    if len(raw) != n:
        raise CheckpointError("truncated checkpoint")
    return raw


def _r_str(buf: io.BytesIO) -> str:
    (n,) = struct.unpack("<H", _r_exact(buf, 2))
    return _r_exact(buf, n).decode("utf-8")


def _w_rng(buf: io.BytesIO, state: dict) -> None:
    if state.get("bit_generator") != "Philox":
        raise CheckpointError("only Philox generator states are supported")
    inner = state["state"]
    buf.write(np.asarray(inner["counter"], dtype="<u8").tobytes())
    buf.write(np.asarray(inner["key"], dtype="<u8").tobytes())
    buf.write(np.asarray(state["buffer"], dtype="<u8").tobytes())
    buf.write(struct.pack("<III", state["buffer_pos"], state["has_uint32"], state["uinteger"]))


def _r_rng(buf: io.BytesIO) -> dict:
    counter = np.frombuffer(_r_exact(buf, 32), dtype="<u8").astype(np.uint64)
    key = np.frombuffer(_r_exact(buf, 16), dtype="<u8").astype(np.uint64)
    buffer = np.frombuffer(_r_exact(buf, 32), dtype="<u8").astype(np.uint64)
    pos, has32, uint = struct.unpack("<III", _r_exact(buf, 12))
    return {"bit_generator": "Philox", "state": {"counter": counter, "key": key},
            "buffer": buffer, "buffer_pos": pos, "has_uint32": has32, "uinteger": uint}


def to_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _w_str(buf, ckpt.stage)
    buf.write(struct.pack("<Q", ckpt.step))
    digest = bytes.fromhex(ckpt.config_hash)
    if len(digest) != 32:
        raise CheckpointError("config hash must be a sha-256 hex digest")
    buf.write(digest)
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name], dtype=np.float64)
        _w_str(buf, name)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    buf.write(struct.pack("<I", len(ckpt.ints)))
    for name in sorted(ckpt.ints):
        _w_str(buf, name)
        buf.write(struct.pack("<q", int(ckpt.ints[name])))
    buf.write(struct.pack("<I", len(ckpt.rng_states)))
    for name in sorted(ckpt.rng_states):
        _w_str(buf, name)
        _w_rng(buf, ckpt.rng_states[name])
    return buf.getvalue()


def from_bytes(raw: bytes) -> Checkpoint:
    buf = io.BytesIO(raw)
    if _r_exact(buf, 4) != MAGIC:
        raise CheckpointError("bad magic")
    (version,) = struct.unpack("<I", _r_exact(buf, 4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    stage = _r_str(buf)
    (step,) = struct.unpack("<Q", _r_exact(buf, 8))
    config_hash = _r_exact(buf, 32).hex()
    tensors = {}
    (n,) = struct.unpack("<I", _r_exact(buf, 4))
    for _ in range(n):
        name = _r_str(buf)
        (ndim,) = struct.unpack("<B", _r_exact(buf, 1))
        shape = struct.unpack(f"<{ndim}Q", _r_exact(buf, 8 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(_r_exact(buf, 8 * count), dtype="<f8").astype(np.float64)
        tensors[name] = data.reshape(shape)
    ints = {}
    (n,) = struct.unpack("<I", _r_exact(buf, 4))
    for _ in range(n):
        name = _r_str(buf)
        (ints[name],) = struct.unpack("<q", _r_exact(buf, 8))
    rngs = {}
    (n,) = struct.unpack("<I", _r_exact(buf, 4))
    for _ in range(n):
        name = _r_str(buf)
        rngs[name] = _r_rng(buf)
    if buf.read(1):
        raise CheckpointError("trailing bytes after checkpoint")
    return Checkpoint(stage, step, config_hash, tensors, ints, rngs)


def save(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)
    return path


def load(path: str | Path, expect_hash: str | None = None, expect_stage: str | None = None) -> Checkpoint:
    ckpt = from_bytes(Path(path).read_bytes())
    if expect_stage is not None and ckpt.stage != expect_stage:
        raise CheckpointError(f"checkpoint stage is {ckpt.stage!r}, expected {expect_stage!r}")
    if expect_hash is not None and ckpt.config_hash != expect_hash:
        raise CheckpointError("config hash mismatch: checkpoint was written under a different config")
    return ckpt
