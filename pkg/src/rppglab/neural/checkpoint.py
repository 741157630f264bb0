"""PFCK model checkpoints.

Layout (integers u32 little-endian)::

    b"PFCK" | version | meta length | meta JSON (utf-8)
    section x 3 (parameters, buffers, optimizer):
        entry count, then per entry:
        name length | name (utf-8) | rank | dims... | float64 LE values

The optimizer section is empty unless the checkpoint is meant for resuming;
it holds Adam's first/second moments as ``m/<param>`` and ``v/<param>`` and
the step counter lives in the metadata.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from ..autodiff import AdamState
from .layers import Module

MAGIC = b"PFCK"
VERSION = 1
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


def _write_entries(buf: io.BytesIO, entries: list[tuple[str, np.ndarray]]) -> None:
    buf.write(_U32.pack(len(entries)))
    for name, arr in entries:
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        buf.write(_U32.pack(len(raw)))
        buf.write(raw)
        buf.write(_U32.pack(arr.ndim))
        for d in arr.shape:
            buf.write(_U32.pack(d))
        buf.write(np.ascontiguousarray(arr).tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def entries(self) -> dict[str, np.ndarray]:
        out = {}
        for _ in range(self.u32()):
            name = self.take(self.u32()).decode("utf-8")
            shape = tuple(self.u32() for _ in range(self.u32()))
            count = int(np.prod(shape)) if shape else 1
            out[name] = np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape).copy()
        return out


def encode_checkpoint(model: Module, meta: dict, opt_state: AdamState | None = None) -> bytes:
    names = [n for n, _ in model.named_parameters()]
    meta = dict(meta)
    meta["opt_step"] = opt_state.step if opt_state is not None else None
    buf = io.BytesIO()
    raw_meta = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(MAGIC + _U32.pack(VERSION) + _U32.pack(len(raw_meta)) + raw_meta)
    _write_entries(buf, [(n, p.value) for n, p in model.named_parameters()])
    _write_entries(buf, list(model.named_buffers()))
    opt = []
    if opt_state is not None:
        opt = [(f"m/{n}", a) for n, a in zip(names, opt_state.m)]
        opt += [(f"v/{n}", a) for n, a in zip(names, opt_state.v)]
    _write_entries(buf, opt)
    return buf.getvalue()


def decode_checkpoint(data: bytes):
    """Return ``(meta, params, buffers, optimizer entries)``."""
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a PFCK checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    params, buffers, opt = r.entries(), r.entries(), r.entries()
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after checkpoint")
    return meta, params, buffers, opt


def save_checkpoint(path, model: Module, meta: dict, opt_state: AdamState | None = None) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_checkpoint(model, meta, opt_state))


def load_checkpoint(path, model: Module) -> tuple[dict, AdamState | None]:
    """Load weights and buffers into ``model``; return ``(meta, optimizer state)``."""
    meta, params, buffers, opt = decode_checkpoint(Path(path).read_bytes())
    try:
        model.load_state_dict({**params, **buffers})
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: checkpoint does not match model: {exc}") from None
    state = None
    if opt:
        names = [n for n, _ in model.named_parameters()]
        state = AdamState([opt[f"m/{n}"] for n in names], [opt[f"v/{n}"] for n in names],
                          int(meta["opt_step"]))
    return meta, state


def read_meta(path) -> dict:
    return decode_checkpoint(Path(path).read_bytes())[0]
