"""Binary checkpoint format.

Layout (all integers little-endian):

    magic   4 bytes  b"GLPD"
    version u32      currently 1
    cfg_len u32      followed by cfg_len bytes of model-config key=value text
    step    u64      global optimizer step
    count   u32      number of tensor records

    record: name_len u16, name utf-8
            kind  u8   0 = parameter, 1 = adam first moment, 2 = adam second moment
            dtype u8   0 = float32, 1 = float64
            ndim  u8, dims ndim*u32
            data  raw little-endian C-order bytes

Tensors are stored in their native dtype so save -> load round-trips bitwise;
pass dtype=np.float32 to save() to downcast (lossy, but half the size). Writes
are atomic: temp file in the same directory, then rename.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .autodiff import Tensor
from .config import ModelConfig, model_config_from_text, model_config_text
from .errors import (CheckpointMagicError, CheckpointShapeError,
                     CheckpointTruncatedError, CheckpointVersionError)
from .optim import AdamState

MAGIC = b"GLPD"
VERSION = 1

_KIND_PARAM, _KIND_ADAM_M, _KIND_ADAM_V = 0, 1, 2
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def _pack_record(name: str, kind: int, arr: np.ndarray, dtype) -> bytes:
    arr = arr.astype(dtype, copy=False)
    nb = name.encode("utf-8")
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<BBB", kind, _DTYPE_CODES[np.dtype(dtype)], arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    return head + dims + le.tobytes(order="C")


def checkpoint_save(path: str, cfg: ModelConfig, params: dict,
                    state: AdamState | None = None, step: int = 0,
                    dtype=None) -> None:
    """Write params (and optimizer moments, if given) atomically to path."""
    cfg_text = model_config_text(cfg).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(cfg_text)), cfg_text]
    records = []
    for name in sorted(params):
        arr = params[name].data
        records.append(_pack_record(name, _KIND_PARAM, arr, dtype or arr.dtype))
    if state is not None:
        for name in sorted(state.m):
            records.append(_pack_record(name, _KIND_ADAM_M, state.m[name],
                                        dtype or state.m[name].dtype))
        for name in sorted(state.v):
            records.append(_pack_record(name, _KIND_ADAM_V, state.v[name],
                                        dtype or state.v[name].dtype))
    chunks.append(struct.pack("<Q", step))
    chunks.append(struct.pack("<I", len(records)))
    chunks.extend(records)

    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            for chunk in chunks:
                fh.write(chunk)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise CheckpointTruncatedError(
                f"file ends at byte {len(self.blob)}, needed {self.off + n}")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_load(path: str, expected_cfg: ModelConfig | None = None):
    """Read a checkpoint; returns (cfg, params, adam_state_or_None, step).

    Raises a distinct error kind per failure mode: bad magic, unsupported
    version, truncated file, or a shape/config mismatch. On any failure no
    partial state escapes.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise CheckpointMagicError(f"{path}: bad magic, not a checkpoint")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: unsupported version {version}")
    (cfg_len,) = r.unpack("<I")
    cfg = model_config_from_text(r.take(cfg_len).decode("utf-8"))
    (step,) = r.unpack("<Q")
    (count,) = r.unpack("<I")

    if expected_cfg is not None and cfg != expected_cfg:
        raise CheckpointShapeError(
            f"{path}: stored config {cfg} does not match expected {expected_cfg}")

    buckets = ({}, {}, {})
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        kind, dcode, ndim = r.unpack("<BBB")
        if kind not in (0, 1, 2) or dcode not in _DTYPES:
            raise CheckpointShapeError(f"{path}: corrupt record header for {name!r}")
        dims = r.unpack(f"<{ndim}I") if ndim else ()
        dt = _DTYPES[dcode]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize if ndim else dt.itemsize
        arr = np.frombuffer(r.take(nbytes), dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
        buckets[kind][name] = arr

    params = {name: Tensor(arr, requires_grad=True) for name, arr in buckets[0].items()}
    state = None
    if buckets[1] or buckets[2]:
        if set(buckets[1]) != set(params) or set(buckets[2]) != set(params):
            raise CheckpointShapeError(f"{path}: optimizer moments do not cover the parameters")
        for name, p in params.items():
            if buckets[1][name].shape != p.shape or buckets[2][name].shape != p.shape:
                raise CheckpointShapeError(f"{path}: moment shape mismatch for {name!r}")
        state = AdamState(params)
        state.m = buckets[1]
        state.v = buckets[2]
        state.step = step
    return cfg, params, state, step
