"""CATW binary checkpoints.

Layout (little-endian)::

    b"CATW" | u32 version (=1) | u32 tensor_count | tensor*
    [ u32 opt_count | tensor* ]            # optional, every name starts "opt."

    tensor := u16 name_len | name (UTF-8) | u8 dtype (0 = float32)
              | u8 ndim | ndim * u32 dims | float32 payload

A 0-d array is written with ndim 1 and dims (1,), so it loads back as shape (1,).
"""

from __future__ import annotations

import struct

import numpy as np

from .netpbm import write_atomic

MAGIC = b"CATW"
VERSION = 1
DTYPE_F32 = 0
OPT_PREFIX = "opt."


class CheckpointError(ValueError):
    pass


class CheckpointMismatch(CheckpointError):
    """Checkpoint tensors do not fit the model built from the config."""


def _encode_tensors(items):
    parts = [struct.pack("<I", len(items))]
    for name, arr in items:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        arr = np.asarray(arr)
        if arr.ndim == 0:
            arr = arr.reshape(1)  # scalars are stored as one-element vectors
        if arr.ndim > 255:
            raise CheckpointError(f"{name}: too many dimensions")
        data = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(data.tobytes())
    return b"".join(parts)


def _check_names(names):
    seen = set()
    for n in names:
        if n in seen:
            raise CheckpointError(f"duplicate tensor name {n!r}")
        seen.add(n)


def encode_checkpoint(tensors, optimizer=None):
    """Serialize ordered ``(name, array)`` pairs; ``optimizer`` names must start with ``opt.``."""
    tensors = list(tensors.items() if isinstance(tensors, dict) else tensors)
    opt = list(optimizer.items() if isinstance(optimizer, dict) else (optimizer or []))
    for name, _ in opt:
        if not name.startswith(OPT_PREFIX):
            raise CheckpointError(f"optimizer tensor {name!r} must be prefixed {OPT_PREFIX!r}")
    _check_names([n for n, _ in tensors] + [n for n, _ in opt])
    out = MAGIC + struct.pack("<I", VERSION) + _encode_tensors(tensors)
    if optimizer is not None:
        out += _encode_tensors(opt)
    return out


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos} (need {n} more)")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensors(self):
        (count,) = self.unpack("<I")
        items = []
        for _ in range(count):
            (nlen,) = self.unpack("<H")
            try:
                name = self.take(nlen).decode("utf-8")
            except UnicodeDecodeError:
                raise CheckpointError("tensor name is not valid UTF-8") from None
            dtype, ndim = self.unpack("<BB")
            if dtype != DTYPE_F32:
                raise CheckpointError(f"{name}: unsupported dtype code {dtype}")
            dims = self.unpack(f"<{ndim}I")
            n = int(np.prod(dims)) if ndim else 1
            arr = np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float32).reshape(dims)
            items.append((name, arr))
        return items


def decode_checkpoint(buf):
    """Parse bytes into ``(tensors, optimizer)`` dicts; optimizer is ``None`` if absent."""
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {bytes(buf[:4])!r}; not a CATW checkpoint")
    r = _Reader(buf)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors = r.tensors()
    optimizer = None
    if r.pos < len(buf):
        optimizer = r.tensors()
        for name, _ in optimizer:
            if not name.startswith(OPT_PREFIX):
                raise CheckpointError(f"optimizer section holds non-optimizer tensor {name!r}")
        if r.pos != len(buf):
            raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after optimizer section")
    _check_names([n for n, _ in tensors] + [n for n, _ in optimizer or []])
    return dict(tensors), (dict(optimizer) if optimizer is not None else None)


def save_checkpoint(path, tensors, optimizer=None):
    write_atomic(path, encode_checkpoint(tensors, optimizer))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


# ----------------------------------------------------------------------------
# model state
# ----------------------------------------------------------------------------

def model_state(model):
    """Parameters then batch-norm running statistics, in module order."""
    state = [(name, p.data) for name, p in model.named_parameters()]
    for name, bn, attr in model.named_buffers():
        value = getattr(bn, attr)
        if value is None:
            value = np.zeros(bn.channels, np.float32) if attr == "running_mean" else np.ones(bn.channels, np.float32)
        state.append((name, value))
    return dict(state)


def expected_shapes(model):
    return {name: tuple(np.shape(v)) for name, v in model_state(model).items()}


def describe_mismatch(expected, found):
    lines = []
    for name in expected:
        if name not in found:
            lines.append(f"  missing   {name}: expected {expected[name]}")
        elif tuple(found[name]) != tuple(expected[name]):
            lines.append(f"  shape     {name}: expected {expected[name]}, found {tuple(found[name])}")
    for name in found:
        if name not in expected:
            lines.append(f"  unexpected {name}: found {tuple(found[name])}")
    return lines


def load_model_state(model, tensors):
    """Copy checkpoint tensors into ``model``; validate everything before touching it."""
    expected = expected_shapes(model)
    found = {name: arr.shape for name, arr in tensors.items()}
    diff = describe_mismatch(expected, found)
    if diff:
        raise CheckpointMismatch("checkpoint does not match model configuration:\n" + "\n".join(diff))
    params = dict(model.named_parameters())
    for name, bn, attr in model.named_buffers():
        current = getattr(bn, attr)
        dtype = current.dtype if current is not None else params[next(iter(params))].data.dtype
        setattr(bn, attr, tensors[name].astype(dtype).copy())
    for name, p in params.items():
        p.data = tensors[name].astype(p.data.dtype).copy()
        p.grad = None
    return model
