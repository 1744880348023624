"""Binary netpbm (P5 greyscale / P6 RGB, maxval 255) reading and writing."""

from __future__ import annotations

import os
import tempfile

import numpy as np


class FormatError(ValueError):
    pass


def _tokens(buf, count, pos):
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    out = []
    n = len(buf)
    while len(out) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos >= n:
            raise FormatError("truncated header")
        if buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        out.append(buf[start:pos])
    return out, pos


def decode(buf):
    """Parse P5/P6 bytes into a uint8 array, H x W (P5) or H x W x 3 (P6)."""
    if len(buf) < 2 or buf[:2] not in (b"P5", b"P6"):
        raise FormatError(f"unsupported magic {buf[:2]!r}; expected P5 or P6")
    channels = 3 if buf[:2] == b"P6" else 1
    fields, pos = _tokens(buf, 3, 2)
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError:
        raise FormatError(f"malformed header fields {fields!r}") from None
    if width <= 0 or height <= 0:
        raise FormatError(f"invalid dimensions {width}x{height}")
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}; only 255 is supported")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after header")
    pos += 1
    need = width * height * channels
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise FormatError(f"truncated payload: {len(payload)} of {need} bytes")
    arr = np.frombuffer(payload, dtype=np.uint8)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return arr.reshape(shape).copy()


def encode(arr):
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise TypeError(f"expected uint8 pixels, got {arr.dtype}")
    if arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    elif arr.ndim == 2:
        magic = b"P5"
    else:
        raise FormatError(f"cannot encode array of shape {arr.shape}")
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr).tobytes()


def write_atomic(path, data):
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o644)  # mkstemp creates 0600
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_raw(path):
    with open(path, "rb") as fh:
        return decode(fh.read())


def quantize(values):
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def load_image(path):
    """Load a P5/P6 file as float32 in [0, 1]: H x W x 3 or H x W."""
    return read_raw(path).astype(np.float32) / np.float32(255.0)


def save_image(values, path):
    """Write floats in [0, 1] (H x W x 3 -> P6, H x W -> P5), quantized to 8 bits."""
    write_atomic(path, encode(quantize(values)))


def load_label(path):
    """Load a P5 change label; any nonzero pixel is changed (1)."""
    raw = read_raw(path)
    if raw.ndim != 2:
        raise FormatError(f"{path}: label must be a greyscale P5 image")
    return (raw > 0).astype(np.uint8)


def save_label(label, path):
    label = np.asarray(label)
    write_atomic(path, encode(np.where(label > 0, 255, 0).astype(np.uint8)))
