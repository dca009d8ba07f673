"""Parameter checkpoints.

Layout (little-endian)::

    "ATDNCKPT" | u32 version
    repeated until EOF:
        u16 name length | name bytes (utf-8) | u32 rank | u32 extents[rank] | f32 payload
"""
import hashlib
import io
import os
import struct

import numpy as np

from ..dataio.formats import MAX_BYTES, FormatError, TruncatedError, SizeLimitError

MAGIC = b"ATDNCKPT"
VERSION = 1


def checkpoint_bytes(params):
    out = io.BytesIO()
    out.write(MAGIC + struct.pack("<I", VERSION))
    for name, arr in params.items():
        a = np.asarray(arr, dtype="<f4", order="C")
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)) + raw)
        out.write(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        out.write(a.tobytes())
    return out.getvalue()


def save_checkpoint(params, path):
    """Write ``params`` (name -> array) to ``path``; returns bytes written."""
    data = checkpoint_bytes(params)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def _take(buf, pos, n, what):
    if pos + n > len(buf):
        raise TruncatedError(f"checkpoint truncated inside {what}")
    return buf[pos:pos + n], pos + n


def parse_checkpoint(buf, max_bytes=MAX_BYTES):
    if len(buf) < 12 or buf[:8] != MAGIC:
        raise FormatError("bad checkpoint magic")
    (version,) = struct.unpack("<I", buf[8:12])
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos, params = 12, {}
    while pos < len(buf):
        raw, pos = _take(buf, pos, 2, "name length")
        (n,) = struct.unpack("<H", raw)
        name, pos = _take(buf, pos, n, "name")
        raw, pos = _take(buf, pos, 4, "rank")
        (rank,) = struct.unpack("<I", raw)
        raw, pos = _take(buf, pos, 4 * rank, "extents")
        shape = struct.unpack(f"<{rank}I", raw)
        size = int(np.prod(shape, dtype=np.int64)) * 4
        if size > max_bytes:
            raise SizeLimitError(f"parameter of shape {shape} exceeds cap")
        raw, pos = _take(buf, pos, size, "payload")
        params[name.decode("utf-8")] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
    return params


def load_checkpoint(path, max_bytes=MAX_BYTES):
    if os.path.getsize(path) > max_bytes:
        raise SizeLimitError(f"{path} exceeds cap {max_bytes}")
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read(), max_bytes)


def fingerprint(params):
    """SHA-256 over the serialized parameters."""
    return hashlib.sha256(checkpoint_bytes(params)).digest()
