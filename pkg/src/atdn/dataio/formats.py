"""Pose text files, flow files and frame images.

Binary layouts (all little-endian)::

    flow   "ATDNFLOW" | u32 version=1 | u32 H | u32 W | H*W*2 f32 (channel-last)
    image  "ATDNIMG1" | u32 version=1 | u32 H | u32 W | H*W f32
"""
from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass

import numpy as np

from ..geometry import RENORM_DRIFT, Pose, Trajectory, orthonormalize, rotation_drift

MAX_BYTES = 1 << 30
POSE_DRIFT_LIMIT = 1e-6
FLOW_MAGIC = b"ATDNFLOW"
IMAGE_MAGIC = b"ATDNIMG1"
FORMAT_VERSION = 1
LUMA = (0.299, 0.587, 0.114)


class FormatError(ValueError):
    """Malformed or unsupported file content."""


class PoseParseError(FormatError):
    def __init__(self, line_no, reason):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no


class TruncatedError(FormatError):
    pass


class SizeLimitError(FormatError):
    pass


@dataclass(frozen=True, eq=False)
class FlowField:
    """Dense displacement field, ``data[y, x] = (dx, dy)`` in pixels."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim != 3 or d.shape[2] != 2 or d.shape[0] == 0 or d.shape[1] == 0:
            raise ValueError(f"flow must be HxWx2 with H, W > 0, got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("flow contains non-finite values")
        object.__setattr__(self, "data", d)

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    def __eq__(self, other):
        return isinstance(other, FlowField) and np.array_equal(self.data, other.data)


@dataclass(eq=False)
class Frame:
    frame_id: int
    image: np.ndarray
    pose: Pose | None = None

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float32)
        if img.ndim != 2:
            raise ValueError(f"frame image must be 2-D, got {img.shape}")
        if img.size and (img.min() < 0.0 or img.max() > 1.0):
            raise ValueError("frame intensities must lie in [0, 1]")
        self.image = img


# ----------------------------------------------------------------- poses

def parse_pose_file(stream):
    """Read a KITTI odometry pose file (12 numbers per line, row-major 3x4)."""
    if isinstance(stream, (str, os.PathLike)):
        with open(stream) as fh:
            return parse_pose_file(fh)
    rotations, translations = [], []
    for line_no, line in enumerate(stream, start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 12:
            raise PoseParseError(line_no, f"expected 12 numbers, got {len(fields)}")
        try:
            m = np.array([float(f) for f in fields]).reshape(3, 4)
        except ValueError as exc:
            raise PoseParseError(line_no, f"non-numeric value ({exc})") from None
        if not np.all(np.isfinite(m)):
            raise PoseParseError(line_no, "non-finite value")
        r = m[:, :3]
        drift = rotation_drift(r)
        if drift > POSE_DRIFT_LIMIT:
            raise PoseParseError(line_no, f"invalid rotation (drift {drift:.2e})")
        if drift > RENORM_DRIFT:
            r = orthonormalize(r)
        rotations.append(r)
        translations.append(m[:, 3])
    if not rotations:
        raise FormatError("pose file holds no poses")
    return Trajectory(np.arange(len(rotations)), np.array(rotations), np.array(translations))


def format_pose_line(p):
    m = np.hstack([p.rotation, p.translation[:, None]]).ravel()
    return " ".join(repr(float(x)) for x in m)


def write_pose_file(traj, stream):
    if isinstance(stream, (str, os.PathLike)):
        with open(stream, "w") as fh:
            return write_pose_file(traj, fh)
    for p in traj:
        stream.write(format_pose_line(p) + "\n")


# ------------------------------------------------------------ raw binary

def _read_exact(stream, n, what):
    buf = stream.read(n)
    if len(buf) != n:
        raise TruncatedError(f"truncated {what}: expected {n} bytes, got {len(buf)}")
    return buf


def _write_grid(sink, magic, arr):
    h, w = arr.shape[:2]
    header = magic + struct.pack("<III", FORMAT_VERSION, h, w)
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "wb") as fh:
            fh.write(header + payload)
    else:
        sink.write(header + payload)
    return len(header) + len(payload)


def _read_grid(source, magic, channels, max_bytes, what):
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return _read_grid(fh, magic, channels, max_bytes, what)
    got = _read_exact(source, 8, f"{what} magic")
    if got != magic:
        raise FormatError(f"bad {what} magic {got!r}")
    version, h, w = struct.unpack("<III", _read_exact(source, 12, f"{what} header"))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported {what} version {version}")
    if h == 0 or w == 0:
        raise FormatError(f"{what} has zero size")
    n = h * w * channels * 4
    if n > max_bytes:
        raise SizeLimitError(f"{what} of {h}x{w} needs {n} bytes, cap is {max_bytes}")
    data = np.frombuffer(_read_exact(source, n, f"{what} payload"), dtype="<f4")
    shape = (h, w, channels) if channels > 1 else (h, w)
    return data.astype(np.float32).reshape(shape)


def write_flow(field, sink):
    return _write_grid(sink, FLOW_MAGIC, field.data)


def read_flow(source, max_bytes=MAX_BYTES):
    return FlowField(_read_grid(source, FLOW_MAGIC, 2, max_bytes, "flow"))


def write_raw_image(image, sink):
    return _write_grid(sink, IMAGE_MAGIC, np.asarray(image, dtype=np.float32))


# ------------------------------------------------------------- PGM / PPM

def _pnm_header(source):
    tokens = []
    while len(tokens) < 4:
        line = source.readline()
        if not line:
            raise TruncatedError("truncated PNM header")
        line = line.split(b"#", 1)[0]
        tokens.extend(line.split())
    magic, w, h, maxval = tokens[:4]
    if len(tokens) > 4:
        raise FormatError("PNM header must end before pixel data")
    return magic, int(w), int(h), int(maxval)


def _read_pnm(source, max_bytes):
    magic, w, h, maxval = _pnm_header(source)
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported PNM type {magic!r}")
    if not 0 < maxval < 65536 or w <= 0 or h <= 0:
        raise FormatError("invalid PNM dimensions or maxval")
    ch = 3 if magic == b"P6" else 1
    depth = 1 if maxval < 256 else 2
    n = w * h * ch * depth
    if n > max_bytes:
        raise SizeLimitError(f"PNM of {w}x{h} exceeds cap {max_bytes}")
    raw = np.frombuffer(_read_exact(source, n, "PNM payload"), dtype=np.uint8 if depth == 1 else ">u2")
    img = raw.astype(np.float64).reshape(h, w, ch) / maxval
    if ch == 3:
        img = img @ np.array(LUMA)
    else:
        img = img[:, :, 0]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def write_pgm(image, sink, maxval=255):
    img = np.clip(np.rint(np.asarray(image, dtype=np.float64) * maxval), 0, maxval)
    dtype = np.uint8 if maxval < 256 else ">u2"
    data = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode() + img.astype(dtype).tobytes()
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "wb") as fh:
            fh.write(data)
    else:
        sink.write(data)
    return len(data)


def read_frame(source, format=None, frame_id=0, expected_shape=None, max_bytes=MAX_BYTES):
    """Load a grayscale frame from PGM (P5), PPM (P6) or raw ATDNIMG1 data.

    ``format`` is one of ``"pgm"``, ``"ppm"``, ``"raw"``; when omitted it is
    taken from the file extension.
    """
    if isinstance(source, (str, os.PathLike)):
        if format is None:
            format = os.path.splitext(str(source))[1].lstrip(".").lower()
            format = {"img": "raw", "pnm": "pgm"}.get(format, format)
        with open(source, "rb") as fh:
            return read_frame(fh, format, frame_id, expected_shape, max_bytes)
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    if format in ("pgm", "ppm"):
        img = _read_pnm(source, max_bytes)
    elif format == "raw":
        img = _read_grid(source, IMAGE_MAGIC, 1, max_bytes, "image")
    else:
        raise FormatError(f"unsupported image format {format!r}")
    if expected_shape is not None and img.shape != tuple(expected_shape):
        raise FormatError(f"frame {frame_id} is {img.shape}, expected {tuple(expected_shape)}")
    return Frame(frame_id, img)


def area_resize(a, out_h, out_w):
    """Downsample the first two axes by block averaging (integer factors only)."""
    h, w = a.shape[:2]
    if h % out_h or w % out_w:
        raise ValueError(f"cannot block-average {h}x{w} to {out_h}x{out_w}")
    fh, fw = h // out_h, w // out_w
    if fh == fw == 1:
        return a
    return a.reshape(out_h, fh, out_w, fw, *a.shape[2:]).mean(axis=(1, 3)).astype(a.dtype)
