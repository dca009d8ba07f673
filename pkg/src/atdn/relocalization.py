"""Keyframe embedding map and relocalization queries.

A query embeds the image, measures its distance to every stored keyframe
embedding and takes the minimum. Outlier analysis of the distance profile
yields a candidate set, and VO between a candidate keyframe and the query
refines the pose.

Map file layout (little-endian)::

    "ATDNMAP1" | u32 version | u32 D | u64 count | 32-byte model fingerprint
    count x (u64 frame_id | 12 x f64 pose, row-major 3x4 | D x f32 embedding)
    u32 CRC32 of everything above
"""
from __future__ import annotations

import math
import os
import struct
import zlib
from dataclasses import dataclass, replace

import numpy as np

from .dataio.formats import MAX_BYTES, FormatError, SizeLimitError, TruncatedError, read_flow
from .dataio.synthetic import flow_oracle
from .geometry import Pose, compose
from .mapping import Embedding, encode
from .odometry import predict_delta
from .tensor.checkpoint import fingerprint as params_fingerprint

MAGIC = b"ATDNMAP1"
VERSION = 1
_HEAD = struct.Struct("<8sIIQ32s")


class ChecksumError(FormatError):
    pass


class EmptyMapError(ValueError):
    pass


class FlowUnavailableError(LookupError):
    pass


@dataclass(frozen=True)
class KeyframeRecord:
    frame_id: int
    embedding: Embedding
    pose: Pose


@dataclass(frozen=True, eq=False)
class EmbeddingMap:
    frame_ids: np.ndarray       # (n,) int64, strictly increasing
    embeddings: np.ndarray      # (n, D) float32
    rotations: np.ndarray       # (n, 3, 3)
    translations: np.ndarray    # (n, 3)
    fingerprint: bytes = bytes(32)

    def __post_init__(self):
        ids = np.asarray(self.frame_ids, dtype=np.int64).reshape(-1)
        emb = np.asarray(self.embeddings, dtype=np.float32)
        if ids.size == 0:
            raise EmptyMapError("map has no keyframes")
        if emb.ndim != 2 or emb.shape[0] != ids.size or emb.shape[1] == 0:
            raise ValueError("embeddings must be (n_records, D) with D > 0")
        if np.any(np.diff(ids) <= 0):
            raise ValueError("keyframe ids must be strictly increasing")
        if len(self.fingerprint) != 32:
            raise ValueError("fingerprint must be 32 bytes")
        rot = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 3, 3)
        tr = np.asarray(self.translations, dtype=np.float64).reshape(-1, 3)
        for a in (ids, emb, rot, tr):
            a.flags.writeable = False
        object.__setattr__(self, "frame_ids", ids)
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "rotations", rot)
        object.__setattr__(self, "translations", tr)
        object.__setattr__(self, "fingerprint", bytes(self.fingerprint))

    @classmethod
    def from_records(cls, records, fingerprint=bytes(32)):
        records = list(records)
        if not records:
            raise EmptyMapError("map has no keyframes")
        dims = {r.embedding.dim for r in records}
        if len(dims) != 1:
            raise ValueError(f"mixed embedding dimensions {sorted(dims)}")
        return cls(np.array([r.frame_id for r in records]),
                   np.stack([r.embedding.values for r in records]),
                   np.array([r.pose.rotation for r in records]),
                   np.array([r.pose.translation for r in records]),
                   fingerprint)

    def __len__(self):
        return len(self.frame_ids)

    @property
    def dim(self):
        return self.embeddings.shape[1]

    def index_of(self, frame_id):
        i = int(np.searchsorted(self.frame_ids, frame_id))
        if i >= len(self) or self.frame_ids[i] != frame_id:
            raise KeyError(frame_id)
        return i

    def pose_of(self, frame_id):
        i = self.index_of(frame_id)
        return Pose(self.rotations[i], self.translations[i])

    def record(self, i):
        fid = int(self.frame_ids[i])
        return KeyframeRecord(fid, Embedding(self.embeddings[i], fid),
                              Pose(self.rotations[i], self.translations[i]))

    def records(self):
        return [self.record(i) for i in range(len(self))]

    def __eq__(self, other):
        return isinstance(other, EmbeddingMap) and map_bytes(self) == map_bytes(other)

    __hash__ = None


def build_map(model, keyframes, fingerprint=None):
    """Embed every keyframe (a ``Frame`` with a pose) with the deterministic head."""
    keyframes = sorted(keyframes, key=lambda f: f.frame_id)
    if not keyframes:
        raise EmptyMapError("no keyframes to map")
    if any(f.pose is None for f in keyframes):
        raise ValueError("every keyframe needs a pose")
    if fingerprint is None:
        fingerprint = params_fingerprint(model.state_dict())
    records = [KeyframeRecord(f.frame_id, encode(model, f.image, f.frame_id), f.pose)
               for f in keyframes]
    return EmbeddingMap.from_records(records, fingerprint)


# ------------------------------------------------------------------ query

@dataclass(frozen=True)
class ZScore:
    k: float = 2.0


@dataclass(frozen=True)
class Bottom:
    q: float

    def __post_init__(self):
        if not 0.0 < self.q <= 1.0:
            raise ValueError("bottom quantile must be in (0, 1]")


def parse_candidate_policy(text):
    kind, _, arg = text.strip().partition(":")
    if kind == "zscore":
        return ZScore(float(arg) if arg else 2.0)
    if kind == "bottom" and arg:
        return Bottom(float(arg))
    raise ValueError(f"bad candidate policy {text!r}")


def candidates(profile, policy=ZScore()):
    """Indices of outlier-low distances; the argmin is always included."""
    d = np.asarray(profile, dtype=np.float64)
    if d.size == 0:
        raise ValueError("empty distance profile")
    if isinstance(policy, str):
        policy = parse_candidate_policy(policy)
    if isinstance(policy, ZScore):
        chosen = set(np.flatnonzero(d < d.mean() - policy.k * d.std()).tolist())
    else:
        n = min(d.size, math.ceil(policy.q * d.size))
        chosen = set(np.argsort(d, kind="stable")[:n].tolist())
    chosen.add(int(np.argmin(d)))
    return tuple(sorted(chosen))


@dataclass(frozen=True, eq=False)
class RelocResult:
    best_id: int
    best_distance: float
    profile: np.ndarray
    frame_ids: np.ndarray
    candidates: tuple
    refined: Pose | None = None


def distance_profile(emap, values, metric="l2"):
    diff = emap.embeddings.astype(np.float64) - np.asarray(values, dtype=np.float64)
    if metric == "l2":
        return np.sqrt(np.sum(diff * diff, axis=1))
    if metric == "l1":
        return np.sum(np.abs(diff), axis=1)
    raise ValueError(f"unknown metric {metric!r}")


def query_embedding(emap, emb, policy=ZScore(), metric="l2"):
    if len(emap) == 0:
        raise EmptyMapError("empty map")
    values = emb.values if isinstance(emb, Embedding) else np.asarray(emb, dtype=np.float32)
    if values.shape != (emap.dim,):
        raise ValueError(f"embedding dimension {values.shape} != map dimension {emap.dim}")
    profile = distance_profile(emap, values, metric)
    i = int(np.argmin(profile))
    return RelocResult(int(emap.frame_ids[i]), float(profile[i]), profile, emap.frame_ids,
                       candidates(profile, policy))


def query(emap, model, image, policy=ZScore(), metric="l2"):
    return query_embedding(emap, encode(model, image), policy, metric)


# -------------------------------------------------------------- refinement

class OracleFlowSource:
    """Closed-form flow from the synthetic world; needs the query's true pose."""

    def __init__(self, world, emap):
        self.world = world
        self.emap = emap

    def __call__(self, keyframe_id, query_frame):
        if query_frame.pose is None:
            raise FlowUnavailableError("oracle flow needs the query pose")
        return flow_oracle(self.world, self.emap.pose_of(keyframe_id), query_frame.pose)


class StoredFlowSource:
    """Precomputed flows keyed by (keyframe id, query id)."""

    def __init__(self, flows):
        self.flows = dict(flows)

    def __call__(self, keyframe_id, query_frame):
        try:
            return self.flows[(int(keyframe_id), int(query_frame.frame_id))]
        except KeyError:
            raise FlowUnavailableError(
                f"no flow stored for keyframe {keyframe_id} -> frame {query_frame.frame_id}") from None


class DirectoryFlowSource:
    """Flow files ``pair_<keyframe>_<query>.flo`` in one directory."""

    def __init__(self, directory):
        self.directory = directory

    def __call__(self, keyframe_id, query_frame):
        p = os.path.join(self.directory, f"pair_{int(keyframe_id):06d}_{int(query_frame.frame_id):06d}.flo")
        if not os.path.exists(p):
            raise FlowUnavailableError(f"no stored flow {p}")
        return read_flow(p)


def refine(emap, vo_model, flow_source, best_id, query_frame):
    """VO estimate of the motion from keyframe ``best_id`` to the query."""
    if flow_source is None:
        raise FlowUnavailableError("no flow source given")
    emap.index_of(best_id)
    return predict_delta(vo_model, flow_source(best_id, query_frame)).to_pose()


def refined_pose(emap, best_id, delta):
    return compose(emap.pose_of(best_id), delta)


def match_search(emap, vo_model, flow_source, result, query_frame):
    """One round over the candidates: keep the one whose VO delta is shortest."""
    best = None
    for i in result.candidates:
        fid = int(emap.frame_ids[i])
        delta = refine(emap, vo_model, flow_source, fid, query_frame)
        norm = float(np.linalg.norm(delta.translation))
        if best is None or norm < best[0]:
            best = (norm, fid, delta)
    _, fid, delta = best
    return replace(result, best_id=fid, best_distance=float(result.profile[emap.index_of(fid)]),
                   refined=refined_pose(emap, fid, delta))


# ------------------------------------------------------------- persistence

def _record_dtype(d):
    return np.dtype([("frame_id", "<u8"), ("pose", "<f8", (12,)), ("embedding", "<f4", (d,))])


def map_bytes(emap):
    rec = np.zeros(len(emap), dtype=_record_dtype(emap.dim))
    rec["frame_id"] = emap.frame_ids
    rec["pose"] = np.concatenate([emap.rotations, emap.translations[:, :, None]], axis=2).reshape(-1, 12)
    rec["embedding"] = emap.embeddings
    body = _HEAD.pack(MAGIC, VERSION, emap.dim, len(emap), emap.fingerprint) + rec.tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def save_map(emap, path):
    data = map_bytes(emap)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def parse_map(buf, expected_fingerprint=None):
    if len(buf) < 8 or buf[:8] != MAGIC:
        raise FormatError("bad map magic")
    if len(buf) < _HEAD.size:
        raise TruncatedError("map truncated inside header")
    _, version, d, count, fp = _HEAD.unpack_from(buf)
    if version != VERSION:
        raise FormatError(f"unsupported map version {version}")
    dtype = _record_dtype(d)
    need = _HEAD.size + count * dtype.itemsize + 4
    if len(buf) < need:
        raise TruncatedError(f"map truncated: {len(buf)} of {need} bytes")
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes after map")
    (crc,) = struct.unpack_from("<I", buf, need - 4)
    if zlib.crc32(buf[:need - 4]) != crc:
        raise ChecksumError("map checksum mismatch")
    if expected_fingerprint is not None and fp != expected_fingerprint:
        raise ChecksumError("map was built by a different model")
    rec = np.frombuffer(buf, dtype=dtype, count=count, offset=_HEAD.size)
    pose = rec["pose"].reshape(-1, 3, 4)
    return EmbeddingMap(rec["frame_id"].astype(np.int64), rec["embedding"].copy(),
                        pose[:, :, :3].copy(), pose[:, :, 3].copy(), fp)


def load_map(path, expected_fingerprint=None, max_bytes=MAX_BYTES):
    if os.path.getsize(path) > max_bytes:
        raise SizeLimitError(f"{path} exceeds cap {max_bytes}")
    with open(path, "rb") as fh:
        return parse_map(fh.read(), expected_fingerprint)
