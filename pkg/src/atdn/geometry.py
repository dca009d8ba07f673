"""SE(3) poses stored as rotation matrix + translation, in float64."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ORTHO_TOL = 1e-9
RENORM_DRIFT = 1e-12


class InvalidRotationError(ValueError):
    pass


def rotation_drift(r):
    """Largest deviation of ``r`` from an orthonormal, det=+1 matrix."""
    r = np.asarray(r, dtype=np.float64)
    return max(float(np.max(np.abs(r.T @ r - np.eye(3)))), abs(float(np.linalg.det(r)) - 1.0))


def orthonormalize(r):
    """Gram-Schmidt on the columns of ``r``; the third column is re-derived by a cross product."""
    r = np.asarray(r, dtype=np.float64)
    c0 = r[:, 0] / np.linalg.norm(r[:, 0])
    c1 = r[:, 1] - c0 * (c0 @ r[:, 1])
    c1 = c1 / np.linalg.norm(c1)
    c2 = np.cross(c0, c1)
    return np.stack([c0, c1, c2], axis=1)


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform mapping points of the local frame into the parent frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = _frozen(self.rotation)
        t = _frozen(self.translation).reshape(3)
        if r.shape != (3, 3):
            raise InvalidRotationError(f"rotation must be 3x3, got {r.shape}")
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(t)):
            raise InvalidRotationError("pose contains non-finite values")
        drift = rotation_drift(r)
        if drift >= ORTHO_TOL:
            raise InvalidRotationError(f"rotation is not orthonormal (drift {drift:.3e})")
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m):
        """Build from a 3x4 ``[R|t]`` or 4x4 homogeneous matrix."""
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_translation(cls, t):
        return cls(np.eye(3), t)

    def as_matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation)

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))

    def allclose(self, other, atol=1e-9):
        return bool(np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
                    and np.allclose(self.translation, other.translation, rtol=0, atol=atol))

    def __matmul__(self, other):
        return compose(self, other)


# A relative pose carries the transform from frame i to frame j; same algebra.
RelativePose = Pose


def _maybe_renormalize(r):
    if float(np.max(np.abs(r.T @ r - np.eye(3)))) > RENORM_DRIFT:
        return orthonormalize(r)
    return r


def compose(a, b):
    """``a`` followed by ``b`` expressed in ``a``'s frame."""
    r = _maybe_renormalize(a.rotation @ b.rotation)
    return Pose(r, a.rotation @ b.translation + a.translation)


def inverse(p):
    rt = p.rotation.T
    return Pose(rt, -(rt @ p.translation))


def relative(a, b):
    """``inverse(a) ∘ b``, evaluated without forming the inverse."""
    rt = a.rotation.T
    r = _maybe_renormalize(rt @ b.rotation)
    return Pose(r, rt @ (b.translation - a.translation))


def rotation_angle(r):
    """Rotation angle in [0, pi].

    Uses atan2(sin, cos) with sin from the skew part and cos from the trace;
    this equals arccos((tr - 1) / 2) for orthonormal input but does not lose
    precision near 0 and pi.
    """
    r = np.asarray(r, dtype=np.float64)
    c = (r[0, 0] + r[1, 1] + r[2, 2] - 1.0) * 0.5
    v = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return float(np.arctan2(np.sqrt(v @ v), c))


def hat(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def axis_angle_to_matrix(r):
    r = np.asarray(r, dtype=np.float64).reshape(3)
    theta2 = float(r @ r)
    k = hat(r)
    if theta2 < 1e-12:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        theta = np.sqrt(theta2)
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * k + b * (k @ k)


def matrix_to_axis_angle(r):
    """Principal axis-angle vector (norm in [0, pi]) of a rotation matrix."""
    r = np.asarray(r, dtype=np.float64)
    theta = rotation_angle(r)
    v = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if theta < 1e-6:
        return v * (1.0 + theta * theta / 6.0)
    if np.pi - theta > 1e-6:
        return v * (theta / np.sin(theta))
    # near pi the skew part vanishes; take the axis from the symmetric part
    b = (r + np.eye(3)) * 0.5
    i = int(np.argmax(np.diag(b)))
    axis = b[:, i] / np.sqrt(b[i, i])
    if v @ axis < 0:
        axis = -axis
    return axis * theta


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Poses with strictly increasing integer frame ids, stacked as arrays."""

    frame_ids: np.ndarray
    rotations: np.ndarray
    translations: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.frame_ids, dtype=np.int64).reshape(-1)
        rot = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 3, 3)
        tr = np.asarray(self.translations, dtype=np.float64).reshape(-1, 3)
        if ids.size == 0:
            raise ValueError("trajectory must be non-empty")
        if not (len(ids) == len(rot) == len(tr)):
            raise ValueError("frame ids, rotations and translations differ in length")
        if np.any(np.diff(ids) <= 0):
            raise ValueError("frame ids must be strictly increasing")
        for a in (ids, rot, tr):
            a.flags.writeable = False
        object.__setattr__(self, "frame_ids", ids)
        object.__setattr__(self, "rotations", rot)
        object.__setattr__(self, "translations", tr)

    @classmethod
    def from_poses(cls, poses, frame_ids=None):
        poses = list(poses)
        if frame_ids is None:
            frame_ids = np.arange(len(poses))
        return cls(np.asarray(frame_ids),
                   np.array([p.rotation for p in poses]).reshape(-1, 3, 3),
                   np.array([p.translation for p in poses]).reshape(-1, 3))

    def __len__(self):
        return len(self.frame_ids)

    def __getitem__(self, i):
        return Pose(self.rotations[i], self.translations[i])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def poses(self):
        return list(self)

    def index_of(self, frame_id):
        i = int(np.searchsorted(self.frame_ids, frame_id))
        if i >= len(self) or self.frame_ids[i] != frame_id:
            raise KeyError(frame_id)
        return i

    def pose_of(self, frame_id):
        return self[self.index_of(frame_id)]

    def relatives(self):
        """Relative poses between consecutive entries."""
        return [relative(self[i], self[i + 1]) for i in range(len(self) - 1)]

    def path_lengths(self):
        """Cumulative travelled distance at each entry, starting at 0."""
        steps = np.linalg.norm(np.diff(self.translations, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])

    def left_multiplied(self, p):
        return Trajectory.from_poses([compose(p, q) for q in self], self.frame_ids)

    def select(self, frame_ids):
        idx = [self.index_of(f) for f in frame_ids]
        return Trajectory(self.frame_ids[idx], self.rotations[idx], self.translations[idx])
