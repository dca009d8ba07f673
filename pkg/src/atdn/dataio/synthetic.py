"""Synthetic sequences: a pinhole camera moving over a textured plane.

The world frame is the frame of a camera with identity pose. The textured
plane is ``z = depth`` in that frame and the default trajectories move the
camera parallel to it, turning about the optical axis. Because the scene is
a single plane, the flow between any two views is known in closed form;
:func:`flow_oracle` stands in for a learned flow network.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import kernels
from ..geometry import Pose, Trajectory
from .formats import FlowField, Frame


class DegenerateWorldError(ValueError):
    pass


class PointBehindCameraError(ValueError):
    pass


TRAJECTORY_KINDS = ("stationary", "circle", "line", "waypoints")


@dataclass(frozen=True)
class SyntheticWorld:
    n_frames: int = 500
    trajectory: str = "circle"
    depth: float = 4.0
    focal: float = 32.0
    height: int = 64
    width: int = 64
    cx: float | None = None
    cy: float | None = None
    radius: float = 20.0
    speed: float = 0.25
    direction: tuple = (1.0, 0.0, 0.0)
    waypoints: tuple = ()
    closed: bool = True
    texture_scale: float = 2.0
    octaves: int = 3

    def __post_init__(self):
        problems = []
        if not self.depth > 0:
            problems.append(f"plane depth must be > 0 (got {self.depth})")
        if not self.focal > 0:
            problems.append(f"focal length must be > 0 (got {self.focal})")
        if self.n_frames < 3:
            problems.append(f"need at least 3 frames (got {self.n_frames})")
        if self.height <= 0 or self.width <= 0:
            problems.append("image size must be positive")
        if self.trajectory not in TRAJECTORY_KINDS:
            problems.append(f"unknown trajectory kind {self.trajectory!r}")
        if self.trajectory == "circle" and not self.radius > 0:
            problems.append("circle radius must be > 0")
        if self.trajectory == "waypoints" and len(self.waypoints) < 2:
            problems.append("waypoint trajectory needs at least 2 waypoints")
        if not self.texture_scale > 0:
            problems.append("texture scale must be > 0")
        if problems:
            raise DegenerateWorldError("; ".join(problems))

    @property
    def principal_point(self):
        cx = (self.width - 1) / 2.0 if self.cx is None else self.cx
        cy = (self.height - 1) / 2.0 if self.cy is None else self.cy
        return cx, cy


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def world_trajectory(world):
    n = world.n_frames
    ids = np.arange(n)
    rot = np.tile(np.eye(3), (n, 1, 1))
    tr = np.zeros((n, 3))
    if world.trajectory == "circle":
        r = world.radius
        phi = 2.0 * np.pi * ids / n
        tr[:, 0] = -r + r * np.cos(phi)
        tr[:, 1] = r * np.sin(phi)
        rot = np.array([_rz(a) for a in phi])
    elif world.trajectory == "line":
        d = np.asarray(world.direction, dtype=np.float64)
        d = d / np.linalg.norm(d)
        tr = ids[:, None] * world.speed * d[None, :]
    elif world.trajectory == "waypoints":
        tr, heading = _walk_waypoints(np.asarray(world.waypoints, dtype=np.float64), n, world.closed)
        rot = np.array([_rz(a) for a in heading])
    return Trajectory(ids, rot, tr)


def _walk_waypoints(wp, n, closed):
    pts = np.vstack([wp, wp[:1]]) if closed else wp
    seg = np.diff(pts, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    if np.any(seg_len == 0):
        raise DegenerateWorldError("consecutive waypoints coincide")
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]
    s = total * np.arange(n) / (n if closed else n - 1)
    k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    frac = (s - cum[k]) / seg_len[k]
    xy = pts[k] + frac[:, None] * seg[k]
    heading = np.arctan2(seg[k, 1], seg[k, 0])
    tr = np.zeros((n, 3))
    tr[:, :2] = xy
    return tr, heading


def _pixel_grid(world):
    v, u = np.mgrid[0:world.height, 0:world.width].astype(np.float64)
    return u, v


def backproject(world, pose, u, v):
    """World points on the plane seen through pixels ``(u, v)``."""
    cx, cy = world.principal_point
    d = np.stack([(u - cx) / world.focal, (v - cy) / world.focal, np.ones_like(u)], axis=-1)
    dw = d @ pose.rotation.T
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (world.depth - pose.translation[2]) / dw[..., 2]
    if not np.all(np.isfinite(s)) or np.any(s <= 0):
        raise PointBehindCameraError("some pixel rays do not hit the plane in front of the camera")
    return pose.translation + s[..., None] * dw


def project(world, pose, pts):
    cx, cy = world.principal_point
    pc = (pts - pose.translation) @ pose.rotation
    if np.any(pc[..., 2] <= 0):
        raise PointBehindCameraError("plane point behind the camera")
    return world.focal * pc[..., 0] / pc[..., 2] + cx, world.focal * pc[..., 1] / pc[..., 2] + cy


def render(world, pose, seed):
    u, v = _pixel_grid(world)
    pts = backproject(world, pose, u, v)
    scale = world.texture_scale
    img = kernels.value_noise(pts[..., 0] / scale, pts[..., 1] / scale, seed, world.octaves)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_sequence(world, seed):
    """Render every frame of ``world``; returns ``(frames, trajectory)``."""
    traj = world_trajectory(world)
    frames = [Frame(int(fid), render(world, traj[i], seed), traj[i])
              for i, fid in enumerate(traj.frame_ids)]
    return frames, traj


def flow_at(world, pose_i, pose_j, u, v):
    """Displacement of pixels ``(u, v)`` of view i when the plane is seen from view j."""
    pts = backproject(world, pose_i, u, v)
    uj, vj = project(world, pose_j, pts)
    ui, vi = project(world, pose_i, pts)
    return uj - ui, vj - vi


def flow_oracle(world, pose_i, pose_j):
    u, v = _pixel_grid(world)
    du, dv = flow_at(world, pose_i, pose_j, u, v)
    return FlowField(np.stack([du, dv], axis=-1).astype(np.float32))
