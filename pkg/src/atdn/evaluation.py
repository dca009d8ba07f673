"""Trajectory metrics, figure data and the comparison table."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .geometry import Trajectory, compose, inverse

KITTI_LENGTHS = tuple(float(x) for x in range(100, 801, 100))
DESK_LENGTHS = tuple(float(x) for x in range(10, 81, 10))
HIST_BINS = 50


@dataclass(frozen=True)
class MetricResult:
    translation_error: float   # percent
    rotation_error: float      # deg / m
    breakdown: dict = field(default_factory=dict)  # length -> (percent, deg/m)
    count: int = 0
    lengths: tuple = KITTI_LENGTHS

    @property
    def empty(self):
        return self.count == 0

    def to_text(self):
        lines = [f"translation_error_percent={self.translation_error!r}",
                 f"rotation_error_deg_per_m={self.rotation_error!r}",
                 f"subsequences={self.count}",
                 f"lengths={','.join(repr(x) for x in self.lengths)}"]
        for length, (t, r) in sorted(self.breakdown.items()):
            lines.append(f"length.{length!r}={t!r},{r!r}")
        return "\n".join(lines) + "\n"


def common_frames(gt, est):
    ids = np.intersect1d(gt.frame_ids, est.frame_ids)
    if ids.size == 0:
        raise ValueError("trajectories share no frame ids")
    return gt.select(ids), est.select(ids)


def align_start(gt, est):
    """Left-multiply ``est`` so its first pose equals the first pose of ``gt``."""
    return est.left_multiplied(compose(gt[0], inverse(est[0])))


def kitti_errors(gt, est, lengths=KITTI_LENGTHS, step=1):
    """Average relative errors over every (start frame, length) subsequence."""
    gt, est = common_frames(gt, est)
    lengths = tuple(float(x) for x in lengths)
    t_err, r_err, valid = kernels.segment_errors(
        gt.rotations, gt.translations, est.rotations, est.translations,
        gt.path_lengths(), np.asarray(lengths, dtype=np.float64), step)
    count = int(valid.sum())
    if count == 0:
        return MetricResult(math.nan, math.nan, {}, 0, lengths)
    breakdown = {}
    for li, length in enumerate(lengths):
        ok = valid[:, li]
        if ok.any():
            breakdown[length] = (100.0 * float(t_err[ok, li].mean()),
                                 math.degrees(float(r_err[ok, li].mean())))
    return MetricResult(100.0 * float(t_err[valid].mean()),
                        math.degrees(float(r_err[valid].mean())),
                        breakdown, count, lengths)


def _open_sink(sink):
    if isinstance(sink, (str, bytes)) or hasattr(sink, "__fspath__"):
        return open(sink, "w", newline="", encoding="utf-8"), True
    return sink, False


def _write_text(sink, text):
    fh, close = _open_sink(sink)
    try:
        fh.write(text)
    finally:
        if close:
            fh.close()


def emit_axes_csv(gt, est, sink):
    gt, est = common_frames(gt, est)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame", "gt_x", "gt_y", "gt_z", "est_x", "est_y", "est_z"])
    rows = []
    for fid, a, b in zip(gt.frame_ids, gt.translations, est.translations):
        row = [int(fid), *(float(v) for v in a), *(float(v) for v in b)]
        rows.append(row)
        w.writerow([row[0]] + [repr(v) for v in row[1:]])
    _write_text(sink, buf.getvalue())
    return rows


_AXES = {"x": 0, "y": 1, "z": 2}


def emit_xz_svg(gt, est, sink, axes="xz", size=480, margin=20):
    """Both paths as SVG polylines on one uniform scale; ``axes`` picks the plane."""
    if len(gt) == 0 or len(est) == 0:
        raise ValueError("empty trajectory")
    i, j = (_AXES[a] for a in axes)
    paths = [t.translations[:, [i, j]] for t in (gt, est)]
    pts = np.concatenate(paths)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = float(max(hi - lo)) or 1.0
    scale = (size - 2 * margin) / span

    def to_px(p):
        x = margin + (p[:, 0] - lo[0]) * scale
        y = size - margin - (p[:, 1] - lo[1]) * scale  # svg y points down
        return " ".join(f"{a:.3f},{b:.3f}" for a, b in zip(x, y))

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for label, colour, p in zip(("gt", "pred"), ("black", "red"), paths):
        out.append(f'<polyline id="{label}" fill="none" stroke="{colour}" stroke-width="1.5" '
                   f'points="{to_px(p)}"/>')
    out.append(f'<text x="{margin}" y="{margin - 6}" font-size="12" fill="black">gt</text>')
    out.append(f'<text x="{margin + 30}" y="{margin - 6}" font-size="12" fill="red">pred</text>')
    out.append("</svg>")
    text = "\n".join(out) + "\n"
    _write_text(sink, text)
    return text


def distance_histogram(profile, bins=HIST_BINS):
    d = np.asarray(profile, dtype=np.float64)
    top = float(d.max())
    if top <= 0:
        top = 1.0
    counts, edges = np.histogram(d, bins=bins, range=(0.0, top))
    return counts, edges


def emit_distance_profile(result, curve_sink, hist_sink, bins=HIST_BINS):
    """Curve (keyframe index, distance) and an equal-width histogram over [0, max]."""
    profile = np.asarray(getattr(result, "profile", result), dtype=np.float64)
    if profile.size == 0:
        raise ValueError("empty distance profile")
    ids = getattr(result, "frame_ids", None)
    ids = range(len(profile)) if ids is None else ids
    lines = ["index,frame_id,distance"]
    lines += [f"{k},{int(f)},{float(d)!r}" for k, (f, d) in enumerate(zip(ids, profile))]
    _write_text(curve_sink, "\n".join(lines) + "\n")
    counts, edges = distance_histogram(profile, bins)
    lines = ["bin,lo,hi,count"]
    lines += [f"{k},{float(edges[k])!r},{float(edges[k + 1])!r},{int(c)}" for k, c in enumerate(counts)]
    _write_text(hist_sink, "\n".join(lines) + "\n")
    return counts


# ------------------------------------------------------------------ report

@dataclass(frozen=True)
class ReportRow:
    method: str
    translation: str = ""   # kept as text so bundled figures render verbatim
    rotation: str = ""
    runtime: str = ""
    environment: str = ""

    @classmethod
    def measured(cls, method, translation=None, rotation=None, runtime=None, environment=""):
        def fmt(v):
            if v is None or (isinstance(v, float) and math.isnan(v)):
                return ""
            if v < 0:
                raise ValueError(f"{method}: negative value {v}")
            return f"{v:.4g}"
        return cls(method, fmt(translation), fmt(rotation), fmt(runtime), environment)


BASELINES = (
    ReportRow("ORB-SLAM 2*", "1.15", "0.0027", "0.06", "2 CPU cores @ >3.5 GHz"),
    ReportRow("ESVO*", "1.42", "0.0048", "1", "1 CPU core @ 2.5 GHz"),
    ReportRow("D3VO", "0.88", "0.0021", "0.1", "1 CPU core @ 2.5 GHz"),
    ReportRow("GenPa-SLAM", "3.48", "0.121", "0.1", "GPU @ 2.5 GHz"),
    ReportRow("Deep-AVO", "4.1", "0.0125", "0.01", "GPU @ 3.0 GHz"),
    ReportRow("CUDA-Ego-Motion", "4.36", "0.0052", "0.001", "GPU @ 2.5 GHz"),
    ReportRow("D3DLO", "5.4", "0.0154", "0.1", "GPU @ 2.5 GHz"),
    ReportRow("Ours (w/ OF)", "4.4016", "0.0176", "0.27", "GPU @ 2.8 GHz"),
    ReportRow("Ours (w/o OF)", "", "", "0.006", "GPU @ 2.8 GHz"),
)

HEADER = "| Method | Translation [%] ↓ | Rotation [deg/m] ↓ | Runtime [s] ↓ | Environment |"


def format_row(row):
    cells = (row.method, row.translation or "-", row.rotation or "-", row.runtime or "-",
             row.environment or "-")
    return "| " + " | ".join(cells) + " |"


def table1_report(measured=(), sink=None, lengths=KITTI_LENGTHS):
    """Bundled baselines followed by measured rows (↓: lower is better)."""
    lines = []
    if tuple(lengths) != KITTI_LENGTHS:
        lines.append("Note: measured rows use subsequence lengths "
                     + ", ".join(f"{x:g}" for x in lengths)
                     + " m instead of the official 100-800 m set.")
        lines.append("")
    lines += [HEADER, "|---|---|---|---|---|"]
    lines += [format_row(r) for r in BASELINES]
    lines += [format_row(r) for r in measured]
    text = "\n".join(lines) + "\n"
    if sink is not None:
        _write_text(sink, text)
    return text
