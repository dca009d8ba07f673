"""Flat ``key = value`` run configuration.

Keys are dotted (``vo.stage2.alpha``). Every problem in a file is collected
before :class:`ConfigError` is raised; unknown keys only produce warnings.
"""
from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field

from .dataio.synthetic import SyntheticWorld
from .evaluation import KITTI_LENGTHS
from .mapping import MapConfig, MapTrainConfig, parse_policy
from .odometry import DEFAULT_STAGES, CurriculumPlan, Stage, TrainOptions, VoConfig
from .relocalization import parse_candidate_policy


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


def _bool(s):
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s):
    vals = tuple(float(x) for x in s.split(",") if x.strip())
    if not vals:
        raise ValueError("empty list")
    return vals


def _ints(s):
    return tuple(int(x) for x in s.split(",") if x.strip())


def _positive(v):
    if not v > 0:
        raise ValueError("must be > 0")
    return v


def _non_negative(v):
    if not v >= 0:
        raise ValueError("must be >= 0")
    return v


def _pos_int(s):
    return _positive(int(s))


def _pos_float(s):
    return _positive(float(s))


def _nn_float(s):
    return _non_negative(float(s))


def _unit(s):
    v = float(s)
    if not 0.0 <= v <= 1.0:
        raise ValueError("must be in [0, 1]")
    return v


def _choice(*options):
    def conv(s):
        if s not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return s
    return conv


def _policy(s):
    parse_policy(s)
    return s


def _cand(s):
    parse_candidate_policy(s)
    return s


def _lengths(s):
    vals = _floats(s)
    if any(not v > 0 for v in vals):
        raise ValueError("lengths must be > 0")
    return vals


def _axes(s):
    if len(s) != 2 or s[0] == s[1] or any(c not in "xyz" for c in s):
        raise ValueError("two distinct letters from x, y, z")
    return s


PATH_KEYS = ("sequence_dir", "pose_file", "flow_dir", "world_file", "vo_checkpoint",
             "map_checkpoint", "map_file", "est_pose_file", "metrics_file")

_W = SyntheticWorld()
_V = VoConfig()
_T = TrainOptions()
_P = CurriculumPlan()
_M = MapConfig()
_MT = MapTrainConfig()

# key -> (converter, default); None default means "unset"
SCHEMA = {
    "seed": (int, None),
    **{f"paths.{k}": (str, None) for k in PATH_KEYS},
    "synth.n_frames": (_pos_int, _W.n_frames),
    "synth.trajectory": (_choice("stationary", "circle", "line"), _W.trajectory),
    "synth.depth": (_pos_float, _W.depth),
    "synth.focal": (_pos_float, _W.focal),
    "synth.height": (_pos_int, _W.height),
    "synth.width": (_pos_int, _W.width),
    "synth.radius": (_pos_float, _W.radius),
    "synth.speed": (_nn_float, _W.speed),
    "synth.texture_scale": (_pos_float, _W.texture_scale),
    "synth.octaves": (_pos_int, _W.octaves),
    "vo.pool": (_pos_int, _V.pool),
    "vo.channels": (_ints, _V.channels),
    "vo.hidden": (_pos_int, _V.hidden),
    "vo.kappa": (_nn_float, _T.kappa),
    "vo.batch_size": (_pos_int, _T.batch_size),
    "vo.weight_decay": (_nn_float, _T.weight_decay),
    "vo.max_faults": (int, _T.max_faults),
    "vo.lr_max": (_nn_float, _P.lr_max),
    "vo.lr_min": (_nn_float, _P.lr_min),
    "vo.n_stages": (_pos_int, len(DEFAULT_STAGES)),
    "map.latent_dim": (_pos_int, _M.latent_dim),
    "map.channels": (_ints, _M.channels),
    "map.variational": (_bool, _M.variational),
    "map.unet": (_bool, _M.unet),
    "map.epochs": (_pos_int, _MT.epochs),
    "map.batch_size": (_pos_int, _MT.batch_size),
    "map.lr_max": (_nn_float, _MT.lr_max),
    "map.lr_min": (_nn_float, _MT.lr_min),
    "map.beta_kl": (_nn_float, _MT.beta_kl),
    "map.lambda_edl": (_nn_float, _MT.lambda_edl),
    "map.edl_only": (_bool, _MT.edl_only),
    "map.triple_stride": (_pos_int, _MT.triple_stride),
    "map.max_faults": (int, _MT.max_faults),
    "keyframe.policy": (_policy, "stride:5"),
    "reloc.candidates": (_cand, "zscore:2"),
    "reloc.metric": (_choice("l2", "l1"), "l2"),
    "reloc.refine": (_bool, True),
    "eval.lengths": (_lengths, KITTI_LENGTHS),
    "eval.svg_axes": (_axes, "xz"),
    "eval.hist_bins": (_pos_int, 50),
}
_STAGE_FIELDS = {"alpha": _unit, "epochs": _pos_int, "window": _pos_int}


def parse_text(text):
    """Raw key -> string mapping plus per-line syntax errors."""
    raw, errors = {}, []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key = key.strip()
        if not sep or not key:
            errors.append(f"line {n}: expected 'key = value'")
            continue
        if key in raw:
            errors.append(f"{key}: set twice (line {n})")
        raw[key] = val.strip()
    return raw, errors


@dataclass(frozen=True)
class RunConfig:
    values: dict
    warnings: tuple = ()

    def __getitem__(self, key):
        return self.values[key]

    @property
    def seed(self):
        return self.values["seed"]

    def path(self, name):
        return self.values[f"paths.{name}"]

    def canonical(self):
        return "".join(f"{k}={self.values[k]!r}\n" for k in sorted(self.values))

    @property
    def hash(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def world(self):
        v = self.values
        return SyntheticWorld(
            n_frames=v["synth.n_frames"], trajectory=v["synth.trajectory"], depth=v["synth.depth"],
            focal=v["synth.focal"], height=v["synth.height"], width=v["synth.width"],
            radius=v["synth.radius"], speed=v["synth.speed"],
            texture_scale=v["synth.texture_scale"], octaves=v["synth.octaves"])

    def vo_config(self):
        v = self.values
        return VoConfig(flow_height=v["synth.height"], flow_width=v["synth.width"],
                        pool=v["vo.pool"], channels=v["vo.channels"], hidden=v["vo.hidden"])

    def plan(self):
        v = self.values
        stages = tuple(Stage(*(v[f"vo.stage{i}.{f}"] for f in ("alpha", "epochs", "window")))
                       for i in range(1, v["vo.n_stages"] + 1))
        return CurriculumPlan(stages, v["vo.lr_max"], v["vo.lr_min"])

    def vo_options(self):
        v = self.values
        return TrainOptions(v["vo.kappa"], v["vo.batch_size"], v["vo.weight_decay"], v["vo.max_faults"])

    def map_config(self):
        v = self.values
        return MapConfig(input_size=v["synth.height"], channels=v["map.channels"],
                         latent_dim=v["map.latent_dim"], variational=v["map.variational"],
                         unet=v["map.unet"])

    def map_train(self):
        v = self.values
        return MapTrainConfig(v["map.epochs"], v["map.batch_size"], v["map.lr_max"], v["map.lr_min"],
                              v["map.beta_kl"], v["map.lambda_edl"], v["map.edl_only"], self.seed,
                              v["map.triple_stride"], v["map.max_faults"])


def _check_objects(cfg, errors):
    """Cross-key constraints, checked by building the typed objects."""
    builders = (("synth.*", cfg.world), ("vo.*", cfg.vo_config), ("vo.stage*", cfg.plan),
                ("map.*", cfg.map_config), ("map.*", cfg.map_train))
    for label, build in builders:
        try:
            build()
        except (ValueError, TypeError) as exc:
            errors.append(f"{label}: {exc}")
    v = cfg.values
    if v["vo.lr_min"] > v["vo.lr_max"]:
        errors.append("vo.lr_min: must not exceed vo.lr_max")
    if v["map.lr_min"] > v["map.lr_max"]:
        errors.append("map.lr_min: must not exceed map.lr_max")
    h, w = v["synth.height"], v["synth.width"]
    if h != w:
        errors.append("synth.width: the mapping model needs square images")
    if h % (4 * v["vo.pool"]) or w % (4 * v["vo.pool"]):
        errors.append("vo.pool: image size must be divisible by 4 * pool")


def resolve(raw, seed=None):
    """Typed RunConfig from raw strings; raises ConfigError listing every problem."""
    errors, warnings, values = [], [], {}
    n_stages = len(DEFAULT_STAGES)
    if "vo.n_stages" in raw:
        try:
            n_stages = _pos_int(raw["vo.n_stages"])
        except ValueError:
            pass
    stage_keys = {f"vo.stage{i}.{f}": (conv, getattr(DEFAULT_STAGES[i - 1], f) if i <= len(DEFAULT_STAGES) else None)
                  for i in range(1, n_stages + 1) for f, conv in _STAGE_FIELDS.items()}
    schema = {**SCHEMA, **stage_keys}
    for key in raw:
        if key not in schema:
            warnings.append(f"{key}: unknown key ignored")
    for key, (conv, default) in schema.items():
        if key in raw:
            try:
                values[key] = conv(raw[key])
            except (ValueError, TypeError) as exc:
                errors.append(f"{key}: {exc} (got {raw[key]!r})")
                values[key] = default
        else:
            values[key] = default
            if default is None and key in stage_keys:
                errors.append(f"{key}: required for stages beyond the defaults")
    if seed is not None:
        values["seed"] = int(seed)
    if values["seed"] is None:
        errors.append("seed: required (set it in the file or pass --seed)")
    cfg = RunConfig(values, tuple(warnings))
    if not errors:
        _check_objects(cfg, errors)
    if errors:
        raise ConfigError(errors)
    return cfg


def validate_config(path=None, seed=None, text=None):
    if text is None:
        if path is None:
            text = ""
        else:
            try:
                with open(path, encoding="utf-8") as fh:
                    text = fh.read()
            except OSError as exc:
                raise ConfigError([f"config file {path}: {exc.strerror}"]) from None
    raw, errors = parse_text(text)
    try:
        cfg = resolve(raw, seed)
    except ConfigError as exc:
        raise ConfigError(errors + exc.errors) from None
    if errors:
        raise ConfigError(errors)
    return cfg


def format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return str(v)


def dump(values, keys=None):
    keys = sorted(values) if keys is None else keys
    return "".join(f"{k} = {format_value(values[k])}\n" for k in keys if values[k] is not None)


def read_flat(path):
    """Parse a sidecar file written by :func:`dump`; raises ConfigError on syntax errors."""
    if not os.path.exists(path):
        raise ConfigError([f"{path}: missing"])
    with open(path, encoding="utf-8") as fh:
        raw, errors = parse_text(fh.read())
    if errors:
        raise ConfigError(errors)
    return raw
