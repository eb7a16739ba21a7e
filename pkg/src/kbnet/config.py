"""YAML run configuration with up-front validation.

Schema (all keys optional; defaults shown by ``default_config_dict``)::

    seed: 0
    out: runs/default
    data:
      train_manifest: null        # path; null -> synthesize from data.synth
      val_manifest: null
      synth: {n_sequences, n_frames, height, width, density, sampling, motion, step, seed}
      val_synth: {...same keys...}
    network: {preset: slim|full, d_min, d_max, output, depth_channels, fused_channels, decoder_channels, pose_channels}
    s2d: {preset: kitti|void|nyuv2, min_kernels, max_kernels, mid_channels, out_channels}
    train:
      epochs, batch_size, crop, betas, eps, pose_source, end_frames, lr_schedule (name or [[start, end, rate], ...])
      weights: {preset: kitti|void|nyuv2|synthetic, w_ph, w_co, w_st, w_sz, w_sm}
      augment: {removal_fraction_range, h_shift_range, apply_probability}
    eval: {cap: [min_m, max_m]}

Every validation error names the dotted key it came from.
"""

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from kbnet.data.frames import AugmentConfig
from kbnet.data.synth import MOTIONS, SceneSpec
from kbnet.errors import ConfigError
from kbnet.losses import LossWeights
from kbnet.network import NetworkConfig
from kbnet.s2d import KERNEL_PRESETS, S2DConfig
from kbnet.trainer import SCHEDULES, TrainConfig

_SYNTH_KEYS = ("n_sequences", "n_frames", "height", "width", "density", "sampling", "motion", "step", "seed")


def default_config_dict():
    return {
        "seed": 0,
        "out": "runs/default",
        "data": {
            "train_manifest": None,
            "val_manifest": None,
            "synth": {"n_sequences": 100, "n_frames": 2, "height": 64, "width": 96, "density": 0.005,
                      "sampling": "uniform-random", "motion": "smooth", "step": 0.08, "seed": 1},
            "val_synth": {"n_sequences": 12, "n_frames": 2, "height": 64, "width": 96, "density": 0.005,
                          "sampling": "uniform-random", "motion": "smooth", "step": 0.08, "seed": 999},
        },
        "network": {"preset": "slim", "d_min": 0.1, "d_max": 12.0, "output": "linear"},
        "s2d": {"preset": "void"},
        "train": {
            "epochs": 10, "batch_size": 1, "crop": [64, 96], "betas": [0.9, 0.999], "eps": 1e-8,
            "pose_source": "gt", "end_frames": True, "lr_schedule": "desk",
            "weights": {"preset": "synthetic"},
            "augment": {"removal_fraction_range": [0.3, 0.6], "h_shift_range": [0.0, 0.0],
                        "apply_probability": 0.5},
        },
        "eval": {"cap": [0.2, 12.0]},
    }


@dataclass
class SynthConfig:
    n_sequences: int
    spec: SceneSpec
    seed: int


@dataclass
class RunConfig:
    seed: int
    out: Path
    train_manifest: Optional[Path]
    val_manifest: Optional[Path]
    synth: SynthConfig
    val_synth: SynthConfig
    network: NetworkConfig
    s2d: S2DConfig
    train: TrainConfig
    cap: tuple
    raw: dict = field(default_factory=dict)


# sections whose keys are checked by their own builders
_OPEN = ("network", "s2d", "train.weights")


def _merge(base, override, path=""):
    for key, val in override.items():
        where = f"{path}{key}"
        if key not in base and path.rstrip(".") not in _OPEN:
            raise ConfigError(f"{where}: unknown key")
        if isinstance(base.get(key), dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where}: expected a mapping, got {type(val).__name__}")
            _merge(base[key], val, where + ".")
        else:
            base[key] = val
    return base


def _build(key, fn):
    try:
        return fn()
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"{key}: {exc}") from None


def _number(d, key, path, kind=float, positive=False):
    val = d[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)) or (kind is int and not float(val).is_integer()):
        raise ConfigError(f"{path}.{key}: expected {kind.__name__}, got {val!r}")
    val = kind(val)
    if positive and not val > 0:
        raise ConfigError(f"{path}.{key}: must be positive, got {val}")
    return val


def _pair(val, key):
    if not isinstance(val, (list, tuple)) or len(val) != 2:
        raise ConfigError(f"{key}: expected a two-element list, got {val!r}")
    return tuple(float(v) for v in val)


def _synth(d, path):
    for k in d:
        if k not in _SYNTH_KEYS:
            raise ConfigError(f"{path}.{k}: unknown key")
    if d["motion"] not in MOTIONS:
        raise ConfigError(f"{path}.motion: must be one of {MOTIONS}, got {d['motion']!r}")
    n = _number(d, "n_sequences", path, int, positive=True)
    seed = _number(d, "seed", path, int)
    kw = dict(n_frames=_number(d, "n_frames", path, int, positive=True),
              height=_number(d, "height", path, int, positive=True),
              width=_number(d, "width", path, int, positive=True),
              density=_number(d, "density", path, float, positive=True),
              sampling=d["sampling"], motion=d["motion"],
              step=_number(d, "step", path, float))
    spec = _build(path, lambda: SceneSpec(**kw))
    return SynthConfig(n, spec, seed)


def _network(d):
    d = dict(d)
    preset = d.pop("preset", "slim")
    if preset not in ("slim", "full"):
        raise ConfigError(f"network.preset: must be 'slim' or 'full', got {preset!r}")
    known = set(NetworkConfig.__dataclass_fields__) - {"levels"}
    for k in d:
        if k not in known:
            raise ConfigError(f"network.{k}: unknown key")
    if preset == "slim":
        return _build("network", lambda: NetworkConfig.slim(**d))
    return _build("network", lambda: NetworkConfig(**d))


def _s2d(d):
    d = dict(d)
    preset = d.pop("preset", "void")
    if preset not in KERNEL_PRESETS:
        raise ConfigError(f"s2d.preset: must be one of {sorted(KERNEL_PRESETS)}, got {preset!r}")
    for k in d:
        if k not in S2DConfig.__dataclass_fields__:
            raise ConfigError(f"s2d.{k}: unknown key")
    mins, maxs = KERNEL_PRESETS[preset]
    kw = {"min_kernels": mins, "max_kernels": maxs, **d}
    return _build("s2d", lambda: S2DConfig(**kw))


def _weights(d):
    d = dict(d)
    preset = d.pop("preset", None)
    for k in d:
        if k not in LossWeights.__dataclass_fields__:
            raise ConfigError(f"train.weights.{k}: unknown key")
    base = _build("train.weights.preset", lambda: LossWeights.preset(preset)) if preset else LossWeights()
    vals = {k: getattr(base, k) for k in LossWeights.__dataclass_fields__}
    for k in d:
        vals[k] = _number(d, k, "train.weights")
    return _build("train.weights", lambda: LossWeights(**vals))


def _train(d, seed):
    for k in ("epochs", "batch_size"):
        _number(d, k, "train", int, positive=True)
    sched = d["lr_schedule"]
    if isinstance(sched, str):
        if sched not in SCHEDULES:
            raise ConfigError(f"train.lr_schedule: unknown schedule {sched!r} (known: {sorted(SCHEDULES)})")
        sched = SCHEDULES[sched]
    elif not isinstance(sched, (list, tuple)) or not all(isinstance(s, (list, tuple)) and len(s) == 3 for s in sched):
        raise ConfigError("train.lr_schedule: expected a schedule name or a list of [start, end, rate]")
    aug = d["augment"]
    for k in aug:
        if k not in AugmentConfig.__dataclass_fields__:
            raise ConfigError(f"train.augment.{k}: unknown key")
    augment = _build("train.augment", lambda: AugmentConfig(
        removal_fraction_range=_pair(aug["removal_fraction_range"], "train.augment.removal_fraction_range"),
        h_shift_range=_pair(aug["h_shift_range"], "train.augment.h_shift_range"),
        apply_probability=float(aug["apply_probability"])))
    weights = _weights(d["weights"])
    if d["pose_source"] not in ("gt", "pose-net"):
        raise ConfigError(f"train.pose_source: must be 'gt' or 'pose-net', got {d['pose_source']!r}")
    if not isinstance(d["end_frames"], bool):
        raise ConfigError(f"train.end_frames: expected true or false, got {d['end_frames']!r}")
    crop = d["crop"]
    if not isinstance(crop, (list, tuple)) or len(crop) != 2 or any(int(c) % 32 or int(c) <= 0 for c in crop):
        raise ConfigError(f"train.crop: expected two positive multiples of 32, got {crop!r}")
    return _build("train", lambda: TrainConfig(
        epochs=int(d["epochs"]), batch_size=int(d["batch_size"]), crop=tuple(crop), weights=weights,
        lr_schedule=tuple(tuple(s) for s in sched), betas=_pair(d["betas"], "train.betas"),
        eps=_number(d, "eps", "train", positive=True), augment=augment, pose_source=d["pose_source"],
        end_frames=d["end_frames"], seed=seed))


def build_config(overrides=None, seed=None, out=None):
    """Merge ``overrides`` into the defaults and validate everything."""
    raw = default_config_dict()
    if overrides:
        if not isinstance(overrides, dict):
            raise ConfigError("<root>: configuration must be a mapping")
        _merge(raw, copy.deepcopy(overrides))
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["out"] = str(out)
    run_seed = _number(raw, "seed", "<root>", int)
    cap = _pair(raw["eval"]["cap"], "eval.cap")
    if not 0 < cap[0] < cap[1]:
        raise ConfigError(f"eval.cap: need 0 < min < max, got {list(cap)}")
    data = raw["data"]
    cfg = RunConfig(
        seed=run_seed,
        out=Path(raw["out"]),
        train_manifest=Path(data["train_manifest"]) if data["train_manifest"] else None,
        val_manifest=Path(data["val_manifest"]) if data["val_manifest"] else None,
        synth=_synth(data["synth"], "data.synth"),
        val_synth=_synth(data["val_synth"], "data.val_synth"),
        network=_network(raw["network"]),
        s2d=_s2d(raw["s2d"]),
        train=_train(raw["train"], run_seed),
        cap=cap,
        raw=raw,
    )
    if cfg.train.pose_source not in ("gt", "pose-net"):
        raise ConfigError("train.pose_source: must be 'gt' or 'pose-net'")
    return cfg


def load_config(path=None, seed=None, out=None):
    overrides = None
    if path is not None:
        try:
            overrides = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from None
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
    return build_config(overrides or {}, seed=seed, out=out)
