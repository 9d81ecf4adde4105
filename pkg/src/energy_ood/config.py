"""JSON run configuration: schema, defaults, overrides and dataset sources.

Top-level keys (unknown keys anywhere in the schema are errors)::

    mode        "OEST" | "OEST*"                      default "OEST*"
    seed        64-bit unsigned integer               default 1
    out_dir     output directory                      default "runs"
    model       {arch, checkpoint}
    data        {train, val, test, ood: {name: source}}
    pretrain    {epochs, lr, momentum, weight_decay, batch_size}
    tuning      TuningConfig fields except mode (defaults follow ``mode``)
    schedule    {eta_start, eta_end, total_epochs}  (defaults follow ``mode``)
    optimizer   {momentum, weight_decay}  used while tuning
    transforms  list of {kind, params}
    energy      {temperature, tpr_target}
    barrier     {trials, dim, classes, bound, alpha_prob, gamma_max, near_fraction}

A dataset source is one of::

    {"format": "idx", "images": path, "labels": path | null, "start": 0, "stop": null, "id": ...}
    {"format": "cifar", "path": path, "id": ...}
    {"format": "synthetic", "means": [[...]], "sigma": s, "counts": [...],
     "image_shape": [C, H, W] | null, "stream": "data", "id": ...}

Relative paths resolve against the config file's directory. Paths of the
model checkpoint and of train/val/test sources are checked when the config
is loaded; OOD sources are checked when they are read so that an evaluation
can still report the sets that are present.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, fields

from .barrier import BarrierProbe
from .classifier import PretrainConfig, parse_descriptor
from .data import GaussianSpec, load_cifar_bin, load_idx, synth_gaussians
from .errors import ConfigError, EnergyOODError
from .objectives import MODES, TuningConfig
from .optim import Schedule
from .rng import check_seed
from .transforms import TransformSpec

SPLITS = ("train", "val", "test")
DEFAULT_TRANSFORMS = ("gaussian_noise", "gaussian_blur", "permutation", "sobel")

_SOURCE_KEYS = {
    "idx": {"format", "images", "labels", "start", "stop", "id", "num_classes"},
    "cifar": {"format", "path", "id", "num_classes"},
    "synthetic": {"format", "means", "sigma", "counts", "image_shape", "stream", "id"},
}
_PATH_KEYS = {"idx": ("images", "labels"), "cifar": ("path",), "synthetic": ()}
_DATA_KEYS = set(SPLITS) | {"ood"}
_TOP_KEYS = {"mode", "seed", "out_dir", "model", "data", "pretrain", "tuning", "schedule", "optimizer",
             "transforms", "energy", "barrier"}


def _field_names(cls, drop=()):
    return {f.name for f in fields(cls)} - set(drop)


def _check_keys(section: dict, allowed: set, where: str):
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be an object, got {type(section).__name__}")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


def _build(cls, kwargs: dict, where: str):
    try:
        return cls(**kwargs)
    except (TypeError, EnergyOODError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class RunConfig:
    """Resolved configuration with every default materialized."""

    mode: str
    seed: int
    out_dir: str
    model: dict
    data: dict
    pretrain: PretrainConfig
    tuning: TuningConfig
    schedule: Schedule
    momentum: float
    weight_decay: float
    transforms: list
    temperature: float
    tpr_target: float
    barrier: BarrierProbe
    barrier_trials: int

    def to_dict(self) -> dict:
        tuning = {k: v for k, v in self.tuning.__dict__.items() if k != "mode"}
        pretrain = {k: v for k, v in self.pretrain.__dict__.items() if k != "seed"}
        return {
            "mode": self.mode,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "model": dict(self.model),
            "data": copy.deepcopy(self.data),
            "pretrain": pretrain,
            "tuning": tuning,
            "schedule": dict(self.schedule.__dict__),
            "optimizer": {"momentum": self.momentum, "weight_decay": self.weight_decay},
            "transforms": [s.to_dict() for s in self.transforms],
            "energy": {"temperature": self.temperature, "tpr_target": self.tpr_target},
            "barrier": {"trials": self.barrier_trials, **self.barrier.__dict__},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write_snapshot(self, path=None) -> str:
        path = path or os.path.join(self.out_dir, "resolved_config.json")
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")
        return path

    def missing_paths(self, include_ood: bool = True) -> list:
        """``(where, path)`` for every referenced file that does not exist."""
        out = []
        ckpt = self.model.get("checkpoint")
        if ckpt is not None and not os.path.isfile(ckpt):
            out.append(("model.checkpoint", ckpt))
        sources = [(f"data.{k}", self.data[k]) for k in SPLITS if self.data.get(k)]
        if include_ood:
            sources += [(f"data.ood.{k}", v) for k, v in self.data["ood"].items()]
        for where, src in sources:
            for key in _PATH_KEYS[src["format"]]:
                if src.get(key) is not None and not os.path.isfile(src[key]):
                    out.append((f"{where}.{key}", src[key]))
        return out

    def validate(self, include_ood: bool = True):
        missing = self.missing_paths(include_ood)
        if missing:
            raise ConfigError("missing input file(s): " + ", ".join(f"{w}={p}" for w, p in missing))


def _resolve_source(src, where: str, base: str) -> dict:
    _check_keys(src, set().union(*_SOURCE_KEYS.values()), where)
    fmt = src.get("format")
    if fmt not in _SOURCE_KEYS:
        raise ConfigError(f"{where}.format must be one of {sorted(_SOURCE_KEYS)}, got {fmt!r}")
    _check_keys(src, _SOURCE_KEYS[fmt], where)
    out = dict(src)
    for key in _PATH_KEYS[fmt]:
        if key == "labels":
            out.setdefault(key, None)
        elif out.get(key) is None:
            raise ConfigError(f"{where}.{key} is required for format {fmt!r}")
        if out[key] is not None:
            out[key] = os.path.abspath(os.path.join(base, os.path.expanduser(out[key])))
    if fmt == "idx":
        out.setdefault("start", 0)
        out.setdefault("stop", None)
    if fmt == "synthetic":
        for key in ("means", "sigma", "counts"):
            if key not in out:
                raise ConfigError(f"{where}.{key} is required for synthetic data")
        out.setdefault("image_shape", None)
        out.setdefault("stream", "data")
    out.setdefault("id", where.rsplit(".", 1)[-1])
    return out


def resolve(raw: dict, base_dir: str = ".") -> RunConfig:
    """Validate ``raw`` against the schema and fill in every default."""
    _check_keys(raw, _TOP_KEYS, "config")
    mode = raw.get("mode", "OEST*")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    try:
        seed = check_seed(raw.get("seed", 1))
    except EnergyOODError as exc:
        raise ConfigError(str(exc)) from exc
    out_dir = os.path.abspath(os.path.join(base_dir, raw.get("out_dir", "runs")))

    model = raw.get("model", {})
    _check_keys(model, {"arch", "checkpoint"}, "model")
    model = {"arch": model.get("arch", "convnet:small,C=10"), "checkpoint": model.get("checkpoint")}
    try:
        parse_descriptor(model["arch"])
    except EnergyOODError as exc:
        raise ConfigError(f"model.arch: {exc}") from exc
    if model["checkpoint"] is not None:
        model["checkpoint"] = os.path.abspath(os.path.join(base_dir, model["checkpoint"]))

    data_raw = raw.get("data", {})
    _check_keys(data_raw, _DATA_KEYS, "data")
    data = {k: (_resolve_source(data_raw[k], f"data.{k}", base_dir) if data_raw.get(k) else None)
            for k in SPLITS}
    ood = data_raw.get("ood", {})
    if not isinstance(ood, dict):
        raise ConfigError("data.ood must map names to sources")
    data["ood"] = {name: _resolve_source(src, f"data.ood.{name}", base_dir) for name, src in ood.items()}

    pre = raw.get("pretrain", {})
    _check_keys(pre, _field_names(PretrainConfig, ["seed"]), "pretrain")
    pretrain = _build(PretrainConfig, {**pre, "seed": seed}, "pretrain")

    tun = raw.get("tuning", {})
    _check_keys(tun, _field_names(TuningConfig, ["mode"]), "tuning")
    try:
        tuning = TuningConfig.for_mode(mode, **tun)
    except (TypeError, EnergyOODError) as exc:
        raise ConfigError(f"tuning: {exc}") from exc

    sch = raw.get("schedule", {})
    _check_keys(sch, _field_names(Schedule), "schedule")
    defaults = Schedule.for_mode(mode, sch.get("total_epochs", 10))
    schedule = _build(Schedule, {**defaults.__dict__, **sch}, "schedule")

    opt = raw.get("optimizer", {})
    _check_keys(opt, {"momentum", "weight_decay"}, "optimizer")

    specs = raw.get("transforms", [{"kind": k} for k in DEFAULT_TRANSFORMS])
    if not isinstance(specs, list) or not specs:
        raise ConfigError("transforms must be a non-empty list")
    try:
        transforms = [TransformSpec.from_dict(s) for s in specs]
    except (TypeError, KeyError, EnergyOODError) as exc:
        raise ConfigError(f"transforms: {exc!r}") from exc

    energy = raw.get("energy", {})
    _check_keys(energy, {"temperature", "tpr_target"}, "energy")
    temperature = float(energy.get("temperature", 1.0))
    tpr_target = float(energy.get("tpr_target", 0.95))
    if not temperature > 0 or not 0 < tpr_target < 1:
        raise ConfigError("energy.temperature must be > 0 and energy.tpr_target in (0, 1)")

    bar = dict(raw.get("barrier", {}))
    _check_keys(bar, _field_names(BarrierProbe) | {"trials"}, "barrier")
    trials = bar.pop("trials", 100_000)
    if int(trials) != trials or trials < 1:
        raise ConfigError("barrier.trials must be a positive integer")
    probe = _build(BarrierProbe, bar, "barrier")

    return RunConfig(mode, seed, out_dir, model, data, pretrain, tuning, schedule,
                     float(opt.get("momentum", 0.9)), float(opt.get("weight_decay", 5e-4)),
                     transforms, temperature, tpr_target, probe, int(trials))


def parse_override(item: str):
    """``"a.b=value"`` -> (["a", "b"], value); the value is JSON, else a plain string."""
    key, sep, value = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"override must look like key=value, got {item!r}")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return key.split("."), parsed


def apply_overrides(raw: dict, overrides) -> dict:
    out = copy.deepcopy(raw)
    for item in overrides:
        path, value = parse_override(item)
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} descends into a non-object")
        node[path[-1]] = value
    return out


def load_config(path=None, overrides=(), seed=None, out_dir=None, check_paths: bool = True) -> RunConfig:
    """Read a JSON config (or start from defaults), apply overrides and resolve it."""
    raw, base = {}, os.getcwd()
    if path is not None:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        base = os.path.dirname(os.path.abspath(path))
    raw = apply_overrides(raw, overrides)
    if seed is not None:
        raw["seed"] = seed
    if out_dir is not None:
        raw["out_dir"] = os.path.abspath(out_dir)
    cfg = resolve(raw, base)
    if check_paths:
        cfg.validate(include_ood=False)
    return cfg


def load_source(src: dict, split: str = "test", seed: int = 1):
    """Read one resolved dataset source."""
    fmt = src["format"]
    if fmt == "idx":
        return load_idx(src["images"], src["labels"], id=src["id"], split=split,
                        num_classes=src.get("num_classes"), start=src["start"], stop=src["stop"])
    if fmt == "cifar":
        return load_cifar_bin(src["path"], id=src["id"], split=split, num_classes=src.get("num_classes", 10))
    spec = GaussianSpec(tuple(map(tuple, src["means"])), src["sigma"],
                        tuple(src["counts"]) if isinstance(src["counts"], list) else src["counts"],
                        None if src["image_shape"] is None else tuple(src["image_shape"]))
    return synth_gaussians(spec, seed, id=src["id"], split=split, stream=src["stream"])


def load_split(cfg: RunConfig, split: str):
    src = cfg.data.get(split)
    if src is None:
        raise ConfigError(f"data.{split} is not configured")
    return load_source(src, split, cfg.seed)
