"""Run configuration: schema, validation, YAML I/O, and dotted overrides.

A config file is a YAML mapping. Only ``mode`` is required; everything
else has a default. Unknown keys are rejected so typos fail loudly.

Schema (type, default, allowed range)::

    mode              str    required   one of o, d, e
    name              str    ""         free-form run label (report column)
    seed              int    0          >= 0; root of all randomness
    epochs            int    500        >= 0
    batch_size        int    32         >= 2
    lr0               float  0.001      > 0
    t_max             int    50         >= 1; cosine period in epochs
    lambda_consist    float  0.1        >= 0
    beta_anom         float  1.0        >= 0
    alpha_score       float  0.5        [0, 1]
    anomaly_fraction  float  0.01       [0, 1]; mode e, fraction of train normals
    anomaly_count     int    null       >= 1; mode e, per anomaly subcategory (overrides fraction)
    latent_dim        int    128        >= 1
    backbone          str    small_conv small_conv | resnet18_w64
    widths            list   [64, 128, 256, 512]  small_conv block widths
    js_impl           str    moment_matched       | symmetric_kl
    recon_reduction   str    sum        sum | mean; L1 reduction over pixels in training
    log_var_bound     float  10.0       > 0 or null; soft saturation of encoder log-variance
    eval_every        int    5          >= 1; AUROC evaluation period (epochs)
    dtype             str    float32    float32 | float64
    dsa:                                 pseudo-anomaly augmentation (mode d)
      probability     float  0.01       [0, 1]
      transform_pool  list   [flip_h, flip_v, rot90]  subset of those + cutout
      ops_per_sample  list   [1, 3]     1 <= min <= max <= 3
      cutout_frac     float  0.5        (0, 1)
      cutout_fill     float  0.0        [0, 1]
    data:
      source          str    synthetic  synthetic | mnist5k | idx | folder
      target_class    int    0          >= 0 (ignored for folder)
      image_size      int    32
      channels        int    1
      n_per_class     int    200        synthetic only
      classes         int    3          synthetic only
      root            str    null       folder only: category directory
      category        str    null       folder only: standard-augmentation table key
      augment         bool   false      apply standard augmentation during training
      train_images/train_labels/test_images/test_labels  str  idx only
"""

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .dsa import DsaConfig
from .errors import ConfigError, InvalidInputError

SOURCES = ("synthetic", "mnist5k", "idx", "folder")


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    target_class: int = 0
    image_size: int = 32
    channels: int = 1
    n_per_class: int = 200
    classes: int = 3
    root: str = None
    category: str = None
    augment: bool = False
    train_images: str = None
    train_labels: str = None
    test_images: str = None
    test_labels: str = None


@dataclass(frozen=True)
class RunConfig:
    mode: str
    name: str = ""
    seed: int = 0
    epochs: int = 500
    batch_size: int = 32
    lr0: float = 0.001
    t_max: int = 50
    lambda_consist: float = 0.1
    beta_anom: float = 1.0
    alpha_score: float = 0.5
    anomaly_fraction: float = 0.01
    anomaly_count: int = None
    latent_dim: int = 128
    backbone: str = "small_conv"
    widths: tuple = (64, 128, 256, 512)
    js_impl: str = "moment_matched"
    recon_reduction: str = "sum"
    log_var_bound: float = 10.0
    eval_every: int = 5
    dtype: str = "float32"
    dsa: DsaConfig = field(default_factory=DsaConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(self.widths))
        validate(self)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        d["dsa"]["transform_pool"] = list(self.dsa.transform_pool)
        d["dsa"]["ops_per_sample"] = list(self.dsa.ops_per_sample)
        return d

    def replace(self, **changes):
        return from_dict({**self.to_dict(), **changes})


_NUMERIC = {int: (int,), float: (int, float)}


def _check_type(name, value, kind, optional=False):
    if value is None and optional:
        return
    ok = isinstance(value, _NUMERIC.get(kind, (kind,))) and not isinstance(value, bool)
    if kind is bool:
        ok = isinstance(value, bool)
    if not ok:
        raise ConfigError(f"expected {kind.__name__}, got {value!r}", name)


def validate(cfg):
    def need(cond, name, msg):
        if not cond:
            raise ConfigError(msg, name)

    need(cfg.mode in ("o", "d", "e"), "mode", f"must be one of o, d, e (got {cfg.mode!r})")
    for name, kind, opt in (
        ("seed", int, False), ("epochs", int, False), ("batch_size", int, False),
        ("lr0", float, False), ("t_max", int, False), ("lambda_consist", float, False),
        ("beta_anom", float, False), ("alpha_score", float, False),
        ("anomaly_fraction", float, False), ("anomaly_count", int, True),
        ("latent_dim", int, False), ("eval_every", int, False), ("name", str, False),
    ):
        _check_type(name, getattr(cfg, name), kind, opt)
    need(cfg.seed >= 0, "seed", "must be >= 0")
    need(cfg.epochs >= 0, "epochs", "must be >= 0")
    need(cfg.batch_size >= 2, "batch_size", "must be >= 2 (batch norm needs two samples)")
    need(cfg.lr0 > 0, "lr0", "must be > 0")
    need(cfg.t_max >= 1, "t_max", "must be >= 1")
    need(cfg.lambda_consist >= 0, "lambda_consist", "must be >= 0")
    need(cfg.beta_anom >= 0, "beta_anom", "must be >= 0")
    need(0 <= cfg.alpha_score <= 1, "alpha_score", "must lie in [0, 1]")
    need(0 <= cfg.anomaly_fraction <= 1, "anomaly_fraction", "must lie in [0, 1]")
    need(cfg.anomaly_count is None or cfg.anomaly_count >= 1, "anomaly_count", "must be >= 1")
    need(cfg.latent_dim >= 1, "latent_dim", "must be >= 1")
    need(cfg.eval_every >= 1, "eval_every", "must be >= 1")
    need(cfg.backbone in ("small_conv", "resnet18_w64"), "backbone", "unknown backbone")
    need(cfg.js_impl in ("moment_matched", "symmetric_kl"), "js_impl", "unknown js_impl")
    need(cfg.recon_reduction in ("sum", "mean"), "recon_reduction", "must be sum or mean")
    need(cfg.log_var_bound is None or (isinstance(cfg.log_var_bound, (int, float))
                                      and cfg.log_var_bound > 0),
         "log_var_bound", "must be a positive number or null")
    need(cfg.dtype in ("float32", "float64"), "dtype", "must be float32 or float64")
    need(len(cfg.widths) == 4 and all(isinstance(w, int) and w > 0 for w in cfg.widths),
         "widths", "must be four positive integers")
    d = cfg.data
    need(d.source in SOURCES, "data.source", f"must be one of {', '.join(SOURCES)}")
    need(isinstance(d.target_class, int) and d.target_class >= 0, "data.target_class", "must be an int >= 0")
    need(isinstance(d.image_size, int) and d.image_size >= 8, "data.image_size", "must be an int >= 8")
    need(d.channels in (1, 3), "data.channels", "must be 1 or 3")
    if d.source == "folder":
        need(d.root is not None, "data.root", "required for source 'folder'")
    if d.source == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            need(getattr(d, key) is not None, f"data.{key}", "required for source 'idx'")
    if d.source == "synthetic":
        need(d.image_size == 32, "data.image_size", "synthetic shapes are 32x32")
        need(d.target_class < d.classes, "data.target_class", "must be < data.classes")


def from_dict(raw):
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    if "mode" not in raw or raw["mode"] is None:
        raise ConfigError("required field is missing", "mode")
    top = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(raw) - top
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}", sorted(unknown)[0])
    raw = dict(raw)
    for key, cls in (("dsa", DsaConfig), ("data", DataConfig)):
        sub = raw.get(key) or {}
        if isinstance(sub, (DsaConfig, DataConfig)):
            continue
        if not isinstance(sub, dict):
            raise ConfigError("must be a mapping", key)
        allowed = {f.name for f in dataclasses.fields(cls)}
        bad = set(sub) - allowed
        if bad:
            raise ConfigError(f"unknown keys {sorted(bad)}", f"{key}.{sorted(bad)[0]}")
        try:
            raw[key] = cls(**sub)
        except InvalidInputError as exc:
            raise ConfigError(str(exc), key) from None
    return RunConfig(**raw)


def apply_overrides(raw, overrides):
    """Apply ``a.b=value`` strings to a nested dict; values are parsed as YAML scalars."""
    raw = dict(raw)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, _, text = item.partition("=")
        path = key.strip().split(".")
        value = yaml.safe_load(text) if text.strip() else None
        node = raw
        for part in path[:-1]:
            child = node.get(part)
            child = dict(child) if isinstance(child, dict) else {}
            node[part] = child
            node = child
        node[path[-1]] = value
    return raw


def load_config(path, overrides=()):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must contain a mapping")
    return from_dict(apply_overrides(raw, overrides))


def dump_config(cfg):
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
