"""Run configuration: dataclasses, built-in profiles and sectioned key=value files."""
from __future__ import annotations

import configparser
import dataclasses
import io
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from .distill import LossWeights, SharpenConfig
from .errors import ConfigError, SmartError
from .masking import MaskingConfig
from .model import ModelConfig


@dataclass
class DataConfig:
    phantom_size: int = 40
    crop_size: int = 32
    classes: tuple = ("sphere",)
    n_structures: int = 1
    size_min: int = 5
    size_max: int = 9
    contrast: float = 1.0
    augment: bool = True
    shift: float = 0.1
    scale: float = 0.1
    normalize: bool = True


@dataclass
class TrainConfig:
    steps: int = 300
    epochs: int = 0
    steps_per_epoch: int = 0
    batch_size: int = 4
    lr: float = 8e-4
    min_lr: float = 0.0
    warmup_frac: float = 0.1
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    clip_grad: float = 3.0
    momentum_start: float = 0.996
    symmetrize: bool = True
    satt_source: str = "u"
    dropped_positions: str = "exclude"
    dtype: str = "float32"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    sharpen: SharpenConfig = field(default_factory=SharpenConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    data: DataConfig = field(default_factory=DataConfig)

    @property
    def total_steps(self) -> int:
        if self.epochs and self.steps_per_epoch:
            return self.epochs * self.steps_per_epoch
        return self.steps

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_frac * self.total_steps))


SECTIONS = ("train", "data", "model", "masking", "sharpen", "loss")
# model.img_size always follows data.crop_size
_HIDDEN = {("model", "img_size")}


def _section_obj(cfg: TrainConfig, section: str):
    return cfg if section == "train" else getattr(cfg, section)


def _keys(cfg: TrainConfig, section: str) -> list[str]:
    obj = _section_obj(cfg, section)
    return [f.name for f in dataclasses.fields(obj)
            if f.name not in SECTIONS and (section, f.name) not in _HIDDEN]


def _coerce(raw: str, current, where: str):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if current and isinstance(current[0], int):
                return tuple(int(x) for x in items)
            return tuple(items)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot interpret {raw!r} as {type(current).__name__}") from None


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def desk_profile() -> TrainConfig:
    # 300 steps is too short for the reference momentum/temperature ramps; see the ledger
    cfg = TrainConfig()
    cfg.lr = 1e-3
    cfg.momentum_start = 0.95
    cfg.sharpen.tau_t_end = cfg.sharpen.tau_t_start
    cfg.sharpen.center_momentum = 0.99
    return cfg


def paper_profile() -> TrainConfig:
    """Reference-scale values of record; not intended to run on a desktop."""
    cfg = TrainConfig()
    cfg.epochs, cfg.steps_per_epoch = 800, 1
    cfg.warmup_frac = 80 / 800
    cfg.lr = 8e-4
    cfg.data.crop_size = 128
    cfg.data.phantom_size = 160
    cfg.model = ModelConfig(img_size=128, base_embed=96, depths=(2, 2, 8, 2), heads=(4, 4, 8, 16),
                            window=4, patch=2, drop_path=0.1)
    return cfg


PROFILES = {"desk": desk_profile, "paper": paper_profile}


def _set(cfg: TrainConfig, section: str, key: str, raw: str, where: str):
    if section not in SECTIONS:
        raise ConfigError(f"{where}: unknown section {section!r}")
    if key not in _keys(cfg, section):
        raise ConfigError(f"{where}: unknown key {section}.{key}")
    obj = _section_obj(cfg, section)
    setattr(obj, key, _coerce(raw, getattr(obj, key), f"{where}: {section}.{key}"))


def validate(cfg: TrainConfig) -> TrainConfig:
    """Re-run every invariant check; returns a config whose sub-objects are freshly built."""
    try:
        cfg.model = ModelConfig(**{**dataclasses.asdict(cfg.model), "img_size": cfg.data.crop_size})
        cfg.masking = MaskingConfig(**dataclasses.asdict(cfg.masking))
        cfg.sharpen = SharpenConfig(**dataclasses.asdict(cfg.sharpen))
    except SmartError as exc:
        raise ConfigError(str(exc)) from None
    checks = [
        (cfg.steps >= 1, "train.steps must be >= 1"),
        (cfg.batch_size >= 1, "train.batch_size must be >= 1"),
        (cfg.lr > 0, "train.lr must be > 0"),
        (0.0 <= cfg.warmup_frac <= 1.0, "train.warmup_frac must lie in [0, 1]"),
        (cfg.weight_decay >= 0, "train.weight_decay must be >= 0"),
        (0.0 < cfg.momentum_start <= 1.0, "train.momentum_start must lie in (0, 1]"),
        (cfg.satt_source in ("u", "v"), "train.satt_source must be u or v"),
        (cfg.dropped_positions in ("exclude", "keep"), "train.dropped_positions must be exclude or keep"),
        (cfg.dtype in ("float32", "float64"), "train.dtype must be float32 or float64"),
        (cfg.data.crop_size <= cfg.data.phantom_size, "data.crop_size must not exceed data.phantom_size"),
        (1 <= cfg.data.size_min <= cfg.data.size_max, "data.size_min/size_max out of order"),
        (cfg.data.contrast != 0, "data.contrast must be nonzero"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)
    return cfg


def parse_overrides(cfg: TrainConfig, overrides: Iterable[str]):
    for item in overrides or ():
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not section.key=value")
        lhs, raw = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        _set(cfg, section, key, raw, "--set")


def parse_config(path: Optional[os.PathLike] = None, overrides: Iterable[str] = (),
                 profile: str = "desk", env: Optional[dict] = None) -> TrainConfig:
    """Profile defaults <- config file <- ``SMART_SEED`` env var <- ``--set`` overrides."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r} (choose from {sorted(PROFILES)})")
    cfg = PROFILES[profile]()
    if path is not None:
        text = Path(path).read_text()
        parser = configparser.ConfigParser(interpolation=None, delimiters=("=",),
                                           inline_comment_prefixes=(";", "#"))
        parser.optionxform = str
        try:
            parser.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            for key, raw in parser.items(section):
                _set(cfg, section, key, raw, str(path))
    env = os.environ if env is None else env
    if env.get("SMART_SEED"):
        _set(cfg, "train", "seed", env["SMART_SEED"], "SMART_SEED")
    parse_overrides(cfg, overrides)
    return validate(cfg)


def dump_config(cfg: TrainConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section in SECTIONS:
        obj = _section_obj(cfg, section)
        parser[section] = {k: _fmt(getattr(obj, k)) for k in _keys(cfg, section)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def config_dict(cfg: TrainConfig) -> dict:
    out = {}
    for section in SECTIONS:
        obj = _section_obj(cfg, section)
        out[section] = {k: (list(v) if isinstance(v, tuple) else v)
                        for k, v in ((k, getattr(obj, k)) for k in _keys(cfg, section))}
    return out


def config_from_dict(d: dict) -> TrainConfig:
    cfg = TrainConfig()
    for section, items in d.items():
        for key, value in items.items():
            raw = ", ".join(map(str, value)) if isinstance(value, list) else str(value)
            _set(cfg, section, key, raw, "checkpoint")
    return validate(cfg)
