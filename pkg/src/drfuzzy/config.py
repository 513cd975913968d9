"""Run configuration: an INI file with one section per pipeline stage.

Every key has a default, so ``init-config`` can write the complete file and
an empty file is a valid (paper-default) run on synthetic data. Unknown
sections and keys are rejected to catch typos.
"""

from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .dataset import ClassMergeMap, SyntheticSpec
from .imaging import AugmentConfig, PreprocessConfig
from .model import BackboneConfig, ModelConfig, StageConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending ``section.key``."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class DataConfig:
    source: str = "synthetic"  # or "csv"
    labels_csv: str = ""
    image_dir: str = ""
    class_merge: str = "5-class"
    split: tuple[float, float, float] = (0.70, 0.15, 0.15)
    split_seed: int = 0
    oversample: str = "none"  # or "balanced"


@dataclass
class ModelSection:
    channels: tuple[int, ...] = (16, 32, 64, 128)
    strides: tuple[int, ...] = (2, 2, 2, 2)
    se: bool = True
    se_ratio: int = 4
    head_dim: int = 32
    spatial_kernel: int = 7
    channel_attention: bool = True
    spatial_attention: bool = True


@dataclass
class LossSection:
    gamma: float = 2.0
    label_smoothing: float = 0.1
    alpha: str = "balanced"  # "balanced", "none" or comma-separated weights


@dataclass
class OptimSection:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    scheduler: str = "plateau"
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    min_lr: float = 1e-6


@dataclass
class TrainSection:
    epochs: int = 100
    batch_size: int = 16
    seed: int = 0
    out_dir: str = "runs/default"
    verify_grads: bool = False


@dataclass
class SyntheticSection:
    size: int = 224
    counts: tuple[int, ...] = (20, 20, 20, 20, 20)
    seed: int = 0
    lesions_per_grade: int = 3


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    optim: OptimSection = field(default_factory=OptimSection)
    train: TrainSection = field(default_factory=TrainSection)
    base_dir: Path = field(default_factory=Path.cwd, compare=False)

    SECTIONS = ("data", "synthetic", "preprocess", "augment", "model", "loss", "optim", "train")

    # -- derived objects -------------------------------------------------

    def merge_map(self) -> ClassMergeMap:
        return ClassMergeMap.by_name(self.data.class_merge)

    def synthetic_spec(self) -> SyntheticSpec:
        s = self.synthetic
        return SyntheticSpec(size=s.size, counts=s.counts, seed=s.seed, lesions_per_grade=s.lesions_per_grade)

    def model_config(self) -> ModelConfig:
        m = self.model
        stages = tuple(StageConfig(c, st, m.se, m.se_ratio) for c, st in zip(m.channels, m.strides))
        backbone = BackboneConfig(input_size=(self.preprocess.size, self.preprocess.size), stages=stages,
                                  head_dim=m.head_dim, spatial_kernel=m.spatial_kernel,
                                  channel_attention=m.channel_attention, spatial_attention=m.spatial_attention)
        mm = self.merge_map()
        return ModelConfig(backbone=backbone, n_classes=mm.n_classes, class_names=mm.names)

    def train_config(self) -> TrainConfig:
        o, lo, t = self.optim, self.loss, self.train
        if lo.alpha in ("balanced", "none"):
            alpha = lo.alpha
        else:
            alpha = tuple(float(v) for v in lo.alpha.split(","))
        return TrainConfig(epochs=t.epochs, batch_size=t.batch_size, lr=o.lr, weight_decay=o.weight_decay,
                           betas=(o.beta1, o.beta2), adam_eps=o.eps, gamma=lo.gamma,
                           label_smoothing=lo.label_smoothing, alpha=alpha, augment=self.augment,
                           plateau_factor=o.plateau_factor, plateau_patience=o.plateau_patience, min_lr=o.min_lr,
                           scheduler=o.scheduler, seed=t.seed, verify_grads=t.verify_grads)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def out_dir(self) -> Path:
        return self.resolve(self.train.out_dir)

    # -- validation ------------------------------------------------------

    def validate(self) -> "RunConfig":
        d = self.data
        if d.source not in ("synthetic", "csv"):
            raise ConfigError("data.source", f"must be 'synthetic' or 'csv', got {d.source!r}")
        if d.source == "csv":
            for key in ("labels_csv", "image_dir"):
                value = getattr(d, key)
                if not value:
                    raise ConfigError(f"data.{key}", "required when source = csv")
                if not self.resolve(value).exists():
                    raise ConfigError(f"data.{key}", f"path does not exist: {self.resolve(value)}")
        try:
            self.merge_map()
        except ValueError as exc:
            raise ConfigError("data.class_merge", str(exc)) from None
        if len(d.split) != 3 or any(f <= 0 for f in d.split) or not math.isclose(sum(d.split), 1.0, abs_tol=1e-9):
            raise ConfigError("data.split", "needs three positive fractions summing to 1")
        if d.oversample not in ("none", "balanced"):
            raise ConfigError("data.oversample", "must be 'none' or 'balanced'")
        if len(self.model.channels) != len(self.model.strides):
            raise ConfigError("model.strides", "needs one stride per entry of model.channels")
        if self.train.epochs < 0:
            raise ConfigError("train.epochs", "must be >= 0")
        if self.loss.alpha not in ("balanced", "none"):
            n = len(self.loss.alpha.split(","))
            if n != self.merge_map().n_classes:
                raise ConfigError("loss.alpha", f"needs {self.merge_map().n_classes} weights, got {n}")
        if not 0.0 <= self.loss.label_smoothing < 1.0:
            raise ConfigError("loss.label_smoothing", "must lie in [0, 1)")
        for section, build in (("synthetic", self.synthetic_spec), ("model", self.model_config),
                               ("optim", self.train_config)):
            try:
                build()
            except ValueError as exc:
                raise ConfigError(section, str(exc)) from None
        return self

    # -- text form -------------------------------------------------------

    def to_ini(self) -> str:
        lines = []
        for name in self.SECTIONS:
            lines.append(f"[{name}]")
            section = getattr(self, name)
            for f in fields(section):
                lines.append(f"{f.name} = {_format(getattr(section, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        """SHA-256 of the canonical INI rendering (independent of comments
        and key order in the source file)."""
        return hashlib.sha256(self.to_ini().encode()).hexdigest()

    @classmethod
    def from_ini(cls, text: str, base_dir=None) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError("file", str(exc).splitlines()[0]) from None
        cfg = cls(base_dir=Path(base_dir) if base_dir is not None else Path.cwd())
        for name in parser.sections():
            if name not in cls.SECTIONS:
                raise ConfigError(name, f"unknown section; expected one of {', '.join(cls.SECTIONS)}")
            section = getattr(cfg, name)
            known = {f.name: f for f in fields(section)}
            updates = {}
            for key, raw in parser.items(name):
                if key not in known:
                    raise ConfigError(f"{name}.{key}", "unknown key")
                updates[key] = _parse(f"{name}.{key}", raw, getattr(section, key))
            try:
                setattr(cfg, name, replace(section, **updates))
            except ValueError as exc:
                raise ConfigError(name, str(exc)) from None
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError("--config", f"file not found: {path}")
        return cls.from_ini(path.read_text(encoding="utf-8"), base_dir=path.parent).validate()


def toy_config() -> RunConfig:
    """The desk-scale 3-class synthetic run: 600 images at 64 x 64,
    grades 0/2/4 merged by the Table I map, 30 epochs."""
    cfg = RunConfig()
    cfg.data = replace(cfg.data, class_merge="table1-3class")
    cfg.synthetic = SyntheticSection(size=64, counts=(200, 0, 200, 0, 200))
    cfg.preprocess = replace(cfg.preprocess, size=64)
    cfg.train = replace(cfg.train, epochs=30, out_dir="runs/toy")
    return cfg


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_BOOLS = {"true": True, "yes": True, "on": True, "1": True, "false": False, "no": False, "off": False, "0": False}


def _parse_scalar(name: str, raw: str, like):
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            return _BOOLS[raw.lower()]
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except (KeyError, ValueError):
        kind = "boolean" if isinstance(like, bool) else type(like).__name__
        raise ConfigError(name, f"expected {kind}, got {raw!r}") from None
    return raw


def _parse(name: str, raw: str, default):
    if name == "preprocess.gamma_mode":
        try:
            return float(raw)
        except ValueError:
            if raw.strip() != "adaptive":
                raise ConfigError(name, "must be 'adaptive' or a positive number") from None
            return "adaptive"
    if isinstance(default, tuple):
        parts = [p for p in (s.strip() for s in raw.split(",")) if p]
        if not parts:
            raise ConfigError(name, "empty list")
        like = default[0]
        return tuple(_parse_scalar(name, p, like) for p in parts)
    return _parse_scalar(name, raw, default)
