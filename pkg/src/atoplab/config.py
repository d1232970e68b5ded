"""Experiment configuration: a versioned YAML schema, strict loading, overrides and hashing.

A config file has the sections ``dataset``, ``classifier``, ``purifier``,
``transform``, ``atop``, ``attacks``, ``eval``, ``sweep``, ``render`` and
``seeds``. Every section is optional and falls back to the defaults below;
unknown sections or keys are rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import yaml

from .attacks import AttackConfig, AttackError, preset
from .transforms import KINDS, TransformConfig, TransformError

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSection:
    source: str = "synthetic"  # "synthetic" or "directory"
    train_path: str | None = None
    test_path: str | None = None
    num_classes: int = 10
    size: int = 16
    channels: int = 3
    n_per_class: int = 300
    n_test_per_class: int = 100
    texture_amp: float = 0.02


@dataclass
class ClassifierSection:
    width: int = 16
    epochs: int = 10
    batch_size: int = 128
    lr: float = 2e-3


@dataclass
class PurifierSection:
    variant: str = "gan"
    width: int = 16
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    d_lr: float = 1e-4
    d_clip: float = 0.0
    kinds: list = field(default_factory=lambda: ["RT1", "RT2", "RT3"])
    residual_kinds: list = field(default_factory=lambda: ["RT1"])  # visible-pixel residual head


@dataclass
class AtopSection:
    lam: float = 0.1
    epochs: int = 5
    batch_size: int = 64
    lr: float = 1e-4
    d_lr: float = 1e-4
    attack: object = field(default_factory=lambda: {"preset": "FGSM", "eot_k": 1})
    train_with: str = "adversarial"
    attack_mode: str = "per_batch"
    freeze_discriminator: bool = False
    kinds: list = field(default_factory=lambda: ["RT2"])


@dataclass
class EvalSection:
    subset_size: int = 512
    repeats: int = 2
    batch_size: int = 256
    kinds: list = field(default_factory=lambda: ["RT1", "RT2", "RT3"])


@dataclass
class SweepSection:
    param: str = "rate"
    values: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75])
    attack: object = None


@dataclass
class RenderSection:
    n_examples: int = 4
    stages: list = field(default_factory=lambda: ["clean", "adversarial", "transformed", "purified"])
    attack: object = "PGD-10"
    scale: int = 4


@dataclass
class SeedsSection:
    master: int = 0


@dataclass
class ExperimentConfig:
    version: int = SCHEMA_VERSION
    dataset: DatasetSection = field(default_factory=DatasetSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    purifier: PurifierSection = field(default_factory=PurifierSection)
    transform: dict = field(default_factory=lambda: TransformConfig().to_dict())
    atop: AtopSection = field(default_factory=AtopSection)
    attacks: list = field(default_factory=lambda: ["PGD-10"])
    eval: EvalSection = field(default_factory=EvalSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    render: RenderSection = field(default_factory=RenderSection)
    seeds: SeedsSection = field(default_factory=SeedsSection)

    # -- typed views -------------------------------------------------------

    @property
    def seed(self) -> int:
        return self.seeds.master

    def transform_config(self, kind: str | None = None) -> TransformConfig:
        t = TransformConfig(**self.transform)
        return t.replace(kind=kind) if kind else t

    def attack_configs(self) -> list[AttackConfig]:
        return [parse_attack(a) for a in self.attacks]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """Hash of the resolved config without seeds; independent of key order."""
        d = self.to_dict()
        d.pop("seeds")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def run_dir(self, root) -> Path:
        return Path(root) / f"{self.config_hash()}-seed{self.seed}"

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


# ---------------------------------------------------------------------------
# parsing


def _number(value, where: str) -> float:
    """Accept ints, floats and fraction strings such as ``"8/255"``."""
    if isinstance(value, bool):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        try:
            return float(Fraction(value.replace(" ", "")))
        except (ValueError, ZeroDivisionError):
            pass
    raise ConfigError(f"{where}: expected a number, got {value!r}")


def parse_attack(entry) -> AttackConfig:
    """A preset name (``"PGD-10"``), or a mapping with ``preset`` plus overrides, or full fields."""
    try:
        if isinstance(entry, str):
            return preset(entry)
        if not isinstance(entry, dict):
            raise ConfigError(f"attack entry must be a name or a mapping, got {entry!r}")
        entry = dict(entry)
        for key in ("eps", "step", "stadv_tau", "cw_kappa"):
            if entry.get(key) is not None:
                entry[key] = _number(entry[key], f"attacks.{key}")
        known = {f.name for f in dataclasses.fields(AttackConfig)} | {"preset"}
        unknown = set(entry) - known
        if unknown:
            raise ConfigError(f"unknown attack keys {sorted(unknown)}")
        name = entry.pop("preset", None)
        if name is None:
            return AttackConfig(**entry)
        if name.startswith("StAdv") and "eps" in entry:
            entry["stadv_eps"] = entry.pop("eps")
        eps = entry.pop("eps", 8 / 255)
        return preset(name, eps, **entry)
    except (AttackError, TypeError) as err:
        raise ConfigError(f"invalid attack {entry!r}: {err}") from None


def _build(cls, data, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")
    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        default = getattr(defaults, name)
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where}.{name}: expected true/false, got {value!r}")
        elif isinstance(default, int) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{where}.{name}: expected an integer, got {value!r}")
        elif isinstance(default, float):
            value = _number(value, f"{where}.{name}")
        elif isinstance(default, list) and not isinstance(value, list):
            raise ConfigError(f"{where}.{name}: expected a list, got {value!r}")
        kwargs[name] = value
    return cls(**kwargs)


_SECTIONS = {"dataset": DatasetSection, "classifier": ClassifierSection, "purifier": PurifierSection,
             "atop": AtopSection, "eval": EvalSection, "sweep": SweepSection, "render": RenderSection,
             "seeds": SeedsSection}


def config_from_dict(data: dict | None) -> ExperimentConfig:
    data = dict(data or {})
    known = set(_SECTIONS) | {"version", "transform", "attacks"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    version = data.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"config schema version {version} unsupported (expected {SCHEMA_VERSION})")
    kwargs = {name: _build(cls, data.get(name), name) for name, cls in _SECTIONS.items()}

    transform = dict(data.get("transform") or {})
    t_fields = {f.name for f in dataclasses.fields(TransformConfig)}
    unknown = set(transform) - t_fields
    if unknown:
        raise ConfigError(f"unknown key(s) in transform: {', '.join(sorted(unknown))}")
    try:
        for key in ("sigma", "rate"):
            if key in transform:
                transform[key] = _number(transform[key], f"transform.{key}")
        t_cfg = TransformConfig(**transform)
    except (TransformError, TypeError) as err:
        raise ConfigError(f"invalid transform section: {err}") from None

    attacks = data.get("attacks", ExperimentConfig().attacks)
    if attacks is None:
        attacks = []
    if not isinstance(attacks, list):
        raise ConfigError("attacks must be a list")
    cfg = ExperimentConfig(version=version, transform=t_cfg.to_dict(), attacks=attacks, **kwargs)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig):
    """Cross-field checks that do not need data or checkpoints."""
    ds = cfg.dataset
    if ds.source not in ("synthetic", "directory"):
        raise ConfigError(f"dataset.source must be 'synthetic' or 'directory', got {ds.source!r}")
    if ds.source == "directory" and not (ds.train_path and ds.test_path):
        raise ConfigError("dataset.source 'directory' needs train_path and test_path")
    for key, kinds in (("purifier.kinds", cfg.purifier.kinds), ("purifier.residual_kinds", cfg.purifier.residual_kinds),
                       ("atop.kinds", cfg.atop.kinds), ("eval.kinds", cfg.eval.kinds)):
        bad = [k for k in kinds if k not in KINDS or k == "none"]
        if bad:
            raise ConfigError(f"{key} has unknown transform kinds {bad}")
    if cfg.purifier.variant not in ("gan", "ae"):
        raise ConfigError("purifier.variant must be 'gan' or 'ae'")
    if cfg.atop.train_with not in ("adversarial", "clean"):
        raise ConfigError("atop.train_with must be 'adversarial' or 'clean'")
    if cfg.atop.attack_mode not in ("per_batch", "precomputed"):
        raise ConfigError("atop.attack_mode must be 'per_batch' or 'precomputed'")
    if cfg.atop.lam < 0:
        raise ConfigError("atop.lam must be >= 0")
    if cfg.eval.repeats < 1 or cfg.eval.subset_size < 1:
        raise ConfigError("eval.repeats and eval.subset_size must be >= 1")
    if cfg.sweep.param not in ("sigma", "rate", "n_masks"):
        raise ConfigError("sweep.param must be one of sigma, rate, n_masks")
    stages = {"clean", "adversarial", "transformed", "purified", "purified_adversarial"}
    if set(cfg.render.stages) - stages:
        raise ConfigError(f"render.stages must be drawn from {sorted(stages)}")
    for value in (cfg.atop.attack, cfg.sweep.attack, cfg.render.attack):
        if value is not None:
            parse_attack(value)
    cfg.attack_configs()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as err:
        raise ConfigError(f"cannot parse {path}: {err}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(data)


def apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply ``section.key=value`` overrides; values are parsed as YAML scalars/lists."""
    data = cfg.to_dict()
    for item in overrides:
        target, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError:
            value = raw
        parts = target.strip().split(".")
        if len(parts) == 1 and parts[0] in ("attacks", "version"):
            data[parts[0]] = value
            continue
        if len(parts) != 2:
            raise ConfigError(f"override {item!r} must name section.key")
        section, key = parts
        if section not in data or not isinstance(data[section], dict):
            raise ConfigError(f"unknown section {section!r} in override {item!r}")
        if key not in data[section]:
            raise ConfigError(f"unknown key {section}.{key} in override {item!r}")
        data[section][key] = value
    return config_from_dict(data)
