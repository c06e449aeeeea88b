"""Run configuration: one YAML file, dotted-key overrides and environment overrides."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

ENV_PREFIX = "LESION_SYNTH__"


class ConfigError(ValueError):
    pass


@dataclass
class ToyConfig:
    num_classes: int = 3
    samples_per_class: int = 100
    seed: int = 0


@dataclass
class DataConfig:
    root: str = "data/toy"  # dataset directory, relative to --out
    resolution: tuple = (64, 64)
    train_fraction: float = 0.8
    image_dir: Optional[str] = None  # inputs for prepare-data
    mask_dir: Optional[str] = None
    label_table: Optional[str] = None
    mask_suffix: str = ""
    toy: ToyConfig = field(default_factory=ToyConfig)


@dataclass
class TokenizerConfig:
    scales: list = field(default_factory=lambda: [[1, 1], [2, 2], [3, 3], [4, 4], [6, 6], [8, 8], [16, 16]])
    vocab_size: int = 1024
    code_dim: int = 32
    channels: int = 64
    n_down: int = 2
    lambda_perceptual: float = 1.0
    lambda_adversarial: float = 0.1
    disc_start_epoch: int = 20
    commitment_beta: float = 0.25
    learning_rate: float = 1e-3
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.05
    epochs: int = 200
    batch_size: int = 35
    restart_dead_codes: bool = True


@dataclass
class SamplerConfig:
    temperature: float = 1.0
    top_k: int = 0
    top_p: float = 1.0


@dataclass
class VarConfig:
    scales: Optional[list] = None  # None: use the tokenizer's scales
    depth: int = 6
    heads: int = 4
    width: int = 256
    mlp_ratio: float = 4.0
    learning_rate: float = 1e-3
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.05
    epochs: int = 200
    batch_size: int = 35
    grad_clip: float = 1.0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)


@dataclass
class MeasurementConfig:
    num_levels: int = 16
    hist_bins: int = 32
    codebook_path: Optional[str] = "checkpoints/codebook.csv"  # relative to the run directory


@dataclass
class DownstreamConfig:
    enabled: bool = False
    target_per_class: Optional[int] = None
    epochs: int = 20
    batch_size: int = 32


@dataclass
class EvaluationConfig:
    samples_per_class: int = 20
    extractor_seed: int = 0
    is_splits: int = 10
    classifier_epochs: int = 15
    inter_class: bool = True
    downstream: DownstreamConfig = field(default_factory=DownstreamConfig)


@dataclass
class AblationConfig:
    LF: bool = True
    FM: bool = False
    AM: bool = True


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    var: VarConfig = field(default_factory=VarConfig)
    measurements: MeasurementConfig = field(default_factory=MeasurementConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    seed: int = 0

    # ------------------------------------------------------------ derived

    @property
    def measurement_mode(self):
        if self.ablation.FM:
            return "fixed"
        return "extracted" if self.ablation.AM else "none"

    def to_dict(self):
        return _plain(dataclasses.asdict(self))

    def hash(self, exclude=()):
        d = self.to_dict()
        for key in exclude:
            _pop_dotted(d, key)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @property
    def run_id(self):
        """Short hash of everything that affects trained checkpoints."""
        return self.hash(exclude=("evaluation", "var.sampler"))[:12]

    def with_overrides(self, overrides):
        d = self.to_dict()
        for key, value in overrides.items():
            _set_dotted(d, key, value)
        return from_dict(d)

    def validate(self):
        a = self.ablation
        if a.FM and a.AM:
            raise ConfigError("ablation.FM and ablation.AM are mutually exclusive")
        if a.AM and not self.measurements.codebook_path:
            raise ConfigError("ablation.AM requires measurements.codebook_path")
        if not 0.0 < self.data.train_fraction < 1.0:
            raise ConfigError("data.train_fraction must be in (0, 1)")
        if len(self.data.resolution) != 2 or min(self.data.resolution) < 1:
            raise ConfigError("data.resolution must be [H, W] with positive entries")
        if self.data.toy.num_classes < 2 or self.data.toy.samples_per_class < 1:
            raise ConfigError("data.toy needs num_classes >= 2 and samples_per_class >= 1")
        for section, names in (("tokenizer", ("epochs", "batch_size", "vocab_size", "channels")),
                               ("var", ("epochs", "batch_size", "depth", "heads", "width"))):
            for n in names:
                if getattr(getattr(self, section), n) < 1:
                    raise ConfigError(f"{section}.{n} must be >= 1")
        if self.var.width % self.var.heads:
            raise ConfigError("var.width must be divisible by var.heads")
        s = self.var.sampler
        if s.temperature <= 0 or not 0 < s.top_p <= 1 or s.top_k < 0:
            raise ConfigError("var.sampler needs temperature > 0, 0 < top_p <= 1, top_k >= 0")
        if self.evaluation.samples_per_class < 2:
            raise ConfigError("evaluation.samples_per_class must be >= 2 for FID")
        return self


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _split_key(key):
    parts = [p for p in key.split(".") if p]
    if not parts:
        raise ConfigError(f"empty override key {key!r}")
    return parts


def _set_dotted(d, key, value):
    parts = _split_key(key)
    node = d
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def _pop_dotted(d, key):
    parts = _split_key(key)
    node = d
    for p in parts[:-1]:
        node = node[p]
    node.pop(parts[-1], None)


def _build(cls, data, path):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section {path or '<root>'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s) in {path or '<root>'}: {', '.join(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        default = getattr(defaults, name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{path}.{name}".lstrip("."))
        else:
            kwargs[name] = _coerce(value, default, f"{path}.{name}".lstrip("."))
    return cls(**kwargs)


def _coerce(value, default, key):
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, (list, tuple)):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key} must be a list, got {value!r}")
        return type(default)(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key} must be a string, got {value!r}")
    return value


def from_dict(d):
    return _build(RunConfig, copy.deepcopy(d), "")


def parse_value(text):
    """Interpret an override value with YAML scalar rules (``6``, ``true``, ``[1, 2]``)."""
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {text!r}: {exc}") from None


def parse_overrides(items):
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def env_overrides(environ=None):
    """``LESION_SYNTH__VAR__DEPTH=4`` becomes ``{"var.depth": 4}``. Keys are lower-cased
    except the ablation flags, which stay upper case."""
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        parts = name[len(ENV_PREFIX):].split("__")
        parts = [p if p in ("LF", "FM", "AM") else p.lower() for p in parts]
        out[".".join(parts)] = parse_value(value)
    return out


def load_config(path=None, overrides=None, seed=None, environ=None):
    """File, then environment, then explicit overrides, then ``seed``; validated."""
    data = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: invalid YAML: {exc}") from None
    cfg = from_dict(data)
    merged = {**env_overrides(environ), **(overrides or {})}
    if seed is not None:
        merged["seed"] = seed
    if merged:
        cfg = cfg.with_overrides(merged)
    return cfg.validate()
