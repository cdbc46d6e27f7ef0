"""Declarative run configuration: one YAML file plus ``--set`` overrides."""
import difflib
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional

import yaml

from . import __version__
from .errors import ConfigError, DSVError
from .model import ModelConfig
from .training import TrainOptions


@dataclass
class DataSection:
    synthetic: bool = True
    audio_dir: Optional[str] = None
    n_speakers: int = 40
    sequences_per_speaker: int = 12
    frames_per_sequence: int = 200
    feature_dim: int = 24
    n_content_classes: int = 8
    gamma_spk: float = 1.0
    sigma_noise: float = 0.3
    block_len: int = 20
    n_test_speakers: int = 12
    dev_per_speaker: int = 1
    test_fraction: float = 0.25
    segment_shift: int = 20
    sample_rate: int = 16000
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_bins: int = 200


@dataclass
class ModelSection:
    variant: str = "apc-enc1-dec1"
    feature_dim: Optional[int] = None  # None: taken from the corpus manifest
    segment_len: int = 20
    latent_dim: int = 8  # sets both latent sizes unless they are given explicitly
    latent_dim_z1: Optional[int] = None
    latent_dim_z2: Optional[int] = None
    hidden_units: int = 32
    m: int = 3
    sigma2_z2: float = 0.25
    alpha_dis: float = 10.0
    dtype: str = "float32"


@dataclass
class TrainingSection:
    learning_rate: float = 1e-3
    batch_size: int = 256
    patience: int = 10
    max_epochs: int = 500
    checkpoint_every: int = 1


@dataclass
class EvaluationSection:
    k_speaker: int = 0
    k_content: int = 8
    probe_kinds: List[str] = field(default_factory=lambda: ["gru", "gru_fc"])
    split: str = "test"
    max_probe_epochs: int = 300


@dataclass
class ConversionSection:
    griffin_lim_iterations: int = 60
    split: str = "test"


SECTIONS = {
    "data": DataSection,
    "model": ModelSection,
    "training": TrainingSection,
    "evaluation": EvaluationSection,
    "conversion": ConversionSection,
}
SCALARS = ("output_dir", "seed")


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    conversion: ConversionSection = field(default_factory=ConversionSection)
    output_dir: Optional[str] = None
    seed: int = 0

    def snapshot(self):
        """Everything that determines results; the output location is excluded."""
        d = asdict(self)
        d.pop("output_dir")
        return d

    @property
    def config_hash(self):
        return hashlib.sha256(json.dumps(self.snapshot(), sort_keys=True).encode()).hexdigest()[:16]

    @property
    def run_id(self):
        return self.config_hash[:12]

    def resolved_output_dir(self):
        return Path(self.output_dir or os.environ.get("DSV_OUTPUT_DIR") or "runs")

    def run_dir(self):
        return self.resolved_output_dir() / self.run_id

    def provenance(self):
        return {"config_hash": self.config_hash, "code_version": __version__, "seed": self.seed}

    def model_config(self, feature_dim=None):
        m = self.model
        F = m.feature_dim if m.feature_dim is not None else feature_dim
        if F is None:
            raise ConfigError("model.feature_dim is unset and no corpus manifest is available")
        try:
            return ModelConfig(
                variant=m.variant, feature_dim=F, segment_len=m.segment_len,
                latent_dim_z1=m.latent_dim_z1 or m.latent_dim, latent_dim_z2=m.latent_dim_z2 or m.latent_dim,
                hidden_units=m.hidden_units, m=m.m, sigma2_z2=m.sigma2_z2, alpha_dis=m.alpha_dis,
                seed=self.seed, dtype=m.dtype)
        except DSVError as exc:
            raise ConfigError(f"invalid model section: {exc}") from exc

    def train_options(self, out_dir):
        t = self.training
        return TrainOptions(learning_rate=t.learning_rate, batch_size=t.batch_size, patience=t.patience,
                            max_epochs=t.max_epochs, out_dir=str(out_dir), checkpoint_every=t.checkpoint_every)


def _suggest(key, valid):
    close = difflib.get_close_matches(key, valid, n=1, cutoff=0.5)
    return f"; did you mean {close[0]!r}?" if close else ""


def _coerce(value, current, where):
    """Type-check ``value`` against the field's default."""
    if value is None or current is None:
        return value
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(current, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(current, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(current, str):
        if isinstance(value, str):
            return value
    elif isinstance(current, list):
        if isinstance(value, list):
            return value
    raise ConfigError(f"{where}: expected {type(current).__name__}, got {value!r}")


_INT_FIELDS_ALLOWING_NONE = {("model", "feature_dim"), ("model", "latent_dim_z1"), ("model", "latent_dim_z2")}


def _build_section(name, values):
    cls = SECTIONS[name]
    if values is None:
        return cls()
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    valid = [f.name for f in fields(cls)]
    defaults = cls()
    kwargs = {}
    for key, value in values.items():
        if key not in valid:
            raise ConfigError(f"unknown key {name}.{key}{_suggest(key, valid)}")
        current = getattr(defaults, key)
        if current is None and (name, key) in _INT_FIELDS_ALLOWING_NONE and value is not None:
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{name}.{key}: expected int, got {value!r}")
        kwargs[key] = _coerce(value, current, f"{name}.{key}")
    return cls(**kwargs)


def config_from_dict(d):
    d = d or {}
    if not isinstance(d, dict):
        raise ConfigError("config file must contain a mapping at the top level")
    valid = list(SECTIONS) + list(SCALARS)
    for key in d:
        if key not in valid:
            nested = [f"{s}.{key}" for s, cls in SECTIONS.items() if key in {f.name for f in fields(cls)}]
            hint = f"; did you mean {nested[0]!r}?" if nested else _suggest(key, valid)
            raise ConfigError(f"unknown key {key}{hint}")
    cfg = RunConfig(**{s: _build_section(s, d.get(s)) for s in SECTIONS},
                    output_dir=_coerce(d.get("output_dir"), "", "output_dir"),
                    seed=_coerce(d.get("seed", 0), 0, "seed"))
    _validate(cfg)
    return cfg


def _validate(cfg):
    cfg.model_config(feature_dim=cfg.data.feature_dim)  # raises ConfigError on bad model values
    for kind in cfg.evaluation.probe_kinds:
        if kind not in ("gru", "gru_fc", "linear"):
            raise ConfigError(f"evaluation.probe_kinds: unknown probe {kind!r}")
    positive = [("training", "batch_size"), ("training", "max_epochs"), ("training", "patience"),
                ("training", "checkpoint_every"), ("data", "segment_shift"),
                ("conversion", "griffin_lim_iterations")]
    for sec, key in positive:
        if getattr(getattr(cfg, sec), key) < 1:
            raise ConfigError(f"{sec}.{key} must be >= 1")
    if not cfg.training.learning_rate > 0:
        raise ConfigError("training.learning_rate must be positive")


def parse_override(text):
    """``section.key=value`` with a YAML-parsed value."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    path, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw) if raw != "" else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {text!r}: unparsable value ({exc})") from exc
    return path.strip().split("."), value


def load_config(path=None, overrides=()):
    d = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file {p} does not exist")
        try:
            d = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: not valid YAML ({exc})") from exc
    for text in overrides:
        keys, value = parse_override(text)
        if len(keys) == 1:
            d[keys[0]] = value
        elif len(keys) == 2:
            section = d.setdefault(keys[0], {})
            if not isinstance(section, dict):
                raise ConfigError(f"override {text!r}: {keys[0]} is not a section")
            section[keys[1]] = value
        else:
            raise ConfigError(f"override {text!r}: expected section.key or a top-level key")
    return config_from_dict(d)


def dump_config(cfg):
    return yaml.safe_dump(asdict(cfg), sort_keys=True)
