"""Run configuration: one declarative JSON file, preset overlays, dotted overrides.

A config file is a JSON object whose top-level keys are the sections below;
any omitted key keeps its default::

    {
      "seed": 0,
      "melfront": {"hop": 256, "n_mels": 80},
      "model": {"dim_neck": 32, "freq": 32},
      "stage1": {"epochs": 200, "batch_size": 16}
    }

Command-line overrides use ``section.key=value`` with JSON values, e.g.
``--set model.freq=16 --set stage2.learnable_mel=true``.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

from .melfront import MelFrontConfig
from .model import ModelConfig
from .vocoder import DiscriminatorConfig, GeneratorConfig

PRESETS = ("smoke", "bottleneck-autovc", "latent-10hz", "adv-speaker", "vcc20", "e2e", "learnable-mel")


@dataclass
class Stage1Config:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.99)
    epochs: int = 200
    batch_size: int = 16
    chunk_len: int = 8192
    max_steps: int | None = None
    adversarial_weight: float = 0.0  # domain confusion regularizer, off by default
    classifier_lr: float = 1e-3
    classifier_betas: tuple = (0.9, 0.99)
    classifier_hidden: int = 256
    checkpoint_every: int = 1

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.classifier_betas = tuple(self.classifier_betas)
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1 or self.chunk_len < 1:
            raise ValueError("stage1: lr, epochs, batch_size and chunk_len must be positive")


@dataclass
class Stage2Config:
    lr: float = 1e-4
    betas: tuple = (0.5, 0.9)
    epochs: int = 200
    batch_size: int = 16
    chunk_len: int = 8192
    max_steps: int | None = None
    content_weight: float = 20.0
    feature_match_weight: float = 10.0
    learnable_mel: bool = False
    checkpoint_every: int = 1

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.content_weight <= 0:
            raise ValueError("stage2: content_weight must be > 0")
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1 or self.chunk_len < 1:
            raise ValueError("stage2: lr, epochs, batch_size and chunk_len must be positive")


@dataclass
class ProbeConfig:
    hidden: int = 256
    lr: float = 0.1
    max_epochs: int = 200
    patience: int = 10
    batch_size: int = 64
    fractions: tuple = (0.7, 0.1, 0.2)
    speaker_test_frac: float = 0.3

    def __post_init__(self):
        self.fractions = tuple(self.fractions)


@dataclass
class BenchConfig:
    repeats: int = 5
    parallel: bool = False


_SECTIONS = {
    "melfront": MelFrontConfig,
    "model": ModelConfig,
    "generator": GeneratorConfig,
    "discriminator": DiscriminatorConfig,
    "stage1": Stage1Config,
    "stage2": Stage2Config,
    "probe": ProbeConfig,
    "bench": BenchConfig,
}


@dataclass
class RunConfig:
    seed: int = 0
    preset: str | None = None
    melfront: MelFrontConfig = field(default_factory=MelFrontConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def __post_init__(self):
        if self.generator.hop != self.melfront.hop:
            raise ValueError(
                f"vocoder upsampling product {self.generator.hop} must equal Mel hop {self.melfront.hop}"
            )
        if self.generator.n_mels != self.melfront.n_mels or self.model.n_mels != self.melfront.n_mels:
            raise ValueError("n_mels must agree across melfront, model and generator")

    def to_dict(self) -> dict:
        d = asdict(self)
        for sec in ("stage1", "stage2", "probe"):
            for k, v in d[sec].items():
                if isinstance(v, tuple):
                    d[sec][k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, typ in _SECTIONS.items():
            sec = d.pop(name, {}) or {}
            allowed = {f.name for f in fields(typ)}
            bad = set(sec) - allowed
            if bad:
                raise ValueError(f"unknown keys in [{name}]: {sorted(bad)}")
            kwargs[name] = typ(**sec)
        return cls(**d, **kwargs)


def _merge(base: dict, overlay: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in overlay.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def preset_dict(name: str) -> dict:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    text = resources.files("bottlevc").joinpath("presets").joinpath(f"{name}.json").read_text()
    return json.loads(text)


def apply_override(d: dict, assignment: str) -> dict:
    if "=" not in assignment:
        raise ValueError(f"override must look like section.key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    d = copy.deepcopy(d)
    node = d
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return d


def load_config(path=None, preset: str | None = None, overrides=()) -> RunConfig:
    """Defaults <- preset <- config file <- overrides."""
    d = RunConfig().to_dict()
    if preset:
        d = _merge(d, preset_dict(preset))
        d["preset"] = preset
    if path is not None:
        user = json.loads(Path(path).read_text())
        if user.get("preset") and not preset:
            d = _merge(d, preset_dict(user["preset"]))
        d = _merge(d, user)
    for o in overrides:
        d = apply_override(d, o)
    return RunConfig.from_dict(d)
