"""Run configuration: nested dataclasses serialized as JSON, with dotted-key overrides."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import DropoutPolicy, MaskPolicy
from .corpus import CorpusConfig
from .objective import LossWeights


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field path."""


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 16
    layers: int = 2
    heads: int = 2
    ffn_mult: int = 2
    visual_channels: int = 8
    embed_dim: int = 16
    tau: float = 0.1
    max_len: int = 128
    init_seed: int = 0

    def __post_init__(self):
        for name in ("dim", "layers", "heads", "ffn_mult", "visual_channels", "embed_dim", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if (3 * self.dim) % self.heads:
            raise ValueError("heads must divide the fused width 3*dim")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


@dataclass(frozen=True)
class TokenizerConfig:
    k: int = 64
    teacher_dim: int = 16
    max_iters: int = 100
    n_init: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be at least 2")


@dataclass(frozen=True)
class PhonemeToUnitSettings:
    dim: int = 32
    heads: int = 2
    enc_layers: int = 2
    dec_layers: int = 2
    lr: float = 3e-3
    warmup: int = 50
    steps: int = 400
    batch_size: int = 16
    duration_weight: float = 1.0
    seed: int = 0


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    terms: tuple = ("AV", "A", "AP", "P")

    def __post_init__(self):
        LossWeights(self.lambda1, self.lambda2, self.lambda3)
        if "AV" not in self.terms or not set(self.terms) <= {"AV", "A", "AP", "P"}:
            raise ValueError("terms must include AV and only name AV, A, AP, P")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3)


@dataclass(frozen=True)
class SamplerSettings:
    ratios: tuple = (0.25, 0.25, 0.25, 0.25)
    batch_size: int = 8

    def __post_init__(self):
        if len(self.ratios) != 4 or any(r < 0 for r in self.ratios) or sum(self.ratios) <= 0:
            raise ValueError("ratios needs four non-negative entries (AV, A, AP, P) with a positive sum")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    warmup: int = 100
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.lr <= 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1 or self.eps <= 0:
            raise ValueError("lr > 0, betas in [0, 1) and eps > 0 are required")


@dataclass(frozen=True)
class TrainSettings:
    steps: int = 1500
    checkpoint_every: int = 500
    wall_clock: bool = False

    def __post_init__(self):
        if self.steps < 0 or self.checkpoint_every < 0:
            raise ValueError("steps and checkpoint_every must be non-negative")


@dataclass(frozen=True)
class ProbeConfig:
    steps: int = 400
    lr: float = 0.05
    batch_frames: int = 2048
    tune_encoder: bool = False
    tune_lr: float = 5e-4
    tune_batch: int = 8
    snr_grid: tuple = (-10.0, -5.0, 0.0, 5.0, 10.0)
    noise_types: tuple = ("babble", "speech", "music")
    augment_snr: tuple = (0.0, 25.0)
    augment_copies: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.augment_snr and (len(self.augment_snr) != 2 or self.augment_snr[0] > self.augment_snr[1]):
            raise ValueError("augment_snr must be empty or a [low, high] dB range")
        if self.augment_copies < 0 or self.steps < 0:
            raise ValueError("augment_copies and steps must be non-negative")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    p2u: PhonemeToUnitSettings = field(default_factory=PhonemeToUnitSettings)
    masking: MaskPolicy = field(default_factory=MaskPolicy)
    dropout: DropoutPolicy = field(default_factory=DropoutPolicy)
    loss: LossConfig = field(default_factory=LossConfig)
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    probe: ProbeConfig = field(default_factory=ProbeConfig)


# ------------------------------------------------------------ (de)serialize


def to_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            value = to_dict(value)
        elif isinstance(value, tuple):
            value = list(value)
        elif isinstance(value, dict):
            value = {k: value[k] for k in sorted(value)}
        out[f.name] = value
    return out


def dumps(cfg: RunConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"


def _coerce(value, hint, path: str):
    origin = typing.get_origin(hint)
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a section, got {value!r}")
        return from_dict(hint, value, path)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if hint is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        args = typing.get_args(hint)
        if args and args[-1] is not Ellipsis and len(args) == len(value):
            return tuple(_coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
        return tuple(value)
    if hint is dict or origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping, got {value!r}")
        return dict(value)
    return value


def from_dict(cls, data: dict, path: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path + '.' if path else ''}{unknown[0]}: unknown field")
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        kwargs[name] = _coerce(value, hints[name], sub)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def loads(text: str) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: not valid JSON ({exc})") from exc
    return from_dict(RunConfig, data)


def load(path) -> RunConfig:
    return loads(Path(path).read_text())


def _leaf_paths(cls, prefix: str = "") -> list[str]:
    out = []
    hints = typing.get_type_hints(cls)
    for f in dataclasses.fields(cls):
        p = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(hints[f.name]):
            out.extend(_leaf_paths(hints[f.name], p + "."))
        else:
            out.append(p)
    return out


def resolve_key(key: str) -> str:
    """Accept a full dotted path or a leaf name that is unique across sections."""
    leaves = _leaf_paths(RunConfig)
    if key in leaves:
        return key
    matches = [p for p in leaves if p.split(".")[-1] == key]
    if len(matches) == 1:
        return matches[0]
    if not matches:
        raise ConfigError(f"{key}: unknown field")
    raise ConfigError(f"{key}: ambiguous, use one of {', '.join(matches)}")


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply ``key=value`` strings; values are parsed as JSON when possible."""
    data = to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"{item}: override must look like key=value")
        key, raw = item.split("=", 1)
        path = resolve_key(key.strip())
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = path.split(".")
        for p in parts[:-1]:
            node = node[p]
        node[parts[-1]] = value
    return from_dict(RunConfig, data)
