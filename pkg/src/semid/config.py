"""Pipeline configuration: nested sections, strict keys, presets.

Configs live as JSON. Every key must name a known field (typos fail
loudly instead of silently running defaults), and a resolved copy of
the config is written next to every run's outputs so artifact
directories stay self-describing. Ablation presets differ from the
default only in the regularizer weights and the loss temperature.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields, is_dataclass

from .exceptions import FormatError, ParameterError
from .synthetic import SyntheticSpec
from .validation import check_positive_int

CONFIG_VERSION = 1


@dataclass
class DataConfig:
    """Where interactions and semantic embeddings come from.

    Leaving both paths unset generates a synthetic catalog from
    ``synthetic`` instead; setting exactly one of them is an error.
    """

    interactions: str | None = None
    embeddings: str | None = None
    min_count: int = 5
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)


@dataclass
class CfConfig:
    n_factors: int = 16
    epochs: int = 600
    learning_rate: float = 0.05
    reg: float = 0.01
    batch_size: int = 1024


@dataclass
class TokenizerConfig:
    levels: int = 3
    codebook_size: int = 64
    code_dim: int = 16
    hidden: tuple[int, ...] = (64, 64)
    mu: float = 0.25
    alpha: float = 0.02
    cf_norm: float | None = 256.0
    beta: float = 1e-4
    n_clusters: int = 10
    contrastive_mode: str = "infonce"
    diversity_levels: str = "all"
    epochs: int = 600
    batch_size: int = 256
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    kmeans_refresh: int = 10
    dead_code_restart: bool = False


@dataclass
class RecommenderConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int | None = None
    epochs: int = 15
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    tau: float = 1.0
    mode: str = "sliding-window"
    history_cap: int = 6
    beam_width: int = 20
    validation_users: int = 0
    validation_every: int = 1


@dataclass
class EvalConfig:
    k_values: tuple[int, ...] = (5, 10)
    stage: str = "test"


@dataclass
class PipelineConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    cf: CfConfig = field(default_factory=CfConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    recommender: RecommenderConfig = field(default_factory=RecommenderConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "PipelineConfig":
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ParameterError(f"seed must be a non-negative integer, got {self.seed!r}")
        if (self.data.interactions is None) != (self.data.embeddings is None):
            raise ParameterError(
                "data.interactions and data.embeddings must be given together "
                "(or both omitted for synthetic data)"
            )
        self.data.synthetic.validate()
        check_positive_int(self.data.min_count, "data.min_count")
        if self.evaluation.stage not in ("validation", "test"):
            raise ParameterError(
                f"evaluation.stage must be 'validation' or 'test', got {self.evaluation.stage!r}"
            )
        ks = self.evaluation.k_values
        if not ks or any(not isinstance(k, int) or k < 1 for k in ks):
            raise ParameterError(f"evaluation.k_values must be positive integers, got {ks!r}")
        return self


def _from_dict(cls, payload: dict, path: str):
    if not isinstance(payload, dict):
        raise ParameterError(f"{path or 'config'} must be an object, got {type(payload).__name__}")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in payload.items():
        where = f"{path}.{key}" if path else key
        if key not in known:
            raise ParameterError(f"unknown config key {where!r}")
        default = known[key].default
        factory = known[key].default_factory
        template = factory() if factory is not dataclasses.MISSING else default
        if is_dataclass(template):
            kwargs[key] = _from_dict(type(template), value, where)
        elif isinstance(template, tuple) and isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(payload: dict) -> PipelineConfig:
    """Build a validated config from nested dicts, rejecting unknown keys."""
    return _from_dict(PipelineConfig, payload, "").validate()


def config_to_dict(config: PipelineConfig) -> dict:
    return dataclasses.asdict(config)


def load_config(path) -> PipelineConfig:
    try:
        with open(path, encoding="utf-8") as f:
            payload = json.load(f)
    except OSError as exc:
        raise FormatError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
    return config_from_dict(payload)


def save_config(config: PipelineConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config_to_dict(config), f, indent=2, sort_keys=True)
        f.write("\n")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text  # unquoted strings are taken literally


def apply_overrides(config: PipelineConfig, overrides) -> PipelineConfig:
    """Apply ``section.key=value`` strings to a copy of the config.

    Values parse as JSON where possible (numbers, booleans, lists,
    null), otherwise as literal strings. Every dotted path must name an
    existing field.
    """
    payload = config_to_dict(config)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ParameterError(f"override must look like key=value, got {item!r}")
        node = payload
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ParameterError(f"unknown config key {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ParameterError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(raw)
    return config_from_dict(payload)


# One preset per ablation row: regularizers off/on separately, together,
# and together with a sharpened generation loss.
PRESETS: dict[str, dict[str, float]] = {
    "semantic-only": {"tokenizer.alpha": 0.0, "tokenizer.beta": 0.0, "recommender.tau": 1.0},
    "cf": {"tokenizer.beta": 0.0, "recommender.tau": 1.0},
    "diversity": {"tokenizer.alpha": 0.0, "recommender.tau": 1.0},
    "full": {"recommender.tau": 1.0},
    "full-tempered": {"recommender.tau": 0.8},
}


def preset_config(name: str, base: PipelineConfig | None = None) -> PipelineConfig:
    if name not in PRESETS:
        raise ParameterError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    base = base if base is not None else PipelineConfig()
    overrides = [f"{key}={value}" for key, value in PRESETS[name].items()]
    return apply_overrides(base, overrides)
