"""Model, training and run configuration.

Configuration files are flat ``key = value`` text with ``#`` comments. Unknown
keys are rejected so typos never pass silently.
"""

import dataclasses
from dataclasses import dataclass, field, fields

from .exceptions import ConfigParseError, ConfigurationError

VARIANTS = ("ensemble", "inception", "residual")
COMMANDS = ("prepare", "train", "evaluate", "ablate", "macs", "gradcheck")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``num_classes = 0`` means "take the class count from the data".
    """

    num_classes: int = 0
    variant: str = "ensemble"
    input_size: int = 32
    stem_channels: int = 16
    branch_channels: int = 64
    attention_reduction: int = 8
    head_dropout: float = 0.5
    aux_channels: int = 128
    aux_hidden: int = 128
    aux_dropout: float = 0.7

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got '{self.variant}'")
        if self.num_classes < 0:
            raise ConfigurationError("num_classes must be >= 0")
        if self.input_size < 8 or self.input_size % 4:
            raise ConfigurationError("input_size must be a multiple of 4 and at least 8")
        if self.stem_channels < 1:
            raise ConfigurationError("stem_channels must be >= 1")
        if self.branch_channels < 8 or self.branch_channels % 8:
            raise ConfigurationError("branch_channels must be a positive multiple of 8")
        if self.attention_reduction < 1:
            raise ConfigurationError("attention_reduction must be >= 1")
        if self.fused_channels % self.attention_reduction:
            raise ConfigurationError(
                f"attention input of {self.fused_channels} channels is not divisible by "
                f"attention_reduction={self.attention_reduction}"
            )
        for name in ("head_dropout", "aux_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1)")
        if self.aux_channels < 1 or self.aux_hidden < 1:
            raise ConfigurationError("aux_channels and aux_hidden must be >= 1")

    @property
    def fused_channels(self):
        factor = 2 if self.variant == "ensemble" else 1
        return factor * self.branch_channels

    @property
    def feature_size(self):
        return self.input_size // 4

    def with_classes(self, num_classes):
        return dataclasses.replace(self, num_classes=int(num_classes))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.01
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    aux_weight: float = 0.3
    augment: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2 (batch normalization)")
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be >= 0")
        if self.optimizer != "sgd":
            raise ConfigurationError(f"unsupported optimizer '{self.optimizer}'")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")
        if not 0.0 <= self.aux_weight <= 1.0:
            raise ConfigurationError("aux_weight must lie in [0, 1]")
        if self.seed < 0:
            raise ConfigurationError("seed must be >= 0")


@dataclass(frozen=True)
class RunSpec:
    command: str
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: str = ""
    synthetic: str = ""
    out: str = "runs"
    train_fraction: float = 0.8
    no_preprocess: bool = False
    checkpoint: str = ""
    scale: str = "tiny"

    @property
    def seed(self):
        return self.train.seed

    @property
    def synthetic_shape(self):
        """``(classes, per_class)`` parsed from ``synthetic``, or None."""
        if not self.synthetic:
            return None
        return parse_synthetic(self.synthetic)


RUN_KEYS = ("dataset", "synthetic", "out", "train_fraction", "no_preprocess", "checkpoint",
            "scale")
_MODEL_FIELDS = {f.name: f for f in fields(ModelConfig)}
_TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}
_RUN_FIELDS = {f.name: f for f in fields(RunSpec) if f.name in RUN_KEYS}
KNOWN_KEYS = {**_MODEL_FIELDS, **_TRAIN_FIELDS, **_RUN_FIELDS}


def parse_synthetic(text):
    try:
        classes, per_class = (int(part) for part in str(text).split(","))
    except ValueError:
        raise ConfigParseError(f"synthetic must look like 'K,n', got '{text}'",
                               key="synthetic") from None
    if not 1 <= classes <= 50 or per_class < 2:
        raise ConfigParseError("synthetic needs 1 <= K <= 50 and n >= 2", key="synthetic")
    return classes, per_class


def _convert(key, raw, line=None):
    kind = KNOWN_KEYS[key].type
    kind = {"int": int, "float": float, "bool": bool, "str": str}.get(kind, kind)
    if isinstance(raw, kind) and not (kind is int and isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in ("true", "yes", "1", "on"):
                return True
            if lowered in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigParseError(
            f"cannot read '{text}' as {kind.__name__}", key=key, line=line
        ) from None


def parse_config_text(text):
    """Parse flat ``key = value`` text into ``{key: (value, line)}``."""
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigParseError("expected 'key = value'", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KNOWN_KEYS:
            raise ConfigParseError("unknown configuration key", key=key, line=lineno)
        if key in entries:
            raise ConfigParseError("duplicate configuration key", key=key, line=lineno)
        entries[key] = (_convert(key, value, lineno), lineno)
    return entries


def parse_config(command, text="", overrides=None):
    """Resolve a :class:`RunSpec` from config text plus flag overrides.

    Flag overrides win over file values; all other keys keep their defaults.
    """
    if command not in COMMANDS:
        raise ConfigParseError(f"unknown command '{command}'")
    entries = parse_config_text(text or "")
    values = {key: value for key, (value, _) in entries.items()}
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in KNOWN_KEYS:
            raise ConfigParseError("unknown configuration key", key=key)
        values[key] = _convert(key, value)

    def build(cls, names):
        chosen = {k: values[k] for k in names if k in values}
        try:
            return cls(**chosen)
        except ConfigurationError as exc:
            bad = next((k for k in chosen if k in str(exc)), None)
            line = entries[bad][1] if bad in entries else None
            raise ConfigParseError(str(exc), key=bad, line=line) from None

    model = build(ModelConfig, _MODEL_FIELDS)
    train = build(TrainConfig, _TRAIN_FIELDS)
    run_values = {k: values[k] for k in _RUN_FIELDS if k in values}
    if "synthetic" in run_values and run_values["synthetic"]:
        parse_synthetic(run_values["synthetic"])
    fraction = run_values.get("train_fraction", 0.8)
    if not 0.0 < fraction < 1.0:
        raise ConfigParseError("train_fraction must lie in (0, 1)", key="train_fraction",
                               line=entries.get("train_fraction", (None, None))[1])
    scale = run_values.get("scale", "tiny")
    if scale not in ("tiny", "default"):
        raise ConfigParseError("scale must be 'tiny' or 'default'", key="scale")
    return RunSpec(command=command, model=model, train=train, **run_values)


def render_config(spec):
    """Resolved-config echo in the same flat format ``parse_config`` reads."""
    lines = [f"# resolved configuration for '{spec.command}'"]
    for obj in (spec.model, spec.train):
        for f in fields(obj):
            lines.append(f"{f.name} = {_render(getattr(obj, f.name))}")
    for key in RUN_KEYS:
        lines.append(f"{key} = {_render(getattr(spec, key))}")
    return "\n".join(lines) + "\n"


def _render(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)
