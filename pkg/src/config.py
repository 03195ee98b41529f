"""
Configuration objects and the flat key=value file format.

A configuration file holds one "key = value" pair per line; blank lines and
lines starting with '#' are ignored and unknown keys are rejected.
"""

import io
import logging

from typing import Any, Callable, Dict, List, Tuple

from .utils import ConfigError

logger = logging.getLogger(__name__)

# Dedicated view-token ids are reserved for this many views.
MAX_VIEWS = 8

# Longest prompt the encoder accepts.
MAX_SEQUENCE_LENGTH = 1024

VIEW_TOKEN_MODES = ("dedicated", "first-k", "lexical")

# Full-scale learning rates (220M and 3B backbones). Documented presets only;
# the toy models train with DEFAULT_LEARNING_RATE.
LR_PRESETS = {
    "t5-base": 1e-4,
    "t5-3b": 1e-5,
}
DEFAULT_LEARNING_RATE = 1e-3


def parse_key_value_text(text, source="<config>"):
    # type: (str, str) -> List[Tuple[int, str, str]]
    """
    Split key=value text into (line_number, key, raw_value) entries.

    Args:
        text: File contents.
        source: Name used in error messages.

    Returns:
        Entries in file order.

    Raises:
        ConfigError: On a line without '=' or a repeated key.
    """
    entries = []
    seen = {}  # type: Dict[str, int]
    for number, line in enumerate(io.StringIO(text), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError("{}:{}: expected 'key = value', got '{}'".format(
                source, number, stripped
            ))
        key, value = stripped.split("=", 1)
        key = key.strip()
        if key in seen:
            raise ConfigError("{}:{}: key '{}' already set on line {}".format(
                source, number, key, seen[key]
            ))
        seen[key] = number
        entries.append((number, key, value.strip()))
    return entries


def read_key_value_file(path):
    # type: (str) -> List[Tuple[int, str, str]]
    """Read and split a key=value file."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except IOError as e:
        raise ConfigError("cannot read config file '{}': {}".format(path, e))
    return parse_key_value_text(text, source=path)


def _to_bool(raw):
    # type: (str) -> bool
    lowered = raw.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError("not a boolean: '{}'".format(raw))


def apply_entries(defaults, converters, entries, source):
    # type: (Dict[str, Any], Dict[str, Callable[[str], Any]], List[Tuple[int, str, str]], str) -> Dict[str, Any]
    """
    Overlay parsed entries onto a dictionary of defaults.

    Raises:
        ConfigError: On an unknown key or a value that does not convert.
    """
    values = dict(defaults)
    for number, key, raw in entries:
        if key not in converters:
            raise ConfigError("{}:{}: unknown key '{}' (known: {})".format(
                source, number, key, ", ".join(sorted(converters))
            ))
        try:
            values[key] = converters[key](raw)
        except ValueError as e:
            raise ConfigError("{}:{}: bad value for '{}': {}".format(source, number, key, e))
    return values


class EncoderConfig(object):
    """Shape of the passage encoder."""

    def __init__(self, d=32, layers=2, heads=4, max_length=64, views=4,
                 view_token_mode="dedicated", vocab_size=64, mlp_ratio=4):
        # type: (int, int, int, int, int, str, int, int) -> None
        """
        Initialize an encoder configuration.

        Args:
            d: Model width.
            layers: Encoder depth.
            heads: Attention heads; must divide d.
            max_length: Maximum prompt length L.
            views: Number of view tokens m.
            view_token_mode: "dedicated", "first-k" or "lexical".
            vocab_size: Token-id count.
            mlp_ratio: Hidden width of the feed-forward block, in multiples of d.

        Raises:
            ConfigError: If any invariant is violated.
        """
        self.d = d
        self.layers = layers
        self.heads = heads
        self.max_length = max_length
        self.views = views
        self.view_token_mode = view_token_mode
        self.vocab_size = vocab_size
        self.mlp_ratio = mlp_ratio
        self.validate()

    def validate(self):
        # type: () -> None
        if self.d < 1 or self.heads < 1 or self.d % self.heads != 0:
            raise ConfigError("d={} must be a positive multiple of heads={}".format(self.d, self.heads))
        if self.layers < 0:
            raise ConfigError("encoder layers must be non-negative, got {}".format(self.layers))
        if not 1 <= self.views <= MAX_VIEWS:
            raise ConfigError("views must lie in [1, {}], got {}".format(MAX_VIEWS, self.views))
        if self.max_length < self.views + 2 or self.max_length > MAX_SEQUENCE_LENGTH:
            raise ConfigError("max_length must lie in [views + 2, {}], got {}".format(
                MAX_SEQUENCE_LENGTH, self.max_length
            ))
        if self.view_token_mode not in VIEW_TOKEN_MODES:
            raise ConfigError("view_token_mode must be one of {}, got '{}'".format(
                ", ".join(VIEW_TOKEN_MODES), self.view_token_mode
            ))
        if self.mlp_ratio < 1:
            raise ConfigError("mlp_ratio must be at least 1, got {}".format(self.mlp_ratio))

    @property
    def head_dim(self):
        # type: () -> int
        return self.d // self.heads

    def __repr__(self):
        # type: () -> str
        return "EncoderConfig(d={}, layers={}, heads={}, L={}, m={}, mode={})".format(
            self.d, self.layers, self.heads, self.max_length, self.views, self.view_token_mode
        )


class DecoderConfig(object):
    """Shape of the anchor decoder; the width is shared with the encoder."""

    def __init__(self, d=32, layers=1, heads=4, mlp_ratio=4):
        # type: (int, int, int, int) -> None
        self.d = d
        self.layers = layers
        self.heads = heads
        self.mlp_ratio = mlp_ratio
        if d < 1 or heads < 1 or d % heads != 0:
            raise ConfigError("decoder d={} must be a positive multiple of heads={}".format(d, heads))
        if layers < 1:
            raise ConfigError("decoder needs at least one layer, got {}".format(layers))

    @property
    def head_dim(self):
        # type: () -> int
        return self.d // self.heads

    def __repr__(self):
        # type: () -> str
        return "DecoderConfig(d={}, layers={}, heads={})".format(self.d, self.layers, self.heads)


_TRAIN_DEFAULTS = {
    "d": 32,
    "encoder_layers": 2,
    "encoder_heads": 4,
    "max_length": 64,
    "views": 4,
    "view_token_mode": "dedicated",
    "vocab_size": 64,
    "mlp_ratio": 4,
    "decoder_layers": 1,
    "decoder_heads": 4,
    "init_std": 0.02,
    "epochs": 20,
    "batch_size": 8,
    "learning_rate": DEFAULT_LEARNING_RATE,
    "beta1": 0.9,
    "beta2": 0.999,
    "adam_eps": 1e-8,
    "warmup_ratio": 0.05,
    "lr_decay": "linear",
    "temperature": 0.8,
    "candidates_per_record": 5,
    "seed": 0,
    "orthogonal_weight": 1.0,
    "validation_k": 10,
}  # type: Dict[str, Any]

_TRAIN_CONVERTERS = {
    "d": int,
    "encoder_layers": int,
    "encoder_heads": int,
    "max_length": int,
    "views": int,
    "view_token_mode": str,
    "vocab_size": int,
    "mlp_ratio": int,
    "decoder_layers": int,
    "decoder_heads": int,
    "init_std": float,
    "epochs": int,
    "batch_size": int,
    "learning_rate": float,
    "beta1": float,
    "beta2": float,
    "adam_eps": float,
    "warmup_ratio": float,
    "lr_decay": str,
    "temperature": float,
    "candidates_per_record": int,
    "seed": int,
    "orthogonal_weight": float,
    "validation_k": int,
    "preset": str,
}  # type: Dict[str, Callable[[str], Any]]


class TrainConfig(object):
    """
    Everything that determines a training run.

    Model-shape keys are forwarded to EncoderConfig and DecoderConfig; the
    rest drive the optimizer and the objective. Defaults follow the toy
    setting (temperature 0.8, four views, five passages per query).
    """

    KEYS = tuple(sorted(_TRAIN_DEFAULTS))

    def __init__(self, **overrides):
        # type: (**Any) -> None
        """
        Initialize a training configuration.

        Args:
            **overrides: Any of TrainConfig.KEYS, plus "preset" naming an
                entry of LR_PRESETS.

        Raises:
            ConfigError: On unknown keys or invalid values.
        """
        preset = overrides.pop("preset", None)
        unknown = sorted(set(overrides) - set(_TRAIN_DEFAULTS))
        if unknown:
            raise ConfigError("unknown training keys: {}".format(", ".join(unknown)))
        values = dict(_TRAIN_DEFAULTS)
        if preset is not None:
            if preset not in LR_PRESETS:
                raise ConfigError("unknown preset '{}' (known: {})".format(
                    preset, ", ".join(sorted(LR_PRESETS))
                ))
            values["learning_rate"] = LR_PRESETS[preset]
        values.update(overrides)
        for key, value in values.items():
            setattr(self, key, value)
        self.validate()

    @classmethod
    def from_file(cls, path):
        # type: (str) -> TrainConfig
        """Load a configuration from a key=value file."""
        entries = read_key_value_file(path)
        values = apply_entries({}, _TRAIN_CONVERTERS, entries, path)
        return cls(**values)

    def validate(self):
        # type: () -> None
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative, got {}".format(self.epochs))
        positive = ("batch_size", "learning_rate", "temperature",
                    "candidates_per_record", "validation_k", "adam_eps")
        for key in positive:
            if not getattr(self, key) > 0:
                raise ConfigError("{} must be positive, got {}".format(key, getattr(self, key)))
        if self.candidates_per_record < 2:
            raise ConfigError("candidates_per_record must be at least 2, got {}".format(
                self.candidates_per_record
            ))
        for key in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, key) < 1.0:
                raise ConfigError("{} must lie in [0, 1), got {}".format(key, getattr(self, key)))
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigError("warmup_ratio must lie in [0, 1), got {}".format(self.warmup_ratio))
        if self.lr_decay not in ("linear", "none"):
            raise ConfigError("lr_decay must be 'linear' or 'none', got '{}'".format(self.lr_decay))
        if self.orthogonal_weight < 0:
            raise ConfigError("orthogonal_weight must be non-negative, got {}".format(
                self.orthogonal_weight
            ))
        if not self.init_std > 0:
            raise ConfigError("init_std must be positive, got {}".format(self.init_std))
        # Builds and validates the model shapes.
        self.encoder_config()
        self.decoder_config()

    def encoder_config(self):
        # type: () -> EncoderConfig
        return EncoderConfig(
            d=self.d,
            layers=self.encoder_layers,
            heads=self.encoder_heads,
            max_length=self.max_length,
            views=self.views,
            view_token_mode=self.view_token_mode,
            vocab_size=self.vocab_size,
            mlp_ratio=self.mlp_ratio,
        )

    def decoder_config(self):
        # type: () -> DecoderConfig
        return DecoderConfig(
            d=self.d,
            layers=self.decoder_layers,
            heads=self.decoder_heads,
            mlp_ratio=self.mlp_ratio,
        )

    def to_dict(self):
        # type: () -> Dict[str, Any]
        return dict((key, getattr(self, key)) for key in self.KEYS)

    def replace(self, **changes):
        # type: (**Any) -> TrainConfig
        """Return a copy with some keys changed."""
        values = self.to_dict()
        values.update(changes)
        return TrainConfig(**values)

    def to_text(self):
        # type: () -> str
        """Render as a key=value file."""
        return "".join("{} = {}\n".format(key, getattr(self, key)) for key in self.KEYS)

    def __eq__(self, other):
        # type: (object) -> bool
        return isinstance(other, TrainConfig) and self.to_dict() == other.to_dict()

    def __ne__(self, other):
        return not self.__eq__(other)

    def __repr__(self):
        # type: () -> str
        return "TrainConfig({})".format(", ".join(
            "{}={!r}".format(key, getattr(self, key)) for key in self.KEYS
        ))
