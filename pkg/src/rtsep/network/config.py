"""Model topology description, presets, plain-text format and topology fingerprint."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, replace

from rtsep.errors import ConfigError

RNN_KINDS = ("GRU", "LSTM")
NUM_LEVELS = 4


@dataclass(frozen=True)
class ModelConfig:
    """Topology of one generalized CRUSE module.

    The recurrent bottleneck runs on the flattened last encoder map, so its width is
    ``encoder_channels[-1] * freq_extents[-1]``. ``rnn_groups`` splits that width into
    independent recurrent groups (grouped RNN), which is what keeps the bottleneck cheap.
    """

    encoder_channels: tuple = (32, 64, 64, 64)
    kernel: tuple = (2, 3)
    stride: tuple = (1, 2)
    rnn_kind: str = "GRU"
    rnn_layers: int = 1
    rnn_hidden: int | None = None
    rnn_groups: int = 4
    decoders: int = 1
    ctf_taps: tuple = (3, 3)
    input_bins: int = 161
    feature_compression: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        object.__setattr__(self, "stride", tuple(int(s) for s in self.stride))
        object.__setattr__(self, "ctf_taps", tuple(int(t) for t in self.ctf_taps))
        object.__setattr__(self, "rnn_kind", str(self.rnn_kind).upper())
        if self.rnn_hidden is None:
            object.__setattr__(self, "rnn_hidden", self.bottleneck_width)
        self.validate()

    def validate(self):
        problems = []
        if len(self.encoder_channels) != NUM_LEVELS:
            problems.append(f"encoder_channels must list {NUM_LEVELS} layers, got {len(self.encoder_channels)}")
        if any(c < 1 for c in self.encoder_channels):
            problems.append("encoder_channels must be positive")
        if len(self.kernel) != 2 or self.kernel[0] not in (2, 3) or self.kernel[1] < 1 or self.kernel[1] % 2 == 0:
            problems.append(f"kernel must be (time in {{2, 3}}, odd freq), got {self.kernel}")
        if self.stride != (1, 2):
            problems.append(f"stride must be (1, 2), got {self.stride}")
        if self.rnn_kind not in RNN_KINDS:
            problems.append(f"rnn_kind must be one of {RNN_KINDS}, got {self.rnn_kind!r}")
        if self.rnn_layers < 1:
            problems.append("rnn_layers must be >= 1")
        if self.decoders < 1:
            problems.append(f"decoders D must be >= 1, got {self.decoders}")
        if len(self.ctf_taps) != 2 or self.ctf_taps[0] < 1 or self.ctf_taps[1] < 1 or self.ctf_taps[1] % 2 == 0:
            problems.append(f"ctf_taps must be (time >= 1, odd freq >= 1), got {self.ctf_taps}")
        if self.input_bins < 2:
            problems.append("input_bins must be >= 2")
        if not 0.0 < self.feature_compression <= 1.0:
            problems.append(f"feature_compression must be in (0, 1], got {self.feature_compression}")
        if not problems:
            width = self.bottleneck_width
            if self.rnn_hidden != width:
                problems.append(f"rnn_hidden must equal the flattened bottleneck width {width}, got {self.rnn_hidden}")
            if self.rnn_groups < 1 or width % self.rnn_groups:
                problems.append(f"rnn_groups={self.rnn_groups} must divide the bottleneck width {width}")
        if problems:
            raise ConfigError("invalid model config: " + "; ".join(problems))

    @property
    def freq_extents(self) -> tuple:
        """Frequency extent at the encoder input and after each encoder layer."""
        sizes = [self.input_bins]
        for _ in range(NUM_LEVELS):
            sizes.append(math.ceil(sizes[-1] / self.stride[1]))
        return tuple(sizes)

    @property
    def bottleneck_width(self) -> int:
        return self.encoder_channels[-1] * self.freq_extents[-1]

    @property
    def tap_count(self) -> int:
        return self.ctf_taps[0] * self.ctf_taps[1]

    def canonical(self) -> str:
        return to_text(self)

    def fingerprint(self) -> int:
        digest = hashlib.blake2b(self.canonical().encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")

    def with_decoders(self, d: int) -> "ModelConfig":
        return replace(self, decoders=d)


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def to_text(config: ModelConfig) -> str:
    """Serialize as ``key = value`` lines in a fixed key order."""
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in asdict(config).items())


_TUPLE_KEYS = ("encoder_channels", "kernel", "stride", "ctf_taps")
_INT_KEYS = ("rnn_layers", "rnn_hidden", "rnn_groups", "decoders", "input_bins")


def from_mapping(items) -> ModelConfig:
    """Build a config from string key/value pairs; unknown keys are a config error."""
    known = set(ModelConfig.__dataclass_fields__)
    kwargs = {}
    for key, raw in dict(items).items():
        key = key.strip()
        raw = str(raw).strip()
        if key not in known:
            raise ConfigError(f"unknown model config key {key!r}")
        try:
            if key in _TUPLE_KEYS:
                kwargs[key] = tuple(int(p) for p in raw.split(","))
            elif key in _INT_KEYS:
                kwargs[key] = None if (key == "rnn_hidden" and raw.lower() in ("auto", "none")) else int(raw)
            elif key == "feature_compression":
                kwargs[key] = float(raw)
            else:
                kwargs[key] = raw
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return ModelConfig(**kwargs)


def from_text(text: str) -> ModelConfig:
    items = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        items[key.strip()] = value.strip()
    return from_mapping(items)


NS = ModelConfig(encoder_channels=(32, 64, 64, 64), kernel=(2, 3), rnn_kind="GRU", rnn_groups=4, decoders=1)
SS = ModelConfig(encoder_channels=(32, 64, 128, 256), kernel=(2, 3), rnn_kind="LSTM", rnn_groups=16, decoders=2)
SS_SUB = replace(SS, decoders=1)
DR = ModelConfig(encoder_channels=(32, 64, 128, 256), kernel=(2, 3), rnn_kind="GRU", rnn_groups=16, decoders=1)
E2E = ModelConfig(
    encoder_channels=(32, 64, 128, 256), kernel=(3, 3), rnn_kind="LSTM", rnn_layers=3, rnn_groups=4, decoders=2
)

PRESETS = {"NS": NS, "SS": SS, "SS_SUB": SS_SUB, "DR": DR, "E2E": E2E}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name.upper()]
    except KeyError:
        raise ConfigError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None
