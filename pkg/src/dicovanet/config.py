"""Training configuration and its INI file form.

Precedence when resolving a run: command-line flags, then the config
file, then the defaults below.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from importlib import resources

from .data import AugmentConfig
from .dsp import DspConfig
from .errors import ConfigError
from .loss import FocalParams
from .nn.network import NetworkSpec

LOSS_NAMES = ("cross_entropy", "focal")
ENSEMBLE_SEEDS = (1001, 500, 1500, 2000)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 0.0002
    loss: str = "focal"
    focal: FocalParams = field(default_factory=FocalParams)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    dsp: DspConfig = field(default_factory=DspConfig)
    network: NetworkSpec = field(default_factory=NetworkSpec)
    master_seed: int = 1001
    freeze_prefixes: tuple = ()
    init_checkpoint: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "freeze_prefixes", tuple(self.freeze_prefixes))
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch normalization)")
        if self.lr < 0:
            raise ConfigError("learning rate must be >= 0")
        if self.loss not in LOSS_NAMES:
            raise ConfigError(f"loss must be one of {LOSS_NAMES}, got {self.loss!r}")
        if self.master_seed < 0:
            raise ConfigError("seed must be unsigned")

    def with_(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        d = asdict(self)
        d["network"] = self.network.to_dict()
        d["freeze_prefixes"] = list(self.freeze_prefixes)
        return d

    def digest(self):
        """Content hash of everything that influences a run."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _csv(value):
    return tuple(v.strip() for v in value.split(",") if v.strip())


# section, key, (TrainConfig path), parser
_FIELDS = [
    ("train", "epochs", ("epochs",), int),
    ("train", "batch_size", ("batch_size",), int),
    ("train", "learning_rate", ("lr",), float),
    ("train", "loss", ("loss",), str),
    ("train", "seed", ("master_seed",), int),
    ("train", "freeze", ("freeze_prefixes",), _csv),
    ("train", "init", ("init_checkpoint",), lambda v: v or None),
    ("focal", "alpha", ("focal", "alpha"), float),
    ("focal", "gamma", ("focal", "gamma"), float),
    ("augment", "method", ("augment", "method"), str),
    ("augment", "replication_factor", ("augment", "replication_factor"), int),
    ("augment", "sigma", ("augment", "noise_sigma"), float),
    ("augment", "seed", ("augment", "seed"), int),
    ("dsp", "sample_rate_hz", ("dsp", "sample_rate_hz"), int),
    ("dsp", "clip_seconds", ("dsp", "clip_seconds"), float),
    ("dsp", "fft_window", ("dsp", "fft_window"), int),
    ("dsp", "frame_shift", ("dsp", "frame_shift"), int),
    ("dsp", "n_mels", ("dsp", "n_mels"), int),
    ("dsp", "fmin_hz", ("dsp", "fmin_hz"), float),
    ("dsp", "fmax_hz", ("dsp", "fmax_hz"), float),
    ("dsp", "log_floor_db", ("dsp", "log_floor_db"), float),
    ("network", "stem_channels", ("network", "stem_channels"), int),
    ("network", "stage_channels", ("network", "stage_channels"), lambda v: tuple(int(c) for c in _csv(v))),
    ("network", "blocks_per_stage", ("network", "blocks_per_stage"), int),
]


def apply_overrides(cfg: TrainConfig, overrides: dict) -> TrainConfig:
    """Apply ``{"section.key": value}`` overrides (already typed)."""
    top, nested = {}, {}
    known = {f"{s}.{k}": path for s, k, path, _ in _FIELDS}
    for dotted, value in overrides.items():
        if dotted not in known:
            raise ConfigError(f"unknown configuration key {dotted!r}")
        path = known[dotted]
        if len(path) == 1:
            top[path[0]] = value
        else:
            nested.setdefault(path[0], {})[path[1]] = value
    try:
        for section, changes in nested.items():
            sub = getattr(cfg, section)
            if section == "dsp" and "sample_rate_hz" in changes and "fmax_hz" not in changes:
                # keep the default "up to Nyquist" band when only the rate changes
                if sub.fmax_hz == sub.sample_rate_hz / 2:
                    changes["fmax_hz"] = changes["sample_rate_hz"] / 2
            top[section] = replace(sub, **changes)
        return replace(cfg, **top)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"bad config file: {exc}") from exc
    table = {(s, k): conv for s, k, _, conv in _FIELDS}
    overrides = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            if (section, key) not in table:
                raise ConfigError(f"unknown configuration key {section}.{key}")
            try:
                overrides[f"{section}.{key}"] = table[(section, key)](raw.strip())
            except ValueError as exc:
                raise ConfigError(f"{section}.{key}: {exc}") from exc
    return apply_overrides(base or TrainConfig(), overrides)


def default_config_text() -> str:
    return resources.files("dicovanet").joinpath("default.ini").read_text(encoding="utf-8")


def load_config(path=None) -> TrainConfig:
    cfg = parse_config_text(default_config_text())
    if path is not None:
        try:
            text = open(path, encoding="utf-8").read()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        cfg = parse_config_text(text, cfg)
    return cfg


def config_to_text(cfg: TrainConfig) -> str:
    """Render a config in the INI form accepted by parse_config_text."""
    lines = []
    current = None
    for section, key, path, _ in _FIELDS:
        if section != current:
            if current is not None:
                lines.append("")
            lines.append(f"[{section}]")
            current = section
        value = cfg
        for attr in path:
            value = getattr(value, attr)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif value is None:
            value = ""
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
