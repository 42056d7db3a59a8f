"""Run configuration: flat key=value sections in plain text.

The format is deliberately dumb so diffs stay readable and parsing needs
nothing beyond the standard library::

    # comment
    [network]
    base_channels = 16

    [training]
    preset = drive

Unknown sections or keys are errors: a typo must never silently fall back
to a default. Every key has a documented default, and the resolved snapshot
written next to each training run is itself a valid input config that
reproduces the run.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .network import CarUnetConfig
from .training import TRAIN_PRESETS, TrainConfig


def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "yes", "1"):
        return True
    if s.lower() in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: '{s}'")


# section -> key -> (default, parser)
CONFIG_SCHEMA: dict[str, dict[str, tuple] ] = {
    "network": {
        "in_channels": (3, int),
        "base_channels": (16, int),
        "depth": (4, int),
        "dropblock_size": (7, int),
        "dropblock_rate": (0.15, float),
        "meca_placement": ("post_block", str),
        "seed": (1234, int),
        "dtype": ("float32", str),
    },
    "training": {
        "dataset": ("synthetic", str),
        "batch_size": (2, int),
        "epochs": (100, int),
        "learning_rate": (1e-3, float),
        "beta1": (0.9, float),
        "beta2": (0.999, float),
        "adam_epsilon": (1e-8, float),
        "seed": (1234, int),
        "validation_fraction": (0.10, float),
        "augment_factor": (4, int),
        "max_steps": (0, int),
    },
    "data": {
        "root": ("", str),
        "fold": (0, int),
        "synthetic_count": (4, int),
        "synthetic_size": (64, int),
        "synthetic_seed": (42, int),
    },
    "output": {
        "dir": ("runs/latest", str),
        "threshold": (0.5, float),
        "figures": (True, _parse_bool),
    },
}


@dataclass
class RunConfig:
    """Parsed union of network, training, data, and output settings."""

    values: dict[str, dict[str, object]] = field(default_factory=dict)

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls(values={sec: {k: v for k, (v, _) in keys.items()} for sec, keys in CONFIG_SCHEMA.items()})

    def get(self, section: str, key: str):
        return self.values[section][key]

    def set(self, section: str, key: str, raw: str) -> None:
        if section not in CONFIG_SCHEMA:
            raise ConfigError(f"unknown config section '[{section}]' (expected one of {sorted(CONFIG_SCHEMA)})")
        if key not in CONFIG_SCHEMA[section]:
            raise ConfigError(f"unknown key '{key}' in section '[{section}]' (expected one of {sorted(CONFIG_SCHEMA[section])})")
        parser = CONFIG_SCHEMA[section][key][1]
        try:
            self.values[section][key] = parser(raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {section}.{key}: {exc}") from exc

    def network_config(self) -> CarUnetConfig:
        net = self.values["network"]
        cfg = CarUnetConfig(
            in_channels=net["in_channels"],
            base_channels=net["base_channels"],
            depth=net["depth"],
            dropblock_size=net["dropblock_size"],
            dropblock_rate=net["dropblock_rate"],
            meca_placement=net["meca_placement"],
            seed=net["seed"],
            dtype=net["dtype"],
        )
        cfg.validate()
        return cfg

    def train_config(self) -> TrainConfig:
        tr = self.values["training"]
        cfg = TrainConfig(
            dataset_kind=tr["dataset"],
            batch_size=tr["batch_size"],
            epochs=tr["epochs"],
            learning_rate=tr["learning_rate"],
            beta1=tr["beta1"],
            beta2=tr["beta2"],
            adam_epsilon=tr["adam_epsilon"],
            seed=tr["seed"],
            validation_fraction=tr["validation_fraction"],
            augment_factor=tr["augment_factor"],
            max_steps=tr["max_steps"],
        )
        cfg.validate()
        return cfg

    def render(self) -> str:
        lines = ["# resolved configuration; feeding this file back reproduces the run"]
        for section in CONFIG_SCHEMA:
            lines.append(f"[{section}]")
            for key in CONFIG_SCHEMA[section]:
                lines.append(f"{key} = {self.values[section][key]}")
            lines.append("")
        return "\n".join(lines)


# Presets change network shape as well as the schedule: smoke is the tiny
# synthetic memorization run, the dataset presets carry the published recipe.
PRESET_OVERRIDES: dict[str, dict[str, dict[str, str]]] = {
    "drive": {"training": {"dataset": "drive"}},
    "chase": {"training": {"dataset": "chase"}},
    "stare": {"training": {"dataset": "stare"}},
    "smoke": {
        "network": {"base_channels": "8", "depth": "2", "dropblock_rate": "0.0"},
        "training": {"dataset": "synthetic"},
        "data": {"synthetic_count": "4", "synthetic_size": "64"},
    },
}


def apply_preset(config: RunConfig, name: str) -> None:
    if name not in TRAIN_PRESETS:
        raise ConfigError(f"unknown preset '{name}' (expected one of {sorted(TRAIN_PRESETS)})")
    preset = TRAIN_PRESETS[name]
    tr = config.values["training"]
    tr["dataset"] = preset.dataset_kind
    tr["batch_size"] = preset.batch_size
    tr["epochs"] = preset.epochs
    tr["learning_rate"] = preset.learning_rate
    tr["validation_fraction"] = preset.validation_fraction
    tr["augment_factor"] = preset.augment_factor
    tr["max_steps"] = preset.max_steps
    for section, kv in PRESET_OVERRIDES.get(name, {}).items():
        for key, raw in kv.items():
            config.set(section, key, raw)


def parse_config_text(text: str, into: RunConfig | None = None) -> RunConfig:
    config = into or RunConfig.defaults()
    section = None
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in CONFIG_SCHEMA:
                raise ConfigError(f"line {lineno}: unknown section '[{section}]'")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got '{raw_line.strip()}'")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        key, _, value = line.partition("=")
        config.set(section, key.strip(), value.strip())
    return config


def load_config_file(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text())


def apply_overrides(config: RunConfig, overrides: list[str]) -> None:
    """Apply --set section.key=value flags."""
    for item in overrides:
        head, sep, value = item.partition("=")
        if not sep or "." not in head:
            raise ConfigError(f"--set expects section.key=value, got '{item}'")
        section, _, key = head.partition(".")
        config.set(section.strip(), key.strip(), value.strip())
