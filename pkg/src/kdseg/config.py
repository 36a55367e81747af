"""Config file handling: flat INI with [network], [training], [loss], and
[data] sections, resolved with precedence

    defaults < config file < command-line overrides < KDSEG_SEED.

A run's frozen snapshot (written before any work) is itself a valid config
file, so any run is reproducible from its snapshot alone given the data.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, ContractError, KDSegError
from .losses import LossWeights
from .network import NetworkConfig
from .training import TrainConfig

SEED_ENV_VAR = "KDSEG_SEED"


@dataclass
class DataConfig:
    """Pipeline geometry plus the dataset location."""

    root: str = ""
    crop_size: int = 128
    subsample_factor: int = 2

    def __post_init__(self) -> None:
        if self.crop_size < 1:
            raise ConfigError(f"crop_size must be >= 1, got {self.crop_size}")
        if self.subsample_factor < 1:
            raise ConfigError(
                f"subsample_factor must be >= 1, got {self.subsample_factor}"
            )


@dataclass
class ResolvedConfig:
    """Fully-resolved settings; network.in_channels stays 1 until a command
    binds the config to a dataset."""

    train: TrainConfig
    network: NetworkConfig
    data: DataConfig
    text: str = ""


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


# (section, key) -> value parser. These key names are the config contract.
_KEY_PARSERS = {
    ("network", "depth"): int,
    ("network", "base_filters"): int,
    ("network", "skip_connections"): int,
    ("network", "negative_slope"): float,
    ("training", "lr"): float,
    ("training", "epochs"): int,
    ("training", "plateau_patience"): int,
    ("training", "plateau_factor"): float,
    ("training", "batch_size"): int,
    ("training", "seed"): int,
    ("training", "student_modality"): str,
    ("loss", "lambda"): float,
    ("loss", "temperature"): float,
    ("loss", "alpha"): float,
    ("loss", "enable_kd"): _parse_bool,
    ("loss", "enable_kl"): _parse_bool,
    ("data", "root"): str,
    ("data", "crop_size"): int,
    ("data", "subsample_factor"): int,
}

_SECTION_OF = {}
for (_sec, _key) in _KEY_PARSERS:
    _SECTION_OF.setdefault(_key, _sec)


def _defaults() -> dict:
    return {
        ("network", "depth"): 4,
        ("network", "base_filters"): 16,
        ("network", "negative_slope"): 0.01,
        ("training", "lr"): 1e-4,
        ("training", "epochs"): 500,
        ("training", "plateau_patience"): 50,
        ("training", "plateau_factor"): 0.2,
        ("training", "batch_size"): 2,
        ("training", "seed"): 0,
        ("training", "student_modality"): "T1ce",
        ("loss", "lambda"): 0.75,
        ("loss", "temperature"): 5.0,
        ("loss", "alpha"): 10.0,
        ("loss", "enable_kd"): True,
        ("loss", "enable_kl"): True,
        ("data", "root"): "",
        ("data", "crop_size"): 128,
        ("data", "subsample_factor"): 2,
    }


def _set(values: dict, section: str, key: str, raw: str) -> None:
    parser = _KEY_PARSERS.get((section, key))
    if parser is None:
        raise ConfigError(f"unknown config key '{section}.{key}'")
    try:
        values[(section, key)] = parser(raw) if isinstance(raw, str) else raw
    except ValueError as exc:
        raise ConfigError(f"invalid value for '{section}.{key}': {exc}")


def parse_overrides(overrides) -> list[tuple[str, str, str]]:
    """Parse key=value strings; keys may be bare or section.key qualified."""
    out = []
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(
                f"override '{item}' is not of the form key=value"
            )
        key, raw = item.split("=", 1)
        key = key.strip()
        if "." in key:
            section, key = key.split(".", 1)
        else:
            section = _SECTION_OF.get(key)
            if section is None:
                raise ConfigError(f"unknown config key '{key}'")
        out.append((section, key, raw.strip()))
    return out


def resolve_config(
    config_path=None, overrides=None, env=None
) -> ResolvedConfig:
    """Merge defaults, an optional config file, overrides, and the seed
    environment variable into validated config objects."""
    env = os.environ if env is None else env
    values = _defaults()

    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        try:
            parser.read_string(path.read_text())
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}")
        for section in parser.sections():
            if section not in ("network", "training", "loss", "data"):
                raise ConfigError(f"unknown config section '[{section}]'")
            for key, raw in parser.items(section):
                _set(values, section, key, raw)

    explicit_skip = ("network", "skip_connections") in values
    for section, key, raw in parse_overrides(overrides):
        _set(values, section, key, raw)
        if (section, key) == ("network", "skip_connections"):
            explicit_skip = True

    if SEED_ENV_VAR in env:
        raw = env[SEED_ENV_VAR]
        try:
            values[("training", "seed")] = int(raw)
        except ValueError:
            raise ConfigError(
                f"{SEED_ENV_VAR} must be an integer, got {raw!r}"
            )

    # Skip connections default to "all levels" and must track the depth.
    if not explicit_skip:
        values[("network", "skip_connections")] = values[("network", "depth")]

    try:
        weights = LossWeights(
            lam=values[("loss", "lambda")],
            temperature=values[("loss", "temperature")],
            alpha=values[("loss", "alpha")],
            enable_kd=values[("loss", "enable_kd")],
            enable_kl=values[("loss", "enable_kl")],
        )
        train = TrainConfig(
            epochs=values[("training", "epochs")],
            lr=values[("training", "lr")],
            plateau_factor=values[("training", "plateau_factor")],
            plateau_patience=values[("training", "plateau_patience")],
            batch_size=values[("training", "batch_size")],
            weights=weights,
            seed=values[("training", "seed")],
            student_modality=values[("training", "student_modality")],
        )
        network = NetworkConfig(
            in_channels=1,
            depth=values[("network", "depth")],
            base_filters=values[("network", "base_filters")],
            skip_connections=values[("network", "skip_connections")],
            negative_slope=values[("network", "negative_slope")],
        )
        data = DataConfig(
            root=values[("data", "root")],
            crop_size=values[("data", "crop_size")],
            subsample_factor=values[("data", "subsample_factor")],
        )
    except (ContractError, ConfigError) as exc:
        raise ConfigError(str(exc))

    resolved = ResolvedConfig(train=train, network=network, data=data)
    resolved.text = render_config(train, network, data)
    return resolved


def render_config(train: TrainConfig, network: NetworkConfig, data) -> str:
    """Serialize resolved settings back to the INI format."""
    if hasattr(data, "crop_size") and not isinstance(data, DataConfig):
        # A dataset object: recover its pipeline geometry.
        crop = data.crop_size[0] if isinstance(data.crop_size, tuple) else data.crop_size
        data = DataConfig(
            root=str(getattr(data, "root", "")),
            crop_size=crop,
            subsample_factor=data.subsample_factor,
        )
    w = train.weights
    lines = [
        "[network]",
        f"depth = {network.depth}",
        f"base_filters = {network.base_filters}",
        f"skip_connections = {network.skip_connections}",
        f"negative_slope = {network.negative_slope:g}",
        "",
        "[training]",
        f"lr = {train.lr:g}",
        f"epochs = {train.epochs}",
        f"plateau_patience = {train.plateau_patience}",
        f"plateau_factor = {train.plateau_factor:g}",
        f"batch_size = {train.batch_size}",
        f"seed = {train.seed}",
        f"student_modality = {train.student_modality}",
        "",
        "[loss]",
        f"lambda = {w.lam:g}",
        f"temperature = {w.temperature:g}",
        f"alpha = {w.alpha:g}",
        f"enable_kd = {str(w.enable_kd).lower()}",
        f"enable_kl = {str(w.enable_kl).lower()}",
        "",
        "[data]",
        f"root = {data.root}",
        f"crop_size = {data.crop_size}",
        f"subsample_factor = {data.subsample_factor}",
    ]
    return "\n".join(lines) + "\n"
