"""Run configuration: INI sections ``[run]``, ``[scenario]``, ``[training]``,
``[encoder]`` with flat keys (nested IDM parameters as ``idm.<name>``).

Every key has a default, so an empty file is a valid config. The resolved
snapshot written next to each run lists every key explicitly.
"""
from __future__ import annotations

import configparser
import dataclasses
import enum
from dataclasses import dataclass, field
from pathlib import Path

from .encoder import EncoderConfig
from .sim import IdmParams, ScenarioConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    output_dir: str = "runs/default"
    run_label: str = "default"
    seed: int = 0
    record_wall_time: bool = False
    explicit: set = field(default_factory=set, repr=False, compare=False)

    def validate(self) -> None:
        try:
            self.scenario.validate()
            self.training.validate()
            self.encoder.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.encoder.slots < self.scenario.total_vehicles:
            raise ConfigError(f"encoder.slots ({self.encoder.slots}) must be >= scenario vehicle count "
                              f"({self.scenario.total_vehicles})")


_RUN_KEYS = ("output_dir", "run_label", "seed", "record_wall_time")


def _coerce(raw: str, like, key: str):
    try:
        if isinstance(like, bool):
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, enum.Enum):
            return type(like)(raw.strip().lower())
        if isinstance(like, int):
            value = float(raw)
            if value != int(value):
                raise ValueError(raw)
            return int(value)
        if isinstance(like, float):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot interpret {raw!r} as {type(like).__name__}") from None


def _format(value) -> str:
    if isinstance(value, enum.Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _flat_fields(obj, prefix: str = "") -> dict[str, object]:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            out.update(_flat_fields(value, f"{prefix}{f.name}."))
        else:
            out[prefix + f.name] = value
    return out


def _set_path(obj, dotted: str, raw: str, section: str) -> None:
    head, _, rest = dotted.partition(".")
    names = {f.name for f in dataclasses.fields(obj)}
    if head not in names:
        raise ConfigError(f"{section}.{dotted}: unknown key")
    current = getattr(obj, head)
    if rest:
        if not dataclasses.is_dataclass(current):
            raise ConfigError(f"{section}.{dotted}: unknown key")
        _set_path(current, rest, raw, section)
    else:
        if dataclasses.is_dataclass(current):
            raise ConfigError(f"{section}.{dotted}: is a group, set its members instead")
        setattr(obj, head, _coerce(raw, current, f"{section}.{dotted}"))


def apply_setting(cfg: RunConfig, dotted_key: str, raw: str) -> None:
    section, _, key = dotted_key.strip().partition(".")
    if not key:
        raise ConfigError(f"{dotted_key}: expected <section>.<key>")
    if section == "run":
        if key not in _RUN_KEYS:
            raise ConfigError(f"run.{key}: unknown key")
        setattr(cfg, key, _coerce(raw, getattr(cfg, key), dotted_key))
    elif section in ("scenario", "training", "encoder"):
        _set_path(getattr(cfg, section), key, raw, section)
    else:
        raise ConfigError(f"{dotted_key}: unknown section {section!r}")
    cfg.explicit.add(f"{section}.{key}")


def load_config(path=None, overrides: list[str] = ()) -> RunConfig:
    """Read an INI file (optional) and apply ``section.key=value`` overrides.

    Encoder keys left unset are derived from the scenario.
    """
    cfg = RunConfig()
    settings: list[tuple[str, str]] = []
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for section in parser.sections():
            for key, value in parser.items(section):
                settings.append((f"{section}.{key}", value))
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set {item!r}: expected <section>.<key>=<value>")
        settings.append((key.strip(), value))
    # scenario first so derived encoder defaults see the final scenario
    for key, value in sorted(settings, key=lambda kv: not kv[0].startswith("scenario.")):
        if not key.startswith("encoder."):
            apply_setting(cfg, key, value)
    derived = EncoderConfig.from_scenario(cfg.scenario)
    cfg.encoder = derived
    for key, value in settings:
        if key.startswith("encoder."):
            apply_setting(cfg, key, value)
    cfg.validate()
    return cfg


def dump_config(cfg: RunConfig, path) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser["run"] = {key: _format(getattr(cfg, key)) for key in _RUN_KEYS}
    for section in ("scenario", "training", "encoder"):
        parser[section] = {k: _format(v) for k, v in _flat_fields(getattr(cfg, section)).items()}
    with open(path, "w") as fh:
        parser.write(fh)


def reduced_scale_config() -> RunConfig:
    """The desk-scale scenario used by the acceptance suite: 300 m highway,
    8 HVs and 8 AVs, ramps at the same relative positions, 40 episodes with
    a 2000-step random phase."""
    scenario = ScenarioConfig(highway_length=300.0, x_ramp1=120.0, x_ramp2=240.0,
                              n_hvs=8, n_avs=8, n_ramp1=4, n_ramp2=4, idm=IdmParams())
    training = TrainConfig(episodes=40, random_phase_steps=2000)
    cfg = RunConfig(scenario=scenario, training=training, encoder=EncoderConfig.from_scenario(scenario))
    cfg.validate()
    return cfg
