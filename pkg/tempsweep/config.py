"""
Run configuration: dataclass defaults < TOML config file < command-line flags.

Top-level keys in the file (and plain `--field` flags) set that field in every
section that has it, except `lm` which only reads its own table. Tables
`[model]`, `[train]`, `[lm]`, `[adv]`, `[decode]`, `[sweep]`, `[experiment]`,
`[run]` (and `--set section.field=value`) target one section.
"""
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import MISSING, dataclass, fields, replace
from pathlib import Path

from tempsweep.base.decoder import DecoderConfig
from tempsweep.base.exceptions import ConfigError
from tempsweep.metrics import DEFAULT_LM_CONFIG
from tempsweep.model import ModelDims
from tempsweep.sweep import ExperimentConfig, SweepSpec
from tempsweep.training import AdvConfig, TrainConfig


@dataclass(frozen=True)
class ModelShape:
    embed_dim: int = 32
    hidden_dim: int = 32
    num_layers: int = 1

    def dims(self, vocab_size):
        return ModelDims(vocab_size, self.embed_dim, self.hidden_dim, self.num_layers)


@dataclass(frozen=True)
class RunOptions:
    record_timing: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")


SECTIONS = {
    "model": ModelShape,
    "train": TrainConfig,
    "lm": TrainConfig,
    "adv": AdvConfig,
    "decode": DecoderConfig,
    "sweep": SweepSpec,
    "experiment": ExperimentConfig,
    "run": RunOptions,
}
OWN_TABLE_ONLY = ("lm",)
BASE_VALUES = {"lm": DEFAULT_LM_CONFIG}
NOT_CONFIGURABLE = ("discriminator",)


def section_fields(section):
    return [f for f in fields(SECTIONS[section]) if f.init and f.name not in NOT_CONFIGURABLE]


def all_field_names():
    names = {}
    for section in SECTIONS:
        for f in section_fields(section):
            names.setdefault(f.name, f)
    return names


def _element_type(f):
    default = f.default if f.default is not MISSING else ()
    return type(default[0]) if default else float


def parse_text(f, text):
    """
    Parses a command-line string for dataclass field `f`

    >>> parse_text(fields(SweepSpec)[3], '200')
    200
    """
    if f.type is bool:
        lowered = text.strip().lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{f.name} expects true or false, got {text!r}")
    try:
        if f.type is tuple:
            element = _element_type(f)
            return tuple(element(item) for item in text.split(",") if item.strip())
        if f.type in (int, float, str):
            return f.type(text)
    except ValueError as exc:
        raise ConfigError(f"{f.name}: can not parse {text!r}") from exc
    return text


def coerce(f, value):
    """Checks a TOML value against field `f`, widening ints to floats and lists to tuples"""
    if f.type is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{f.name} expects a boolean")
        return value
    if f.type is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if f.type is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if f.type is str and isinstance(value, str):
        return value
    if f.type is tuple and isinstance(value, (list, tuple)):
        element = _element_type(f)
        return tuple(element(item) for item in value)
    raise ConfigError(f"{f.name}: unexpected value {value!r}")


class Settings:
    """Collected overrides per section; `build` makes the typed config"""

    def __init__(self):
        self.values = {section: {} for section in SECTIONS}

    def _field(self, section, key):
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for f in section_fields(section):
            if f.name == key:
                return f
        raise ConfigError(f"unknown key {key!r} in section [{section}]")

    def set(self, section, key, value, from_text=False):
        f = self._field(section, key)
        self.values[section][key] = parse_text(f, value) if from_text else coerce(f, value)

    def set_flat(self, key, value, from_text=False):
        owners = [
            section
            for section in SECTIONS
            if section not in OWN_TABLE_ONLY and key in {f.name for f in section_fields(section)}
        ]
        if not owners:
            raise ConfigError(f"unknown config key {key!r}")
        for section in owners:
            self.set(section, key, value, from_text)

    def update_from_mapping(self, data):
        for key, value in data.items():
            if isinstance(value, dict):
                for inner_key, inner_value in value.items():
                    self.set(key, inner_key, inner_value)
        for key, value in data.items():
            if not isinstance(value, dict):
                self.set_flat(key, value)

    def build(self, section, **extra):
        values = {**self.values[section], **extra}
        try:
            if section in BASE_VALUES:
                return replace(BASE_VALUES[section], **values)
            return SECTIONS[section](**values)
        except TypeError as exc:
            raise ConfigError(f"[{section}]: {exc}") from exc


def read_config_file(path):
    try:
        with Path(path).open("rb") as f:
            return tomllib.load(f)
    except OSError as exc:
        raise ConfigError(f"can not read config file {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from exc


def load_settings(path=None, flat=None, assignments=()):
    """
    `flat` maps field name -> text from `--field` flags, `assignments` holds
    `section.field=value` strings; both override the file.
    """
    settings = Settings()
    if path:
        data = read_config_file(path)
        # flat file keys first so tables win over them
        settings.update_from_mapping({k: v for k, v in data.items() if not isinstance(v, dict)})
        settings.update_from_mapping({k: v for k, v in data.items() if isinstance(v, dict)})
    for key, text in (flat or {}).items():
        settings.set_flat(key, text, from_text=True)
    for assignment in assignments:
        target, sep, text = assignment.partition("=")
        section, dot, key = target.partition(".")
        if not sep or not dot:
            raise ConfigError(f"expected section.field=value, got {assignment!r}")
        settings.set(section.strip(), key.strip(), text, from_text=True)
    return settings
