"""Run configuration: a TOML file with [model], [train], [attack], [data] and
[output] sections, plus ``--section.key value`` overrides from the command line.

Unknown sections and keys are errors.  ``lambda`` is accepted as an alias of
``lam`` because ``lambda`` cannot be a Python field name.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .attacks import AttackSpec
from .models import ModelSpec
from .training import TrainConfig

ALIASES = {"lambda": "lam"}
# fields that default to None but take integers
OPTIONAL_INT = {"xi_samples": int}
# string-valued fields whose values are matched case-insensitively
LOWERCASE = {"method", "family", "arch", "loss", "target", "inner_loss", "outer_loss",
             "schedule", "dataset"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    dataset: str = "mnist"
    path: str = ""
    train_subset: int = 0  # 0 keeps everything
    test_subset: int = 0

    def __post_init__(self):
        if self.dataset not in ("mnist", "cifar10"):
            raise ValueError(f"unknown dataset {self.dataset!r}; expected 'mnist' or 'cifar10'")
        if self.train_subset < 0 or self.test_subset < 0:
            raise ValueError("subset sizes must be >= 0")


@dataclass(frozen=True)
class OutputConfig:
    directory: str = "runs"
    seed: int = 0


# Attack defaults for the [attack] section differ from AttackSpec only in being
# an explicit PGD-20 evaluation attack.
ATTACK_DEFAULTS = {"family": "pgd", "steps": 20}


@dataclass(frozen=True)
class RunConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackSpec = field(default_factory=lambda: AttackSpec(**ATTACK_DEFAULTS))
    data: DataConfig = field(default_factory=DataConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def digest(self, sections=None, extra=None) -> str:
        """Stable 12-hex-digit hash of the chosen sections (all but the output
        directory by default) and any extra JSON-able payload."""
        d = self.to_dict()
        d["output"].pop("directory")
        if sections is not None:
            d = {k: d[k] for k in sections}
        if extra is not None:
            d["extra"] = extra
        text = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def train_digest(self) -> str:
        """Digest of everything that determines a trained checkpoint."""
        return self.digest(("model", "train", "data", "output"))

    def with_(self, section, **kw) -> "RunConfig":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section),
                                                                        **kw)})


SECTIONS = {"model": ModelSpec, "train": TrainConfig, "attack": AttackSpec,
            "data": DataConfig, "output": OutputConfig}


def _field_types(cls):
    """field -> expected python type, read off the defaults (None means float)."""
    default = cls(**ATTACK_DEFAULTS) if cls is AttackSpec else cls()
    out = {}
    for f in dataclasses.fields(cls):
        value = getattr(default, f.name)
        out[f.name] = OPTIONAL_INT.get(f.name, float) if value is None else type(value)
    return out


def _coerce(section, key, value, kind):
    where = f"[{section}] {key}"
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if kind is int:
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if kind is float:
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if kind is tuple:
        if not isinstance(value, (list, tuple)) or not all(
                isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{where}: expected a list of integers, got {value!r}")
        return tuple(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value.lower() if key in LOWERCASE else value
    raise ConfigError(f"{where}: unsupported type {kind}")


def _section(name, values: dict):
    cls = SECTIONS[name]
    types = _field_types(cls)
    kwargs = dict(ATTACK_DEFAULTS) if cls is AttackSpec else {}
    for raw_key, value in values.items():
        key = ALIASES.get(raw_key, raw_key)
        if key not in types:
            valid = ", ".join(sorted(set(types) | {a for a, t in ALIASES.items() if t in types}))
            raise ConfigError(f"unknown key {raw_key!r} in [{name}]; valid keys: {valid}")
        kwargs[key] = _coerce(name, raw_key, value, types[key])
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def parse_value(text: str):
    """Command-line value: a TOML literal when it parses as one, else a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def parse_overrides(tokens) -> dict:
    """``--train.lambda 0.3`` / ``--train.lambda=0.3`` pairs -> {section: {key: value}}."""
    out: dict = {}
    tokens = list(tokens)
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(f"unrecognized argument {tok!r}; overrides look like --section.key value")
        name, eq, value = tok[2:].partition("=")
        if not eq:
            if i + 1 >= len(tokens):
                raise ConfigError(f"override {tok} needs a value")
            value = tokens[i + 1]
            i += 1
        section, _, key = name.partition(".")
        out.setdefault(section, {})[key] = parse_value(value)
        i += 1
    return out


def load_config(path=None, overrides=None) -> RunConfig:
    """Resolve file values, then overrides, on top of the defaults."""
    raw: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        try:
            raw = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    merged = {name: dict(raw.get(name, {})) for name in SECTIONS}
    for name in raw:
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]; valid sections: {', '.join(SECTIONS)}")
        if not isinstance(raw[name], dict):
            raise ConfigError(f"[{name}] must be a table")
    for name, values in (overrides or {}).items():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section {name!r} in override; valid: {', '.join(SECTIONS)}")
        # an alias and its target must not both survive the merge
        for key in values:
            canonical = ALIASES.get(key, key)
            for other in list(merged[name]):
                if ALIASES.get(other, other) == canonical:
                    del merged[name][other]
        merged[name].update(values)
    if merged["data"].get("dataset", "mnist") == "cifar10":
        merged["model"].setdefault("input_shape", [3, 32, 32])
    # the [output] seed drives everything unless [train] names its own
    if "seed" not in merged["train"]:
        merged["train"]["seed"] = merged["output"].get("seed", OutputConfig.seed)
    return RunConfig(**{name: _section(name, merged[name]) for name in SECTIONS})


def describe_defaults() -> str:
    """Every section with its default values as loadable TOML; unset keys are
    commented out."""
    lines = []
    d = RunConfig().to_dict()
    for name, values in d.items():
        lines.append(f"[{name}]")
        for key, value in values.items():
            shown = "lambda" if key == "lam" else key
            if value is None:
                lines.append(f"# {shown} = (unset)")
            else:
                lines.append(f"{shown} = {json.dumps(value)}")
        lines.append("")
    return "\n".join(lines)
