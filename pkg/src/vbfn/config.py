"""Run configuration: flat dotted-key text files with typed defaults.

The format is intentionally plain: one ``key = value`` per line, ``#``
comments, unknown keys rejected with a suggestion.  Missing keys take the
documented defaults (synthetic-graph profile).
"""

from __future__ import annotations

import difflib
from dataclasses import dataclass, field, fields

from .flow import Schedule
from .pipeline import PrecisionSettings
from .predictor import PredictorConfig
from .solver import SolverConfig


class ConfigError(ValueError):
    """Raised for unknown keys, bad types, or unreadable config files."""


@dataclass(frozen=True)
class TrainSettings:
    batch_size: int = 64
    steps: int = 2000
    lr: float = 1e-4
    weight_decay: float = 1e-12
    clip_norm: float = 10000.0
    log_every: int = 50
    checkpoint_every: int = 500
    loss_convention: str = "algorithmic"
    per_graph_t: bool = False


@dataclass(frozen=True)
class DecodeSettings:
    eps_prob: float = 1e-12


@dataclass
class RunConfig:
    seed: int = 0
    dataset: str = ""
    out_dir: str = "runs/out"
    mask_diag_edges: bool = True
    schedule: Schedule = field(default_factory=Schedule)
    precision: PrecisionSettings = field(default_factory=PrecisionSettings)
    solver: SolverConfig = field(default_factory=SolverConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    decode: DecodeSettings = field(default_factory=DecodeSettings)


_SECTIONS = {
    "schedule": (Schedule, {"T": "steps", "sigma1_node": "sigma1_node",
                            "sigma1_edge": "sigma1_edge", "t_min": "t_min"}),
    "precision": (PrecisionSettings, None),
    "solver": (SolverConfig, None),
    "predictor": (PredictorConfig, None),
    "train": (TrainSettings, None),
    "decode": (DecodeSettings, None),
}

_TOP_LEVEL = {"seed": int, "dataset": str, "out_dir": str,
              "mask_diag_edges": bool}


def _key_table():
    """Map dotted key -> (section, field name, type)."""
    table = {}
    for name, typ in _TOP_LEVEL.items():
        table[name] = (None, name, typ)
    for section, (cls, alias) in _SECTIONS.items():
        names = {f.name: f.type for f in fields(cls)}
        if alias:
            for pub, priv in alias.items():
                table[f"{section}.{pub}"] = (section, priv, names[priv])
        else:
            for fname in names:
                table[f"{section}.{fname}"] = (section, fname, names[fname])
    return table


KEY_TABLE = _key_table()

_PY_TYPES = {"int": int, "float": float, "str": str, "bool": bool,
             int: int, float: float, str: str, bool: bool}


def _coerce(key, text, typ):
    typ = _PY_TYPES.get(typ, str)
    text = text.strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if typ is int:
            as_float = float(text)
            if as_float != int(as_float):
                raise ValueError(text)
            return int(as_float)
        if typ is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"key {key!r} expects {typ.__name__}, got {text!r}")


def _reject_unknown(key):
    hint = difflib.get_close_matches(key, KEY_TABLE, n=1, cutoff=0.4)
    suggestion = f"; did you mean {hint[0]!r}?" if hint else ""
    raise ConfigError(
        f"unknown config key {key!r}{suggestion} "
        f"(valid keys: {', '.join(sorted(KEY_TABLE))})")


def parse_config(path=None, overrides=()):
    """Resolve a config file plus ``key=value`` overrides into a RunConfig."""
    values = {}
    if path:
        try:
            with open(path) as fh:
                lines = fh.readlines()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path!r}: {exc}")
        for lineno, line in enumerate(lines, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, text = (part.strip() for part in stripped.split("=", 1))
            if key not in KEY_TABLE:
                _reject_unknown(key)
            values[key] = text
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, text = (part.strip() for part in item.split("=", 1))
        if key not in KEY_TABLE:
            _reject_unknown(key)
        values[key] = text

    top = {}
    per_section = {name: {} for name in _SECTIONS}
    for key, text in values.items():
        section, fname, typ = KEY_TABLE[key]
        value = _coerce(key, text, typ)
        if section is None:
            top[fname] = value
        else:
            per_section[section][fname] = value
    try:
        cfg = RunConfig(
            **top,
            **{name: cls(**per_section[name])
               for name, (cls, _) in _SECTIONS.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc))
    return cfg


def serialize_config(cfg):
    """Render every key at its resolved value; parse(serialize(c)) == c."""
    lines = []
    for key in sorted(KEY_TABLE):
        section, fname, _ = KEY_TABLE[key]
        obj = cfg if section is None else getattr(cfg, section)
        value = getattr(obj, fname)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def config_dict(cfg):
    """Resolved config as a flat dict, for echoing into run outputs."""
    out = {}
    for key in sorted(KEY_TABLE):
        section, fname, _ = KEY_TABLE[key]
        obj = cfg if section is None else getattr(cfg, section)
        out[key] = getattr(obj, fname)
    return out
