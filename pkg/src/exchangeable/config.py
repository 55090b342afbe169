"""Run configuration: sectioned ``key = value`` files plus ``section.key=value`` overrides."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Sequence

from .encoder import ConfigurationError
from .envs import ENV_NAMES, ConvoyConfig, Env, ScavengerConfig, make_config
from .ppo import Policy, PPOHyperparams

ENCODER_TYPES = ("attention", "deepsets", "ordered")

_ENV_FIELDS = {f.name: f for f in fields(ScavengerConfig)} | {f.name: f for f in fields(ConvoyConfig)}
_SCAVENGER_KEYS = {f.name for f in fields(ScavengerConfig)} - {"include_poison"}
_CONVOY_KEYS = {f.name for f in fields(ConvoyConfig)}
_PPO_FIELDS = {f.name: f for f in fields(PPOHyperparams)}
_ENCODER_KEYS = {"type", "k", "hidden"}
_RUN_KEYS = {"seed", "out_dir", "workers", "checkpoint_every"}


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(s) for s in text.replace(" ", "").split(",") if s)


def _parse_path(text: str) -> tuple[tuple[float, float], ...]:
    pts = []
    for chunk in text.split(";"):
        x, y = chunk.split(",")
        pts.append((float(x), float(y)))
    return tuple(pts)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _converter(default: Any) -> Callable[[str], Any]:
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, tuple) and default and isinstance(default[0], tuple):
        return _parse_path
    if isinstance(default, tuple):
        return _parse_ints
    return str


@dataclass
class RunConfig:
    env_name: str = "scavenger1"
    env_overrides: dict[str, Any] = field(default_factory=dict)
    encoder_type: str = "attention"
    encoder_k: int = 64
    encoder_hidden: tuple[int, ...] = (64, 64)
    ppo: PPOHyperparams = field(default_factory=PPOHyperparams)
    seed: int = 0
    out_dir: str = "runs/default"
    workers: int = 1
    checkpoint_every: int = 50

    def env_config(self):
        return make_config(self.env_name, **self.env_overrides)

    def env_factory(self) -> Callable[[], Env]:
        cfg = self.env_config()
        return lambda: Env(cfg)

    def build_policy(self, seed: int | None = None) -> Policy:
        return Policy.for_env(
            Env(self.env_config()),
            self.encoder_type,
            self.encoder_k,
            self.encoder_hidden,
            self.ppo.trunk_hidden,
            self.ppo.init_log_std,
            seed=self.seed if seed is None else seed,
        )

    def validate(self) -> "RunConfig":
        if self.env_name not in ENV_NAMES:
            raise ConfigurationError(f"env.name: unknown environment {self.env_name!r}")
        allowed = _CONVOY_KEYS if self.env_name == "convoy" else _SCAVENGER_KEYS
        for key in self.env_overrides:
            if key not in allowed:
                raise ConfigurationError(f"env.{key}: not a setting of {self.env_name}")
        if self.encoder_type not in ENCODER_TYPES:
            raise ConfigurationError(f"encoder.type: unknown encoder {self.encoder_type!r}")
        if self.encoder_k < 1 or not self.encoder_hidden or min(self.encoder_hidden) < 1:
            raise ConfigurationError("encoder.k and encoder.hidden must be positive")
        if self.workers < 1:
            raise ConfigurationError(f"run.workers must be >= 1, got {self.workers}")
        if self.checkpoint_every < 1:
            raise ConfigurationError(f"run.checkpoint_every must be >= 1, got {self.checkpoint_every}")
        try:
            self.ppo.validate()
            self.env_config()
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from exc
        return self

    def to_text(self) -> str:
        lines = ["[env]", f"name = {self.env_name}"]
        for k, v in self.env_overrides.items():
            lines.append(f"{k} = {_format(v)}")
        lines += [
            "",
            "[encoder]",
            f"type = {self.encoder_type}",
            f"k = {self.encoder_k}",
            f"hidden = {_format(self.encoder_hidden)}",
            "",
            "[ppo]",
        ]
        for f in fields(PPOHyperparams):
            lines.append(f"{f.name} = {_format(getattr(self.ppo, f.name))}")
        lines += [
            "",
            "[run]",
            f"seed = {self.seed}",
            f"out_dir = {self.out_dir}",
            f"workers = {self.workers}",
            f"checkpoint_every = {self.checkpoint_every}",
            "",
        ]
        return "\n".join(lines)


def _format(v: Any) -> str:
    if isinstance(v, tuple) and v and isinstance(v[0], tuple):
        return ";".join(f"{x!r},{y!r}" for x, y in v)
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _apply(cfg: RunConfig, section: str, key: str, raw: str) -> None:
    where = f"{section}.{key}"
    try:
        if section == "env":
            if key == "name":
                cfg.env_name = raw.strip()
            elif key in _ENV_FIELDS:
                cfg.env_overrides[key] = _converter(_ENV_FIELDS[key].default)(raw)
            else:
                raise ConfigurationError(f"unknown key {where}")
        elif section == "encoder":
            if key == "type":
                cfg.encoder_type = raw.strip()
            elif key == "k":
                cfg.encoder_k = int(raw)
            elif key == "hidden":
                cfg.encoder_hidden = _parse_ints(raw)
            else:
                raise ConfigurationError(f"unknown key {where}")
        elif section == "ppo":
            if key not in _PPO_FIELDS:
                raise ConfigurationError(f"unknown key {where}")
            default = getattr(PPOHyperparams(), key)
            setattr(cfg.ppo, key, _converter(default)(raw))
        elif section == "run":
            if key not in _RUN_KEYS:
                raise ConfigurationError(f"unknown key {where}")
            setattr(cfg, key, raw.strip() if key == "out_dir" else int(raw))
        else:
            raise ConfigurationError(f"unknown section [{section}] (key {where})")
    except ConfigurationError:
        raise
    except ValueError as exc:
        raise ConfigurationError(f"{where}: {exc}") from exc


def parse_override(text: str) -> tuple[str, str, str]:
    lhs, sep, rhs = text.partition("=")
    section, dot, key = lhs.strip().partition(".")
    if not sep or not dot or not key:
        raise ConfigurationError(f"override must look like section.key=value, got {text!r}")
    return section, key, rhs.strip()


def load_config(path: str | Path | None = None, overrides: Sequence[str] = ()) -> RunConfig:
    """Read ``path`` (if given), apply ``section.key=value`` overrides, validate."""
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
        parser.optionxform = str  # keep key case so typos are reported verbatim
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        for section in parser.sections():
            for key, raw in parser.items(section):
                _apply(cfg, section, key, raw)
    for text in overrides:
        _apply(cfg, *parse_override(text))
    return cfg.validate()
