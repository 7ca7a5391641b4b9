"""Run configuration: flat key = value text with section prefixes.

A config file looks like

    mode = vfl
    data.path = ./cohort
    grid.intervals = 30
    privacy.enabled = true
    privacy.epsilon = 1.0

Flags override file values; every paper-silent default is materialized
into the manifest so a run is reproducible from the manifest alone.  The
config digest (sha-256 over the canonical key=value lines, path-like keys
excluded) is recorded in the manifest and echoed in the protocol's
control frames.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field, fields

__all__ = ["ConfigError", "RunConfig", "load_config", "config_digest",
           "write_manifest", "read_manifest"]


class ConfigError(ValueError):
    """Invalid or conflicting configuration; names the offending key."""


# keys that must not influence the digest (machine-local paths)
_PATH_KEYS = {"data.path", "output"}

_CENTRALIZED_LR = 0.005
_VFL_LR = 0.001


@dataclass
class RunConfig:
    mode: str = "centralized"            # "centralized" | "vfl"
    data_path: str = ""
    modalities: tuple[str, ...] = ()     # empty = every modality on disk
    top_variance: int = 0
    intervals: int = 30
    epochs: int = 15
    batch_size: int = 32
    learning_rate: float | None = None   # None = mode-dependent default
    weight_decay: float = 0.01
    bayesian: bool = True
    patience: int = 10
    privacy_enabled: bool = False
    epsilon: float | None = None
    delta: float = 1e-5
    clip_bound: float = 1.0
    c2: float = 1.0
    seed: int = 2024
    transport: str = "inproc"            # "inproc" | "tcp"
    tcp_host: str = "127.0.0.1"
    tcp_port: int = 7000
    spawn_clients: bool = True
    output: str = "./run"
    embed_dim: int = 512
    cat_embed_dim: int = 32
    head_hidden_layers: int = 4
    head_hidden_width: int = 0
    dropout: float = 0.5
    eval_draws: int = 0                  # 0 = deterministic mean-mode pass

    def resolved_learning_rate(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return _VFL_LR if self.mode == "vfl" else _CENTRALIZED_LR

    def validate(self) -> None:
        if self.mode not in ("centralized", "vfl"):
            raise ConfigError(f"mode: unknown value {self.mode!r}")
        if self.transport not in ("inproc", "tcp"):
            raise ConfigError(f"transport: unknown value {self.transport!r}")
        if self.epsilon is not None and not self.privacy_enabled:
            raise ConfigError("privacy.epsilon: set without privacy.enabled")
        if self.privacy_enabled and self.epsilon is None:
            raise ConfigError("privacy.epsilon: required when privacy.enabled")
        if self.privacy_enabled and self.epsilon is not None and self.epsilon <= 0:
            raise ConfigError("privacy.epsilon: must be positive")
        if self.intervals < 1:
            raise ConfigError("grid.intervals: must be >= 1")
        if self.epochs < 1:
            raise ConfigError("train.epochs: must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size: must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("model.dropout: must lie in [0, 1)")

    # -- flat key mapping ---------------------------------------------------
    def to_items(self) -> list[tuple[str, str]]:
        def fmt(v):
            if isinstance(v, bool):
                return "true" if v else "false"
            if isinstance(v, tuple):
                return ",".join(v)
            if v is None:
                return ""
            return f"{v:.17g}" if isinstance(v, float) else str(v)

        pairs = [(_KEY_BY_FIELD[f.name], fmt(getattr(self, f.name)))
                 for f in fields(self)]
        return sorted(pairs)


_KEY_BY_FIELD = {
    "mode": "mode",
    "data_path": "data.path",
    "modalities": "data.modalities",
    "top_variance": "data.top_variance",
    "intervals": "grid.intervals",
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "learning_rate": "train.learning_rate",
    "weight_decay": "train.weight_decay",
    "bayesian": "train.bayesian",
    "patience": "train.patience",
    "privacy_enabled": "privacy.enabled",
    "epsilon": "privacy.epsilon",
    "delta": "privacy.delta",
    "clip_bound": "privacy.clip",
    "c2": "privacy.c2",
    "seed": "seed",
    "transport": "transport",
    "tcp_host": "tcp.host",
    "tcp_port": "tcp.port",
    "spawn_clients": "tcp.spawn_clients",
    "output": "output",
    "embed_dim": "model.embed_dim",
    "cat_embed_dim": "model.cat_embed_dim",
    "head_hidden_layers": "model.head_hidden_layers",
    "head_hidden_width": "model.head_hidden_width",
    "dropout": "model.dropout",
    "eval_draws": "eval.draws",
}
_FIELD_BY_KEY = {v: k for k, v in _KEY_BY_FIELD.items()}


def _parse_value(field_name: str, raw: str):
    raw = raw.strip()
    hints = {f.name: f.type for f in fields(RunConfig)}
    hint = hints[field_name]
    if raw == "" and "None" in str(hint):
        return None
    if field_name == "modalities":
        return tuple(s.strip() for s in raw.split(",") if s.strip())
    if "bool" in str(hint):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{_KEY_BY_FIELD[field_name]}: not a boolean: {raw!r}")
    if "int" in str(hint):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{_KEY_BY_FIELD[field_name]}: not an integer: "
                              f"{raw!r}") from None
    if "float" in str(hint):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{_KEY_BY_FIELD[field_name]}: not a number: "
                              f"{raw!r}") from None
    return raw


def load_config(path: str | None = None, overrides: dict | None = None,
                env: dict | None = None) -> RunConfig:
    """File values, then flag overrides (flat keys), then BVFL_SEED."""
    cfg = RunConfig()
    if path:
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key = value")
                key, raw = (s.strip() for s in line.split("=", 1))
                if key not in _FIELD_BY_KEY:
                    raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
                setattr(cfg, _FIELD_BY_KEY[key], _parse_value(_FIELD_BY_KEY[key], raw))
    for key, value in (overrides or {}).items():
        if key not in _FIELD_BY_KEY:
            raise ConfigError(f"unknown config key {key!r}")
        name = _FIELD_BY_KEY[key]
        if isinstance(value, str):
            value = _parse_value(name, value)
        setattr(cfg, name, value)
    env = env if env is not None else os.environ
    if "BVFL_SEED" in env:
        try:
            cfg.seed = int(env["BVFL_SEED"])
        except ValueError:
            raise ConfigError("BVFL_SEED: not an integer") from None
    cfg.validate()
    return cfg


def config_digest(cfg: RunConfig) -> str:
    """128-bit hex digest over canonical key=value lines (paths excluded)."""
    h = hashlib.sha256()
    for key, value in cfg.to_items():
        if key in _PATH_KEYS:
            continue
        h.update(f"{key}={value}\n".encode("utf-8"))
    return h.hexdigest()[:32]


def write_manifest(path: str, cfg: RunConfig, extra: dict | None = None) -> None:
    lines = [f"{k} = {v}" for k, v in cfg.to_items()]
    lines.append(f"config.digest = {config_digest(cfg)}")
    for k in sorted(extra or {}):
        lines.append(f"resolved.{k} = {(extra or {})[k]}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path: str) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or "=" not in line:
                continue
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out
