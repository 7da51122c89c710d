"""Experiment configuration: flat ``key = value`` files with typed fields.

Precedence is command-line flags over the file over per-experiment
defaults. ``resolved_text`` renders every field so a run can be repeated
from its ``config.resolved`` alone.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from spinet.errors import ConfigError, SpinIOError

EXPERIMENTS = ("hydrogen", "sfa-video", "tabular", "baseline-grid")


@dataclass
class ExperimentConfig:
    experiment: str = "tabular"
    seed: int = 0
    iters: int = 3000
    K: int = 4
    learning_rate: float = 1e-2
    rmsprop_decay: float = 0.999
    rmsprop_epsilon: float = 1e-10
    beta: float = 0.1
    optimizer: str = "rmsprop"
    schedule: str = "constant"
    anneal_steps: int = 10_000
    batch_size: int = 0
    log_every: int = 1
    checkpoint_every: int = 1000
    # networks
    hidden: tuple = (64, 64, 64, 64)
    block_sparse: bool = False
    # hydrogen and grid
    halfwidth: float = 50.0
    fd_step: float = 0.1
    input_scale: float = 0.0  # 0 means 1 / halfwidth
    r_min: float = 1e-3
    eval_samples: int = 131072
    heatmap_size: int = 64
    heatmap_halfwidth: float = 10.0
    grid_size: int = 64
    # tabular
    n_states: int = 20
    matrix_seed: int = 0
    matrix_file: str = ""
    negate: bool = False
    init_scale: float = 1.0
    # sfa-video
    n_balls: int = 1
    frame_size: int = 16
    radius: float = 0.12
    speed: float = 0.04
    n_clips: int = 64
    clip_frames: int = 200
    clips_per_batch: int = 24
    frames_per_clip: int = 10
    heldout_clips: int = 16

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        for name in ("learning_rate", "beta", "rmsprop_epsilon", "fd_step", "r_min", "halfwidth"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        counts = ("K", "log_every", "checkpoint_every", "anneal_steps", "grid_size", "n_states", "heatmap_size")
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.input_scale < 0:
            raise ConfigError("input_scale must be non-negative")
        if self.iters < 0 or self.batch_size < 0:
            raise ConfigError("iters and batch_size must be non-negative")
        if self.beta > 1:
            raise ConfigError("beta must lie in (0, 1]")
        if not 0 <= self.rmsprop_decay < 1:
            raise ConfigError("rmsprop_decay must lie in [0, 1)")
        if self.optimizer == "rmsprop" and not self.beta > 1 - self.rmsprop_decay:
            raise ConfigError(
                "timescale rule violated: beta must exceed 1 - rmsprop_decay "
                f"(beta={self.beta}, 1 - rmsprop_decay={1 - self.rmsprop_decay:g}); "
                "the covariance average must forget faster than the optimizer's accumulator"
            )
        if self.experiment == "hydrogen" and not self.fd_step < self.halfwidth:
            raise ConfigError("fd_step must be smaller than halfwidth")
        if self.experiment == "sfa-video" and self.frames_per_clip < 3:
            raise ConfigError("frames_per_clip must be at least 3")
        return self


_DEFAULTS = {
    "tabular": {},
    "hydrogen": dict(
        K=5,
        iters=200_000,
        learning_rate=1e-5,
        beta=0.01,
        batch_size=128,
        log_every=100,
        checkpoint_every=10_000,
        halfwidth=50.0,
    ),
    "sfa-video": dict(
        K=4,
        iters=100_000,
        learning_rate=1e-6,
        beta=0.01,
        hidden=(64, 64),
        log_every=100,
        checkpoint_every=10_000,
    ),
    "baseline-grid": dict(K=9, iters=0, halfwidth=50.0),
}


def defaults_for(experiment: str) -> ExperimentConfig:
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment!r}; choose from {EXPERIMENTS}")
    return dataclasses.replace(ExperimentConfig(experiment=experiment), **_DEFAULTS[experiment])


def _field_types():
    return {f.name: type(f.default) for f in fields(ExperimentConfig)}


def parse_value(key: str, text: str):
    types = _field_types()
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    kind = types[key]
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            return tuple(int(v) for v in text.replace(" ", "").split(",") if v)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = parse_value(key, value)
    return out


def load_config_file(path) -> dict:
    try:
        return parse_config_text(Path(path).read_text())
    except OSError as exc:
        raise SpinIOError(f"cannot read config {path}: {exc}") from exc


def resolve(experiment: str, file_values: dict | None = None, overrides: dict | None = None):
    """Defaults, then file values, then flag overrides; validated."""
    file_values = dict(file_values or {})
    named = file_values.pop("experiment", experiment)
    if named != experiment:
        raise ConfigError(f"config file is for {named!r}, not {experiment!r}")
    cfg = dataclasses.replace(defaults_for(experiment), **file_values)
    cfg = dataclasses.replace(cfg, **{k: v for k, v in (overrides or {}).items() if v is not None})
    return cfg.validate()


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def resolved_text(cfg: ExperimentConfig) -> str:
    lines = [f"{f.name} = {format_value(getattr(cfg, f.name))}" for f in fields(cfg)]
    return "\n".join(lines) + "\n"
