"""Experiment configuration: defaults, presets, parsing and serialization.

Configs are flat key=value text; '#' starts a comment and blank lines are
ignored. Values are scalars except ``ranks`` and ``strategies``, which are
comma-separated lists. Precedence when sources are combined: defaults, then
preset, then config file, then command-line flags. Validation checks every
field and reports all problems at once.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .data import SKEW_KINDS
from .errors import ConfigError
from .lora import INIT_KINDS
from .simulation import STRATEGIES
from .training import LOSS_KINDS

SCALING_SWEEP = (0.01, 0.05, 0.1, 0.2)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs; every field has a usable default."""

    m: int = 16
    n: int = 16
    clients: int = 10
    ranks: tuple[int, ...] = (16,) * 10
    strategy: str = "flora"
    strategies: tuple[str, ...] = ()
    rounds: int = 3
    epochs: int = 1
    lr: float = 3e-4
    batch_size: int = 16
    loss: str = "squared-error"
    skew: str = "iid"
    skew_strength: float = 0.0
    scaling_override: float | None = None
    seed: int = 42
    out: str = "report.csv"
    samples: int = 1000
    noise_std: float = 0.01
    teacher_rank: int = 4
    init_kind: str = "zero-delta-gaussian"
    init_std: float = 0.01
    client_fraction: float = 1.0

    def validate(self) -> None:
        """Raise ConfigError listing every violated constraint."""
        p: list[str] = []
        if self.m < 1 or self.n < 1:
            p.append(f"m/n: dimensions must be >= 1, got {self.m}x{self.n}")
        if self.clients < 1:
            p.append(f"clients: must be >= 1, got {self.clients}")
        if len(self.ranks) != self.clients:
            p.append(f"ranks: got {len(self.ranks)} ranks for {self.clients} clients")
        if any(r < 1 for r in self.ranks):
            p.append(f"ranks: all ranks must be >= 1, got {list(self.ranks)}")
        for name, value in (("strategy", self.strategy), *(("strategies", s) for s in self.strategies)):
            if value not in STRATEGIES:
                p.append(f"{name}: unknown strategy {value!r}, expected one of {STRATEGIES}")
        wants_fedit = self.strategy == "fedit" or "fedit" in self.strategies
        if wants_fedit and len(set(self.ranks)) > 1:
            p.append("strategy: fedit requires homogeneous ranks")
        if self.rounds < 0:
            p.append(f"rounds: must be >= 0, got {self.rounds}")
        if self.epochs < 1:
            p.append(f"epochs: must be >= 1, got {self.epochs}")
        if not np.isfinite(self.lr) or self.lr < 0:
            p.append(f"lr: must be finite and >= 0, got {self.lr}")
        if self.batch_size < 1:
            p.append(f"batch_size: must be >= 1, got {self.batch_size}")
        if self.loss not in LOSS_KINDS:
            p.append(f"loss: unknown loss {self.loss!r}, expected one of {LOSS_KINDS}")
        if self.skew not in SKEW_KINDS:
            p.append(f"skew: unknown kind {self.skew!r}, expected one of {SKEW_KINDS}")
        if not np.isfinite(self.skew_strength) or self.skew_strength < 0:
            p.append(f"skew_strength: must be finite and >= 0, got {self.skew_strength}")
        if self.scaling_override is not None and not (0 < self.scaling_override <= 1):
            p.append(f"scaling_override: must be in (0, 1], got {self.scaling_override}")
        if self.samples < 2:
            p.append(f"samples: must be >= 2, got {self.samples}")
        else:
            train = self.samples - max(1, int(round(self.samples * 0.2)))
            if train < self.clients:
                p.append(
                    f"samples: {self.samples} leaves {train} training samples "
                    f"for {self.clients} clients after the holdout"
                )
        if not np.isfinite(self.noise_std) or self.noise_std < 0:
            p.append(f"noise_std: must be finite and >= 0, got {self.noise_std}")
        if self.m >= 1 and self.n >= 1 and not (1 <= self.teacher_rank <= min(self.m, self.n)):
            p.append(f"teacher_rank: must be in [1, min(m, n)], got {self.teacher_rank}")
        if self.init_kind not in INIT_KINDS:
            p.append(f"init_kind: unknown kind {self.init_kind!r}, expected one of {INIT_KINDS}")
        if not np.isfinite(self.init_std) or self.init_std < 0:
            p.append(f"init_std: must be finite and >= 0, got {self.init_std}")
        if not (0 < self.client_fraction <= 1):
            p.append(f"client_fraction: must be in (0, 1], got {self.client_fraction}")
        if p:
            raise ConfigError(p)


# Preset expansions mirroring the two benchmark client populations: ten
# clients at rank 16, and ten clients with the mixed-capacity rank profile.
PRESETS: dict[str, dict[str, str]] = {
    "homo16": {
        "clients": "10",
        "ranks": "16,16,16,16,16,16,16,16,16,16",
        "rounds": "3",
        "epochs": "1",
    },
    "hetero": {
        "clients": "10",
        "ranks": "64,32,16,16,8,8,4,4,4,4",
        "rounds": "3",
        "epochs": "1",
    },
}


def _parse_int(text: str) -> int:
    return int(text, 0)


def _parse_float(text: str) -> float:
    return float(text)


def _parse_ranks(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip() != "")


def _parse_strategies(text: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in text.split(",") if part.strip() != "")


def _parse_optional_float(text: str) -> float | None:
    return None if text.strip() == "" else float(text)


_PARSERS = {
    "m": _parse_int,
    "n": _parse_int,
    "clients": _parse_int,
    "ranks": _parse_ranks,
    "strategy": str.strip,
    "strategies": _parse_strategies,
    "rounds": _parse_int,
    "epochs": _parse_int,
    "lr": _parse_float,
    "batch_size": _parse_int,
    "loss": str.strip,
    "skew": str.strip,
    "skew_strength": _parse_float,
    "scaling_override": _parse_optional_float,
    "seed": _parse_int,
    "out": str.strip,
    "samples": _parse_int,
    "noise_std": _parse_float,
    "teacher_rank": _parse_int,
    "init_kind": str.strip,
    "init_std": _parse_float,
    "client_fraction": _parse_float,
}


def read_config_text(text: str) -> dict[str, str]:
    """Split flat key=value text into a raw mapping; syntax errors collected."""
    raw: dict[str, str] = {}
    problems: list[str] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            problems.append(f"line {lineno}: expected key=value, got {stripped!r}")
            continue
        key, value = stripped.split("=", 1)
        raw[key.strip()] = value.strip()
    if problems:
        raise ConfigError(problems)
    return raw


def parse_config(
    path: str | Path | None = None,
    overrides: dict[str, str] | None = None,
    preset: str | None = None,
) -> ExperimentConfig:
    """Build a validated config from preset, file and override layers."""
    problems: list[str] = []
    layers: list[dict[str, str]] = []
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError([f"preset: unknown preset {preset!r}, expected one of {sorted(PRESETS)}"])
        layers.append(PRESETS[preset])
    if path is not None:
        try:
            layers.append(read_config_text(Path(path).read_text(encoding="utf-8")))
        except OSError as exc:
            raise ConfigError([f"config: cannot read {path}: {exc}"]) from exc
    if overrides:
        layers.append({k: v for k, v in overrides.items() if v is not None})

    values: dict[str, object] = {}
    for layer in layers:
        for key, text in layer.items():
            parser = _PARSERS.get(key)
            if parser is None:
                problems.append(f"{key}: unknown key")
                continue
            try:
                values[key] = parser(text)
            except (TypeError, ValueError):
                problems.append(f"{key}: cannot parse {text!r}")
    if problems:
        raise ConfigError(problems)
    config = ExperimentConfig(**values)
    config.validate()
    return config


def config_to_text(config: ExperimentConfig) -> str:
    """Serialize a config as key=value lines; parse_config inverts this."""
    lines = []
    for spec_field in fields(config):
        value = getattr(config, spec_field.name)
        if value is None:
            continue
        if isinstance(value, tuple):
            rendered = ",".join(str(v) for v in value)
        elif isinstance(value, float):
            rendered = repr(value)
        else:
            rendered = str(value)
        lines.append(f"{spec_field.name} = {rendered}")
    return "\n".join(lines) + "\n"


def with_overrides(config: ExperimentConfig, **kwargs) -> ExperimentConfig:
    """Functional update preserving validation."""
    updated = replace(config, **kwargs)
    updated.validate()
    return updated
