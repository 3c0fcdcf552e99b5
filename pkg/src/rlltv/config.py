"""Plain-text experiment configuration.

One ``section.key = value`` assignment per line, ``#`` starts a comment and
``include <path>`` pulls in another file (relative to the including file)
whose assignments can then be overridden.  Sections are ``sim``,
``trainer``, ``eval`` and ``run``.  Values are parsed against the type of
the field's default: ints, floats, ``true``/``false``, ``none``, strings
and comma-separated tuples.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .market import SimConfig
from .nn import ConfigError
from .trainer import TrainerConfig

CONFIG_VERSION = 1
OUTPUT_ROOT_ENV = "RLLTV_OUTPUT_ROOT"


@dataclass
class EvalConfig:
    warmup_days: int = 2
    eval_days: int = 7
    return_window: int = 5
    list_size: int = 100
    cold_age: int | None = 9
    ks: tuple = (10, 20, 50)
    sweep_step: float = 0.05
    sup_lr: float = 1e-4
    sup_steps: int | None = None
    sup_batch: int = 50
    sup_head: int = 0
    empirical_weights: tuple = (1 / 3, 1 / 3, 1 / 3)
    empirical_percentile: float = 50.0
    arms: bool = True
    arm_cohort: int = 60
    arm_days: int = 10
    arm_budget_share: float = 0.1

    def validate(self) -> "EvalConfig":
        if self.eval_days <= 0 or self.return_window <= 0 or self.warmup_days < 0:
            raise ConfigError("eval_days and return_window must be positive, warmup_days non-negative")
        if self.list_size < max(self.ks):
            raise ConfigError("list_size must be at least the largest k")
        if not 0 < self.sweep_step <= 1:
            raise ConfigError("sweep_step must lie in (0, 1]")
        if self.arm_cohort < 2 or not 0 < self.arm_budget_share < 1:
            raise ConfigError("arm_cohort >= 2 and arm_budget_share in (0, 1)")
        return self


@dataclass
class RunConfig:
    name: str = "run"
    seed: int = 0
    sessions: int = 6
    out_dir: str | None = None

    def validate(self) -> "RunConfig":
        if self.sessions < 0:
            raise ConfigError("sessions must be non-negative")
        return self


@dataclass
class ExperimentConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    run: RunConfig = field(default_factory=RunConfig)

    SECTIONS = ("sim", "trainer", "eval", "run")

    def validate(self) -> "ExperimentConfig":
        self.sim.validate()
        self.trainer.validate()
        self.eval.validate()
        self.run.validate()
        return self

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Same experiment with every seed replaced by ``seed``."""
        return ExperimentConfig(dataclasses.replace(self.sim, seed=seed), dataclasses.replace(self.trainer, seed=seed),
                                self.eval, dataclasses.replace(self.run, seed=seed))

    def output_dir(self) -> Path:
        if self.run.out_dir:
            return Path(self.run.out_dir)
        return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / f"{self.run.name}-seed{self.run.seed}"


# ---------------------------------------------------------------------------
# parsing


def _parse_scalar(text: str, like: Any, key: str):
    t = text.strip()
    low = t.lower()
    if low == "none":
        return None
    if isinstance(like, bool):
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    try:
        if isinstance(like, int):
            return int(t)
        if isinstance(like, float):
            return float(t)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(like).__name__}") from None
    if like is None:
        # untyped default (optional field): best effort
        for conv in (int, float):
            try:
                return conv(t)
            except ValueError:
                pass
    return t


def _parse_value(text: str, default: Any, key: str):
    if isinstance(default, tuple):
        parts = [p for p in text.split(",") if p.strip()]
        like = default[0] if default else 0.0
        return tuple(_parse_scalar(p, like, key) for p in parts)
    return _parse_scalar(text, default, key)


def parse_lines(path: Path, seen: tuple = ()) -> list[tuple[str, str, str]]:
    """(key, value, origin) triples in file order, includes expanded in place."""
    path = Path(path).resolve()
    if path in seen:
        raise ConfigError(f"include cycle through {path}")
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    out = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        origin = f"{path.name}:{n}"
        if line.startswith("include "):
            out += parse_lines(path.parent / line[len("include "):].strip(), seen + (path,))
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out.append((key, value, origin))
    return out


def apply(cfg: ExperimentConfig, key: str, value: str, origin: str = "override") -> None:
    if "." not in key:
        raise ConfigError(f"{origin}: key {key!r} needs a section prefix")
    section, name = key.split(".", 1)
    if section not in ExperimentConfig.SECTIONS:
        raise ConfigError(f"{origin}: unknown section {section!r}")
    target = getattr(cfg, section)
    names = {f.name: f for f in fields(target)}
    if name not in names:
        raise ConfigError(f"{origin}: unknown key {key!r}")
    default = getattr(type(target)(), name)
    setattr(target, name, _parse_value(value, default, key))


def load_config(path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for key, value, origin in parse_lines(Path(path)):
        apply(cfg, key, value, origin)
    for key, value in (overrides or {}).items():
        apply(cfg, key, str(value))
    return cfg.validate()


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: ExperimentConfig) -> str:
    """Canonical text form; loading it back gives an equal config."""
    lines = [f"# config format version {CONFIG_VERSION}"]
    for section in ExperimentConfig.SECTIONS:
        obj = getattr(cfg, section)
        for f in fields(obj):
            lines.append(f"{section}.{f.name} = {_fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"
