"""Blend of the click-model score and the policy score, weighted by critic value."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .nn import ConfigError


@dataclass
class MixerConfig:
    alpha_min: float = 0.0
    alpha_max: float = 0.2
    q_min: float = 0.0
    q_max: float = 1.0
    fixed_alpha: Optional[float] = None

    def validate(self) -> "MixerConfig":
        if not 0.0 <= self.alpha_min <= self.alpha_max < 1.0:
            raise ConfigError(f"need 0 <= alpha_min <= alpha_max < 1, got {self.alpha_min}, {self.alpha_max}")
        if not self.q_max > self.q_min:
            raise ConfigError(f"need q_max > q_min, got {self.q_min}, {self.q_max}")
        if self.fixed_alpha is not None and not 0.0 <= self.fixed_alpha <= 1.0:
            raise ConfigError(f"fixed_alpha must lie in [0, 1], got {self.fixed_alpha}")
        return self


def alpha(q, cfg: MixerConfig):
    """Exponential ramp from alpha_min at q_min to alpha_max at q_max; q is clamped first."""
    cfg.validate()
    if cfg.fixed_alpha is not None:
        return np.full_like(np.asarray(q, dtype=np.float64), cfg.fixed_alpha) if np.ndim(q) else cfg.fixed_alpha
    if cfg.alpha_min == cfg.alpha_max:
        return np.full_like(np.asarray(q, dtype=np.float64), cfg.alpha_min) if np.ndim(q) else cfg.alpha_min
    span = math.log(1.0 + cfg.alpha_max - cfg.alpha_min)
    frac = (np.clip(q, cfg.q_min, cfg.q_max) - cfg.q_min) / (cfg.q_max - cfg.q_min)
    a = np.exp(frac * span) - 1.0 + cfg.alpha_min
    # exp(log(1+x)) - 1 can land an ulp off the bound; the ends are exact by definition
    a = np.where(frac >= 1.0, cfg.alpha_max, np.clip(a, cfg.alpha_min, cfg.alpha_max))
    a = np.where(frac <= 0.0, cfg.alpha_min, a)
    return float(a) if np.ndim(a) == 0 else a


def mix(y_ctr, y_rl, a):
    return (1.0 - a) * y_ctr + a * y_rl


class DualRankMixer:
    """Per-item final scores for the allocation step.

    ``alphas`` maps item id to its mixing weight; items without an entry
    use pure click-model ranking (weight 0).
    """

    def __init__(self, alphas: dict[int, float] | None = None, default: float = 0.0):
        self.alphas = alphas or {}
        self.default = default

    @classmethod
    def from_q(cls, item_ids, q_values, cfg: MixerConfig) -> "DualRankMixer":
        a = np.atleast_1d(alpha(np.asarray(q_values, dtype=np.float64), cfg))
        return cls({int(i): float(x) for i, x in zip(item_ids, a)})

    def final_scores(self, item_ids, y_ctr, y_rl) -> np.ndarray:
        a = np.array([self.alphas.get(int(i), self.default) for i in item_ids])
        return mix(np.asarray(y_ctr, dtype=np.float64), np.asarray(y_rl, dtype=np.float64), a)
