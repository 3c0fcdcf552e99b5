"""Action-value network: Q = V(o_e, h) + A(s, a) + Bias(s, x_t, a).

The three terms are summed as-is; there is no mean/max advantage
normalisation, so V and A are only identified up to a shared constant.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .actor import ModelConfig, Trunk, _mlp, trunk
from .nn import LstmState, ParameterSet, Tape, Var


@dataclass
class QParts:
    v: Var
    a: Var
    bias: Var | None
    q: Var


def advantage_terms(tape: Tape, tr: Trunk, action: Var, cfg: ModelConfig) -> tuple[Var, Var | None]:
    """A(s, a) and, unless trends are ablated, the linear trend bias."""
    adv = _mlp(tape, tape.concat([tr.s, action]), "critic/A", len(cfg.critic_hidden) + 1, last_act="identity")
    if cfg.no_x_t:
        return adv, None
    bias = tape.dense(tape.concat([tr.s, tr.x_t, action]), tape.param("critic/Bias/W0"),
                      tape.param("critic/Bias/b0"))
    return adv, bias


def q_parts(tape: Tape, tr: Trunk, action: Var, cfg: ModelConfig) -> QParts:
    v = _mlp(tape, tape.concat([tr.o_e, tr.h]), "critic/V", len(cfg.critic_hidden) + 1, last_act="identity")
    adv, bias = advantage_terms(tape, tr, action, cfg)
    q = tape.add(v, adv) if bias is None else tape.add(v, adv, bias)
    return QParts(v, adv, bias, q)


def q_value(params: ParameterSet, obs: np.ndarray, action: np.ndarray, prev: LstmState, cfg: ModelConfig):
    """Inference: (Q values, next LstmState) for a batch."""
    tape = Tape(params, trainable=())
    tr = trunk(tape, obs, prev, cfg)
    parts = q_parts(tape, tr, tape.const(np.atleast_2d(action)), cfg)
    return parts.q.value[:, 0], LstmState(tr.c.value, tr.h.value)


def td_target(r, q_next_target, gamma: float, terminal):
    """r + gamma * Q'(o', a'), or just r on a terminal step."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    r = np.asarray(r, dtype=np.float64)
    keep = 1.0 - np.asarray(terminal, dtype=np.float64)
    out = r + gamma * np.asarray(q_next_target, dtype=np.float64) * keep
    return float(out) if out.ndim == 0 else out
