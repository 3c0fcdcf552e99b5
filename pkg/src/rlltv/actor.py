"""Policy network: item encoder, shared LSTM and the wide & deep scoring head.

The encoder and LSTM are owned jointly with the critic (they live under the
``enc/`` and ``lstm/`` prefixes of the one parameter set).  The actor reads
them but never trains them.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .mdp import S_DIM, XT_DIM
from .nn import ConfigError, LstmState, ParameterSet, Tape, Var, init_uniform, sigmoid


@dataclass(frozen=True)
class ModelConfig:
    content_dim: int = 16
    vocab_sizes: tuple = (9, 31, 41)
    id_embed_dim: int = 4
    encoder_dim: int = 8
    lstm_hidden: int = 4
    wide_dim: int = 16
    deep_widths: tuple = (32, 32, 16)
    critic_hidden: tuple = (32, 32)
    s_dim: int = S_DIM
    xt_dim: int = XT_DIM
    no_x_i: bool = False
    no_x_t: bool = False
    no_recurrent: bool = False

    @property
    def xe_dim(self) -> int:
        return self.content_dim + self.encoder_dim

    @property
    def oe_dim(self) -> int:
        return self.s_dim + self.xt_dim + self.xe_dim

    @property
    def obs_dim(self) -> int:
        return self.s_dim + self.xt_dim + self.content_dim + 3

    @property
    def score_dim(self) -> int:
        # softmax width equals the item-vector width so the final dot product is defined
        return self.xe_dim

    def check(self) -> "ModelConfig":
        if len(self.deep_widths) != 3:
            raise ConfigError("deep branch must have exactly three layers")
        if min(self.deep_widths + self.critic_hidden + (self.wide_dim, self.lstm_hidden, self.encoder_dim)) <= 0:
            raise ConfigError("layer widths must be positive")
        if len(self.vocab_sizes) != 3:
            raise ConfigError("need vocabulary sizes for category, brand and shop")
        return self


def parameter_specs(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    cfg.check()
    H, oe, e = cfg.lstm_hidden, cfg.oe_dim, cfg.id_embed_dim
    specs = [
        ("enc/emb_category", (cfg.vocab_sizes[0], e)),
        ("enc/emb_brand", (cfg.vocab_sizes[1], e)),
        ("enc/emb_shop", (cfg.vocab_sizes[2], e)),
        ("enc/W", (cfg.encoder_dim, 3 * e)),
        ("enc/b", (cfg.encoder_dim,)),
        # rows: forget, update, output, candidate
        ("lstm/W", (4 * H, H + oe)),
        ("lstm/b", (4 * H,)),
    ]

    def mlp(prefix, n_in, widths):
        out, prev = [], n_in
        for k, w in enumerate(widths):
            out += [(f"{prefix}/W{k}", (w, prev)), (f"{prefix}/b{k}", (w,))]
            prev = w
        return out

    specs += mlp("critic/V", oe + H, cfg.critic_hidden + (1,))
    specs += mlp("critic/A", cfg.s_dim + 2, cfg.critic_hidden + (1,))
    specs += mlp("critic/Bias", cfg.s_dim + cfg.xt_dim + 2, (1,))
    specs += mlp("actor/wide", oe, (cfg.wide_dim,))
    specs += mlp("actor/deep", oe + H, cfg.deep_widths)
    head_in = cfg.deep_widths[-1] + cfg.wide_dim
    specs += [
        ("actor/S/W", (cfg.score_dim, head_in)), ("actor/S/b", (cfg.score_dim,)),
        ("actor/P/W", (cfg.score_dim, head_in)), ("actor/P/b", (cfg.score_dim,)),
        ("actor/u_score", (cfg.score_dim,)), ("actor/u_price", (cfg.score_dim,)),
    ]
    return specs


CRITIC_PREFIXES = ("enc/", "lstm/", "critic/")
ACTOR_PREFIXES = ("actor/",)


def init_parameters(cfg: ModelConfig, rng: np.random.Generator) -> ParameterSet:
    ps = ParameterSet(parameter_specs(cfg))
    init_uniform(ps, rng, skip=lambda n: n.startswith("enc/emb"))
    for name in ("enc/emb_category", "enc/emb_brand", "enc/emb_shop"):
        ps[name][...] = rng.normal(0.0, 0.1, size=ps[name].shape)
    H = cfg.lstm_hidden
    ps["lstm/b"][:H] = 1.0
    return ps


# ---------------------------------------------------------------------------
# shared trunk


def _masks(cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    m_xt = 0.0 if cfg.no_x_t else 1.0
    m_xi = 0.0 if cfg.no_x_i else 1.0
    return m_xt, m_xi


def encode(tape: Tape, ids: np.ndarray, cfg: ModelConfig) -> Var:
    """Embedding lookups for the three id columns, then a tanh projection."""
    ids = np.asarray(ids).astype(np.int64)
    parts = [tape.embed(tape.param(f"enc/emb_{k}"), ids[:, j]) for j, k in enumerate(("category", "brand", "shop"))]
    return tape.dense(tape.concat(parts), tape.param("enc/W"), tape.param("enc/b"), "tanh")


@dataclass
class Trunk:
    s: Var
    x_t: Var
    x_e: Var
    o_e: Var
    h: Var
    c: Var


def trunk(tape: Tape, obs: np.ndarray, prev, cfg: ModelConfig) -> Trunk:
    """Split a normalized observation batch, encode the item and run one LSTM step.

    ``prev`` is an :class:`LstmState` (treated as constant) or an ``(h, c)``
    pair of Vars already on the tape, which keeps the recurrent link.
    """
    obs = np.atleast_2d(obs)
    if isinstance(prev, LstmState):
        h_prev, c_prev = tape.const(prev.h), tape.const(prev.c)
    else:
        h_prev, c_prev = prev
    sd, xd, cd = cfg.s_dim, cfg.xt_dim, cfg.content_dim
    m_xt, m_xi = _masks(cfg)
    s = tape.const(obs[:, :sd])
    x_t = tape.const(obs[:, sd:sd + xd] * m_xt)
    content = tape.const(obs[:, sd + xd:sd + xd + cd] * m_xi)
    enc = encode(tape, obs[:, sd + xd + cd:sd + xd + cd + 3], cfg)
    if cfg.no_x_i:
        enc = tape.mul(enc, tape.const(np.zeros((1, cfg.encoder_dim))))
    x_e = tape.concat([content, enc])
    o_e = tape.concat([s, x_t, x_e])
    if cfg.no_recurrent:
        B = obs.shape[0]
        h = tape.const(np.zeros((B, cfg.lstm_hidden)))
        c = tape.const(np.zeros((B, cfg.lstm_hidden)))
    else:
        h, c = tape.lstm(o_e, h_prev, c_prev, tape.param("lstm/W"), tape.param("lstm/b"))
    return Trunk(s, x_t, x_e, o_e, h, c)


def trunk_seq(tape: Tape, obs_seq: np.ndarray, cfg: ModelConfig, prev: LstmState | None = None) -> list[Trunk]:
    """Unroll over ``obs_seq`` of shape (T, batch, obs_dim) keeping the recurrent
    links on the tape, so gradients flow through time."""
    T, B = obs_seq.shape[:2]
    out = []
    h = tape.const(np.zeros((B, cfg.lstm_hidden)) if prev is None else prev.h)
    c = tape.const(np.zeros((B, cfg.lstm_hidden)) if prev is None else prev.c)
    for t in range(T):
        step = trunk(tape, obs_seq[t], (h, c), cfg)
        out.append(step)
        h, c = step.h, step.c
    return out


# ---------------------------------------------------------------------------
# policy head


def _mlp(tape: Tape, x: Var, prefix: str, n_layers: int, last_act: str = "relu") -> Var:
    for k in range(n_layers):
        act = "relu" if k < n_layers - 1 else last_act
        x = tape.dense(x, tape.param(f"{prefix}/W{k}"), tape.param(f"{prefix}/b{k}"), act)
    return x


@dataclass
class ActorOut:
    y_rl: Var
    p: Var
    S: Var
    S_p: Var


def actor_head(tape: Tape, tr: Trunk, cfg: ModelConfig) -> ActorOut:
    o_wide = _mlp(tape, tr.o_e, "actor/wide", 1)
    o_deep = _mlp(tape, tape.concat([tr.o_e, tr.h]), "actor/deep", 3)
    joint = tape.concat([o_deep, o_wide])
    S = tape.softmax(tape.dense(joint, tape.param("actor/S/W"), tape.param("actor/S/b")))
    S_p = tape.softmax(tape.dense(joint, tape.param("actor/P/W"), tape.param("actor/P/b")))
    if cfg.no_x_i:
        B = tr.o_e.value.shape[0]
        item_vec = tape.add(tape.const(np.zeros((B, cfg.score_dim))), tape.param("actor/u_score"))
        price_vec = tape.add(tape.const(np.zeros((B, cfg.score_dim))), tape.param("actor/u_price"))
    else:
        item_vec = price_vec = tr.x_e
    y_rl = tape.sigmoid(tape.rowdot(item_vec, S))
    p = tape.sigmoid(tape.rowdot(price_vec, S_p))
    return ActorOut(y_rl, p, S, S_p)


def detached(tape: Tape, tr: Trunk) -> Trunk:
    """Copy of a trunk whose values are constants on ``tape`` (stop-gradient)."""
    return Trunk(*(tape.const(getattr(tr, f).value) for f in ("s", "x_t", "x_e", "o_e", "h", "c")))


def act(params: ParameterSet, obs: np.ndarray, prev: LstmState, cfg: ModelConfig):
    """Inference: returns (y_rl, p, next LstmState) for a batch of items."""
    tape = Tape(params, trainable=())
    tr = trunk(tape, obs, prev, cfg)
    out = actor_head(tape, tr, cfg)
    return out.y_rl.value[:, 0], out.p.value[:, 0], LstmState(tr.c.value, tr.h.value)


# ---------------------------------------------------------------------------
# exploration


def _logit(y):
    y = np.clip(y, 1e-12, 1 - 1e-12)
    return np.log(y) - np.log1p(-y)


def explore(y_rl, p, noise_scale: float, rng: np.random.Generator):
    """Gaussian noise on the logits, squashed back into (0, 1)."""
    if noise_scale < 0:
        raise ConfigError("noise_scale must be non-negative")
    y_rl = np.asarray(y_rl, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if noise_scale == 0:
        return y_rl.copy(), p.copy()
    y_new = sigmoid(_logit(y_rl) + noise_scale * rng.normal(size=y_rl.shape))
    p_new = sigmoid(_logit(p) + noise_scale * rng.normal(size=p.shape))
    # keep strictly inside the open interval even when the sigmoid rounds to 0 or 1
    tiny = np.finfo(np.float64).eps
    return np.clip(y_new, tiny, 1 - tiny), np.clip(p_new, tiny, 1.0)
