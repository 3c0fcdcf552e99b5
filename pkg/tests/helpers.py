"""Shared test utilities: small random models, finite differences and a
long-double reference forward pass for the critic."""
from __future__ import annotations

import numpy as np

from rlltv import actor as A
from rlltv.nn import ParameterSet

FD_STEP = 1e-5
REL_TOL = 1e-4
# Central differences at h=1e-5 carry roughly eps*|loss|/h of rounding noise,
# so relative error is only meaningful for gradients above about 1e-6*|loss|.
# Smaller gradients are compared against that floor instead.
GRAD_FLOOR = 1e-6
# relu pre-activations closer than this to zero make finite differences unreliable
KINK_MARGIN = 1e-3


def small_model(rng: np.random.Generator, **flags) -> A.ModelConfig:
    return A.ModelConfig(
        content_dim=int(rng.integers(1, 4)),
        vocab_sizes=tuple(int(v) for v in rng.integers(2, 6, size=3)),
        id_embed_dim=2,
        encoder_dim=int(rng.integers(1, 4)),
        lstm_hidden=int(rng.integers(1, 4)),
        wide_dim=int(rng.integers(1, 4)),
        deep_widths=tuple(int(v) for v in rng.integers(1, 4, size=3)),
        critic_hidden=tuple(int(v) for v in rng.integers(1, 4, size=2)),
        s_dim=3, xt_dim=2, **flags)


def random_obs(rng: np.random.Generator, model: A.ModelConfig, *lead) -> np.ndarray:
    """Normalized observations with valid id columns in the last three slots."""
    dense = rng.normal(size=lead + (model.obs_dim - 3,))
    ids = np.stack([rng.integers(0, n, size=lead) for n in model.vocab_sizes], axis=-1)
    return np.concatenate([dense, ids.astype(np.float64)], axis=-1)


def random_params(rng: np.random.Generator, model: A.ModelConfig, scale: float = 0.7) -> ParameterSet:
    ps = ParameterSet(A.parameter_specs(model))
    ps.flat[:] = rng.normal(0.0, scale, size=ps.size)
    return ps


def grad_floor(loss_value: float) -> float:
    return GRAD_FLOOR * max(1.0, abs(loss_value))


def central_differences(loss, flat: np.ndarray, index, h: float = FD_STEP) -> np.ndarray:
    out = np.empty(len(index))
    for j, i in enumerate(index):
        old = flat[i]
        flat[i] = old + h
        up = loss()
        flat[i] = old - h
        down = loss()
        flat[i] = old
        out[j] = (up - down) / (2.0 * h)
    return out


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


# ---------------------------------------------------------------------------
# reference critic in extended precision


def _ld(x):
    return np.asarray(x, dtype=np.longdouble)


def _mlp_ld(ps, prefix, n_layers, x):
    for k in range(n_layers):
        x = x @ _ld(ps[f"{prefix}/W{k}"]).T + _ld(ps[f"{prefix}/b{k}"])
        if k < n_layers - 1:
            x = np.maximum(x, 0)
    return x


def _sig_ld(z):
    return 1 / (1 + np.exp(-z))


def reference_q(ps: ParameterSet, model: A.ModelConfig, obs, action, h_prev, c_prev):
    """(V, A, Bias) for a batch written out from the layer definitions in long double."""
    obs = _ld(obs)
    sd, xd, cd = model.s_dim, model.xt_dim, model.content_dim
    s, xt, content = obs[:, :sd], obs[:, sd:sd + xd], obs[:, sd + xd:sd + xd + cd]
    ids = obs[:, sd + xd + cd:].astype(np.int64)
    emb = np.concatenate([_ld(ps[f"enc/emb_{k}"])[ids[:, j]] for j, k in enumerate(("category", "brand", "shop"))],
                         axis=1)
    enc = np.tanh(emb @ _ld(ps["enc/W"]).T + _ld(ps["enc/b"]))
    o_e = np.concatenate([s, xt, content, enc], axis=1)
    H = model.lstm_hidden
    z = np.concatenate([_ld(h_prev), o_e], axis=1) @ _ld(ps["lstm/W"]).T + _ld(ps["lstm/b"])
    f, u, o = _sig_ld(z[:, :H]), _sig_ld(z[:, H:2 * H]), _sig_ld(z[:, 2 * H:3 * H])
    c = f * _ld(c_prev) + u * np.tanh(z[:, 3 * H:])
    h = o * np.tanh(c)
    n = len(model.critic_hidden) + 1
    v = _mlp_ld(ps, "critic/V", n, np.concatenate([o_e, h], axis=1))[:, 0]
    a = _mlp_ld(ps, "critic/A", n, np.concatenate([s, _ld(action)], axis=1))[:, 0]
    b = _mlp_ld(ps, "critic/Bias", 1, np.concatenate([s, xt, _ld(action)], axis=1))[:, 0]
    return v, a, b
