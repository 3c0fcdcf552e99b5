"""Item-level decision process: observation pieces, transitions, episodes,
the ROI reward and the discounted return.

Observation vector layout (``OBS_LAYOUT``), fixed for every consumer:

    [ s (10) | x_t (15) | content embedding (content_dim) | category, brand, shop indices ]

``s`` follows ``NOMINAL_FIELDS`` order, ``x_t`` is source-major
(market, campaign, seller, brand, category) with (pv, ipv, sls) inside each
source.  The three trailing slots carry vocabulary indices stored as floats;
index 0 is reserved for ids never seen when the normalizer was fitted.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, asdict
from typing import Iterable, Sequence

import numpy as np

from .nn import ConfigError

NOMINAL_FIELDS = (
    "days_on_market",
    "pv_today", "ipv_today", "sls_today",
    "pv_cum", "ipv_cum", "sls_cum",
    "crowd_size", "crowd_activeness", "crowd_purchase_power",
)
# fields that get log1p before standardisation
COUNT_FIELDS = NOMINAL_FIELDS[:8]

TREND_SOURCES = ("market", "campaign", "seller", "brand", "category")
TREND_METRICS = ("pv", "ipv", "sls")

S_DIM = len(NOMINAL_FIELDS)
XT_DIM = len(TREND_SOURCES) * len(TREND_METRICS)
N_ID_FIELDS = 3


class DomainError(ValueError):
    pass


class EmptyReturnWarning(UserWarning):
    pass


@dataclass(frozen=True)
class NominalState:
    days_on_market: int = 0
    pv_today: float = 0.0
    ipv_today: float = 0.0
    sls_today: float = 0.0
    pv_cum: float = 0.0
    ipv_cum: float = 0.0
    sls_cum: float = 0.0
    crowd_size: float = 0.0
    crowd_activeness: float = 0.0
    crowd_purchase_power: float = 0.0

    def vector(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in NOMINAL_FIELDS], dtype=np.float64)

    @classmethod
    def from_vector(cls, v) -> "NominalState":
        kw = {f: float(x) for f, x in zip(NOMINAL_FIELDS, v)}
        kw["days_on_market"] = int(round(kw["days_on_market"]))
        return cls(**kw)


@dataclass(frozen=True)
class TrendFactors:
    """Moving-average growth percentages, ``values[source][metric]`` flattened source-major."""
    values: tuple[float, ...] = (0.0,) * XT_DIM

    def __post_init__(self):
        if len(self.values) != XT_DIM:
            raise DomainError(f"trend factors need {XT_DIM} values, got {len(self.values)}")

    def vector(self) -> np.ndarray:
        return np.array(self.values, dtype=np.float64)


@dataclass(frozen=True)
class InherentFeatures:
    content_embedding: tuple[float, ...]
    category_id: int
    brand_id: int
    shop_id: int

    def vector(self) -> np.ndarray:
        return np.array(self.content_embedding, dtype=np.float64)


@dataclass(frozen=True)
class Observation:
    s: NominalState
    x_t: TrendFactors
    x_i: InherentFeatures

    def raw_vector(self) -> np.ndarray:
        """Concatenation [s, x_t, content, ids] before any transform."""
        ids = [self.x_i.category_id, self.x_i.brand_id, self.x_i.shop_id]
        return np.concatenate([self.s.vector(), self.x_t.vector(), self.x_i.vector(), np.array(ids, float)])

    def to_json(self) -> dict:
        return {
            "s": {f: getattr(self.s, f) for f in NOMINAL_FIELDS},
            "x_t": list(self.x_t.values),
            "x_i": {
                "content_embedding": list(self.x_i.content_embedding),
                "category_id": self.x_i.category_id,
                "brand_id": self.x_i.brand_id,
                "shop_id": self.x_i.shop_id,
            },
        }

    @classmethod
    def from_json(cls, d: dict) -> "Observation":
        xi = d["x_i"]
        return cls(
            NominalState(**{f: d["s"][f] for f in NOMINAL_FIELDS}),
            TrendFactors(tuple(float(v) for v in d["x_t"])),
            InherentFeatures(tuple(float(v) for v in xi["content_embedding"]),
                             int(xi["category_id"]), int(xi["brand_id"]), int(xi["shop_id"])),
        )

    @classmethod
    def from_raw(cls, v, content_dim: int) -> "Observation":
        v = np.asarray(v, dtype=np.float64)
        c0 = S_DIM + XT_DIM
        ids = v[c0 + content_dim:c0 + content_dim + 3]
        return cls(
            NominalState.from_vector(v[:S_DIM]),
            TrendFactors(tuple(float(x) for x in v[S_DIM:c0])),
            InherentFeatures(tuple(float(x) for x in v[c0:c0 + content_dim]),
                             int(ids[0]), int(ids[1]), int(ids[2])),
        )


@dataclass(frozen=True)
class Action:
    y_rl: float
    p: float

    def __post_init__(self):
        if not 0.0 < self.y_rl < 1.0:
            raise DomainError(f"y_rl must lie in (0, 1), got {self.y_rl}")
        if not 0.0 < self.p <= 1.0:
            raise DomainError(f"p must lie in (0, 1], got {self.p}")


@dataclass(frozen=True)
class Transition:
    obs: Observation
    action: Action
    reward: float
    next_obs: Observation
    day: int
    terminal: bool = False


class Episode:
    """One item's chronological transitions packed into arrays.

    ``raw_obs`` has ``length + 1`` rows: ``raw_obs[t]`` is o_t and
    ``raw_obs[t + 1]`` is o_{t+1}, so the chaining invariant holds by
    construction once :meth:`from_transitions` has checked it.
    """

    def __init__(self, item_id: int, start_day: int, raw_obs: np.ndarray, actions: np.ndarray,
                 rewards: np.ndarray, terminal: bool = False, truncated: bool = False):
        raw_obs = np.asarray(raw_obs, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.float64)
        rewards = np.asarray(rewards, dtype=np.float64)
        n = rewards.shape[0]
        if n == 0:
            raise DomainError("episode needs at least one transition")
        if raw_obs.shape[0] != n + 1 or actions.shape != (n, 2):
            raise DomainError(f"episode arrays disagree: obs {raw_obs.shape}, actions {actions.shape}, rewards {n}")
        self.item_id = int(item_id)
        self.start_day = int(start_day)
        self.raw_obs = raw_obs
        self.actions = actions
        self.rewards = rewards
        self.terminal = bool(terminal)
        self.truncated = bool(truncated)

    def __len__(self):
        return self.rewards.shape[0]

    @classmethod
    def from_transitions(cls, item_id: int, transitions: Sequence[Transition], truncated=False) -> "Episode":
        check_chaining(transitions)
        obs = [tr.obs.raw_vector() for tr in transitions] + [transitions[-1].next_obs.raw_vector()]
        return cls(item_id, transitions[0].day, np.stack(obs),
                   np.array([[tr.action.y_rl, tr.action.p] for tr in transitions]),
                   np.array([tr.reward for tr in transitions]),
                   terminal=transitions[-1].terminal, truncated=truncated)

    def transitions(self, content_dim: int) -> list[Transition]:
        out = []
        for t in range(len(self)):
            out.append(Transition(
                Observation.from_raw(self.raw_obs[t], content_dim),
                Action(float(self.actions[t, 0]), float(self.actions[t, 1])),
                float(self.rewards[t]),
                Observation.from_raw(self.raw_obs[t + 1], content_dim),
                self.start_day + t,
                terminal=self.terminal and t == len(self) - 1,
            ))
        return out


def check_chaining(transitions: Sequence[Transition]) -> None:
    if not transitions:
        raise DomainError("empty episode")
    for a, b in zip(transitions[:-1], transitions[1:]):
        if b.day != a.day + 1:
            raise DomainError(f"days not consecutive: {a.day} -> {b.day}")
        if a.next_obs != b.obs:
            raise DomainError(f"o_(t+1) of day {a.day} differs from o_t of day {b.day}")
        if a.terminal:
            raise DomainError(f"terminal transition at day {a.day} is not last")


# ---------------------------------------------------------------------------
# formulas


def reward(ipv_next: float, pv_rec_today: float, epsilon: float = 1.0) -> float:
    """Next-step IPV per recommended page view, denominator floored at ``epsilon``."""
    if ipv_next < 0 or pv_rec_today < 0:
        raise DomainError(f"negative counters: ipv_next={ipv_next}, pv_rec={pv_rec_today}")
    if ipv_next == 0:
        return 0.0
    return ipv_next / max(pv_rec_today, epsilon)


def reward_array(ipv_next: np.ndarray, pv_rec_today: np.ndarray, epsilon: float = 1.0) -> np.ndarray:
    ipv_next = np.asarray(ipv_next, dtype=np.float64)
    pv_rec_today = np.asarray(pv_rec_today, dtype=np.float64)
    if (ipv_next < 0).any() or (pv_rec_today < 0).any():
        raise DomainError("negative counters")
    return ipv_next / np.maximum(pv_rec_today, epsilon)


def discounted_return(rewards: Iterable[float], gamma: float) -> float:
    if not 0.0 <= gamma < 1.0:
        raise DomainError(f"gamma must lie in [0, 1), got {gamma}")
    rewards = list(rewards)
    if not rewards:
        warnings.warn("discounted return of an empty reward window", EmptyReturnWarning, stacklevel=2)
        return 0.0
    total, w = 0.0, 1.0
    for r in rewards:
        total += w * r
        w *= gamma
    return total


# ---------------------------------------------------------------------------
# normalisation


class IdVocab:
    """Raw id -> dense index; 0 is the reserved unknown slot."""

    def __init__(self, ids: Iterable[int] = ()):
        self.index = {}
        for i in sorted(set(int(x) for x in ids)):
            self.index[i] = len(self.index) + 1

    def __len__(self):
        return len(self.index) + 1

    def lookup(self, ids) -> np.ndarray:
        return np.array([self.index.get(int(i), 0) for i in np.atleast_1d(ids)], dtype=np.float64)


@dataclass
class Normalizer:
    """log1p on count fields then per-feature standardisation of s and x_t.

    The content embedding passes through untouched; ids go through the
    vocabularies.  Statistics are fitted once and frozen.
    """
    content_dim: int
    mean: np.ndarray = None
    std: np.ndarray = None
    vocabs: tuple = None

    @property
    def fitted(self) -> bool:
        return self.mean is not None

    @property
    def dense_dim(self) -> int:
        return S_DIM + XT_DIM

    @property
    def obs_dim(self) -> int:
        return S_DIM + XT_DIM + self.content_dim + N_ID_FIELDS

    def _pre(self, raw_dense: np.ndarray) -> np.ndarray:
        x = np.array(raw_dense, dtype=np.float64, copy=True)
        n_count = len(COUNT_FIELDS)
        x[..., :n_count] = np.log1p(np.maximum(x[..., :n_count], 0.0))
        return x

    def fit(self, raw_obs: np.ndarray, vocab_sizes: tuple[int, int, int] | None = None) -> "Normalizer":
        """Fit on raw observation rows.  ``vocab_sizes`` fixes vocabularies to
        ids ``0..n-1``; otherwise they are taken from the ids present."""
        raw_obs = np.atleast_2d(np.asarray(raw_obs, dtype=np.float64))
        d = self.dense_dim
        pre = self._pre(raw_obs[:, :d])
        self.mean = pre.mean(axis=0)
        std = pre.std(axis=0)
        self.std = np.where(std > 1e-8, std, 1.0)
        id_cols = raw_obs[:, d + self.content_dim:d + self.content_dim + 3].astype(np.int64)
        if vocab_sizes is not None:
            self.vocabs = tuple(IdVocab(range(n)) for n in vocab_sizes)
        else:
            self.vocabs = tuple(IdVocab(id_cols[:, k]) for k in range(3))
        return self

    def vocab_sizes(self) -> tuple[int, int, int]:
        return tuple(len(v) for v in self.vocabs)

    def transform(self, raw_obs: np.ndarray) -> np.ndarray:
        if not self.fitted:
            raise ConfigError("normalizer used before fitting")
        raw_obs = np.asarray(raw_obs, dtype=np.float64)
        single = raw_obs.ndim == 1
        raw_obs = np.atleast_2d(raw_obs)
        d, c = self.dense_dim, self.content_dim
        out = np.empty_like(raw_obs)
        out[:, :d] = (self._pre(raw_obs[:, :d]) - self.mean) / self.std
        out[:, d:d + c] = raw_obs[:, d:d + c]
        for k in range(3):
            out[:, d + c + k] = self.vocabs[k].lookup(raw_obs[:, d + c + k])
        return out[0] if single else out

    def inverse_dense(self, norm_dense: np.ndarray) -> np.ndarray:
        """Undo the transform on the s/x_t block."""
        x = np.asarray(norm_dense, dtype=np.float64) * self.std + self.mean
        n_count = len(COUNT_FIELDS)
        x = np.array(x, copy=True)
        x[..., :n_count] = np.expm1(x[..., :n_count])
        return x

    def state_dict(self) -> dict:
        return {
            "content_dim": self.content_dim,
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "vocabs": [sorted(v.index) for v in self.vocabs],
        }

    @classmethod
    def from_state_dict(cls, d: dict) -> "Normalizer":
        return cls(d["content_dim"], np.array(d["mean"]), np.array(d["std"]),
                   tuple(IdVocab(ids) for ids in d["vocabs"]))


def assemble_observation(s: NominalState, x_t: TrendFactors, x_i: InherentFeatures,
                         normalizer: Normalizer) -> np.ndarray:
    return normalizer.transform(Observation(s, x_t, x_i).raw_vector())


# ---------------------------------------------------------------------------
# episode log (JSON lines)
#
# One transition per line, keys in this order:
#   schema_version, item_id, day, step, terminal, o_t, a_t, r_t, o_next
# o_* are Observation.to_json() dicts of raw (untransformed) values;
# a_t is {"y_rl", "p"}.

EPISODE_LOG_VERSION = 1


def episode_records(ep: Episode, content_dim: int) -> list[dict]:
    out = []
    for step, tr in enumerate(ep.transitions(content_dim)):
        out.append({
            "schema_version": EPISODE_LOG_VERSION,
            "item_id": ep.item_id,
            "day": tr.day,
            "step": step,
            "terminal": tr.terminal,
            "o_t": tr.obs.to_json(),
            "a_t": {"y_rl": tr.action.y_rl, "p": tr.action.p},
            "r_t": tr.reward,
            "o_next": tr.next_obs.to_json(),
        })
    return out


def write_episode_log(path, episodes: Iterable[Episode], content_dim: int, append: bool = True) -> None:
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        for ep in episodes:
            for rec in episode_records(ep, content_dim):
                fh.write(json.dumps(rec) + "\n")


def read_episode_log(path) -> list[Episode]:
    """Regroup logged transitions into episodes (consecutive steps of one item)."""
    groups: dict[tuple[int, int], list[Transition]] = {}
    order = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("schema_version") != EPISODE_LOG_VERSION:
                raise ConfigError(f"unsupported episode log schema {rec.get('schema_version')}")
            key = (rec["item_id"], rec["day"] - rec["step"])
            if key not in groups:
                groups[key] = []
                order.append(key)
            groups[key].append(Transition(
                Observation.from_json(rec["o_t"]),
                Action(rec["a_t"]["y_rl"], rec["a_t"]["p"]),
                float(rec["r_t"]),
                Observation.from_json(rec["o_next"]),
                int(rec["day"]),
                bool(rec["terminal"]),
            ))
    return [Episode.from_transitions(k[0], groups[k]) for k in order]
