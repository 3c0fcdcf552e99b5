"""Synthetic marketplace with the item metabolism loop.

Ranking scores split the recommendation budget; clicks and sales accrue;
the crowd of interested users grows with clicks and sales and feeds
organic (search) traffic back the next day; trend processes bias click and
organic rates.  Everything hidden from the agent lives in the latent arrays
of :class:`MarketState`.

Randomness is split into counter-style streams keyed by
``(seed, purpose, item_id, day)``, so per-item draws do not depend on the
order items are stored in.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, fields, asdict
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import mdp
from .mdp import Action, Observation, Transition, S_DIM, XT_DIM, TREND_SOURCES
from .nn import ConfigError, softmax

_STREAM_OUTCOME = 1
_STREAM_SPAWN = 2
_STREAM_TREND = 3
_STREAM_WORLD = 4


@dataclass
class SimConfig:
    seed: int = 0
    n_items: int = 200
    n_categories: int = 8
    n_brands: int = 30
    n_shops: int = 40
    content_dim: int = 16
    daily_budget: float = 40000.0
    temperature: float = 0.1
    # latent quality
    high_potential_fraction: float = 0.2
    high_quality_threshold: float = 0.6
    brand_potential_spread: float = 0.1
    content_quality_scale: float = 1.5
    content_noise: float = 0.7
    # funnel
    ctr_max: float = 0.12
    cvr_max: float = 0.08
    price_elasticity: float = 1.5
    social_proof: float = 0.5
    social_half: float = 300.0
    # organic feedback loop
    base_other: float = 20.0
    feedback: float = 0.4
    crowd_decay: float = 0.85
    sales_weight: float = 3.0
    # life stage curve
    rise_mid: float = 4.0
    rise_width: float = 1.5
    life_floor: float = 0.3
    appeal_decay_min: float = 0.01
    appeal_decay_max: float = 0.06
    max_age: int = 60
    initial_age_max: int = 59
    # cohort schedule: retired items are replaced one-for-one, plus optional extra cohorts
    replace_retired: bool = True
    cohort_every: int = 0
    cohort_size: int = 0
    # trends
    trend_walk_sigma: float = 0.03
    trend_reversion: float = 0.9
    trend_season_amp: float = 0.15
    trend_season_period: float = 14.0
    campaign_fraction: float = 0.3
    trend_strength: float = 1.0
    magp_window: int = 3
    # click-model scorer
    ctr_prior_strength: float = 200.0
    ctr_memory: float = 0.9
    reward_epsilon: float = 1.0

    def validate(self) -> "SimConfig":
        if self.n_items <= 0 or self.daily_budget <= 0 or self.temperature <= 0:
            raise ConfigError("n_items, daily_budget and temperature must be positive")
        if not 0 < self.high_potential_fraction < 1:
            raise ConfigError("high_potential_fraction must lie in (0, 1)")
        if not 0 < self.high_quality_threshold < 1:
            raise ConfigError("high_quality_threshold must lie in (0, 1)")
        if self.brand_potential_spread >= min(self.high_potential_fraction, 1 - self.high_potential_fraction):
            raise ConfigError("brand_potential_spread too large for high_potential_fraction")
        if self.feedback < 0 or self.base_other < 0:
            raise ConfigError("feedback and base_other must be non-negative")
        return self


def _rng(seed: int, stream: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, stream, *keys])))


# ---------------------------------------------------------------------------
# state


_LATENT = ("quality", "appeal_decay", "intro_day", "category", "brand", "shop", "base_price", "campaign", "high")
_COUNTERS = ("pv_today", "ipv_today", "sls_today", "pv_cum", "ipv_cum", "sls_cum",
             "crowd_size", "crowd_activeness", "crowd_purchase_power",
             "pv_other_next", "ctr_pv", "ctr_ipv", "pv_rec_cum", "gmv_cum")


@dataclass
class ItemLatent:
    quality: float
    appeal_decay: float
    intro_day: int
    category: int
    brand: int
    shop: int
    base_price: float
    campaign: bool = False
    high_potential: bool = False


@dataclass
class DailyOutcome:
    pv_rec: float
    pv_other: float
    pv_total: float
    ipv: float
    sls: float
    gmv: float
    price_discount: float


@dataclass
class Cohort:
    """Freshly generated items, column-wise."""
    item_ids: np.ndarray
    latent: dict
    content: np.ndarray

    def __len__(self):
        return len(self.item_ids)

    def latents(self) -> list[ItemLatent]:
        out = []
        for k in range(len(self)):
            L = self.latent
            out.append(ItemLatent(float(L["quality"][k]), float(L["appeal_decay"][k]), int(L["intro_day"][k]),
                                  int(L["category"][k]), int(L["brand"][k]), int(L["shop"][k]),
                                  float(L["base_price"][k]), bool(L["campaign"][k]), bool(L["high"][k])))
        return out


class World:
    """Fixed per-seed structure: category centroids, brand potentials, price levels."""

    def __init__(self, cfg: SimConfig):
        rng = _rng(cfg.seed, _STREAM_WORLD)
        self.centroids = rng.normal(0.0, 1.0, size=(cfg.n_categories, cfg.content_dim))
        direction = rng.normal(size=cfg.content_dim)
        self.quality_direction = direction / np.linalg.norm(direction)
        spread = np.linspace(-cfg.brand_potential_spread, cfg.brand_potential_spread, cfg.n_brands)
        self.brand_high_prob = cfg.high_potential_fraction + rng.permutation(spread)
        self.category_price = np.exp(rng.normal(3.5, 0.6, size=cfg.n_categories))
        self.shop_category = rng.integers(0, cfg.n_categories, size=cfg.n_shops)
        self.trend_phase = {
            "market": rng.uniform(0, 2 * np.pi, size=1),
            "campaign": rng.uniform(0, 2 * np.pi, size=1),
            "seller": rng.uniform(0, 2 * np.pi, size=cfg.n_shops),
            "brand": rng.uniform(0, 2 * np.pi, size=cfg.n_brands),
            "category": rng.uniform(0, 2 * np.pi, size=cfg.n_categories),
        }


def trend_group_counts(cfg: SimConfig) -> dict[str, int]:
    return {"market": 1, "campaign": 1, "seller": cfg.n_shops, "brand": cfg.n_brands, "category": cfg.n_categories}


@dataclass
class MarketState:
    cfg: SimConfig
    world: World
    day: int
    next_id: int
    item_ids: np.ndarray
    latent: dict
    content: np.ndarray
    counters: dict
    trend_walk: dict
    trend_history: dict  # source -> array (days, groups, 3) of aggregate pv/ipv/sls
    retired: list = field(default_factory=list)

    def copy(self) -> "MarketState":
        return MarketState(
            self.cfg, self.world, self.day, self.next_id, self.item_ids.copy(),
            {k: v.copy() for k, v in self.latent.items()}, self.content.copy(),
            {k: v.copy() for k, v in self.counters.items()},
            {k: v.copy() for k, v in self.trend_walk.items()},
            {k: v.copy() for k, v in self.trend_history.items()},
            list(self.retired),
        )

    def __len__(self):
        return len(self.item_ids)

    def index_of(self, item_ids) -> np.ndarray:
        pos = {int(i): k for k, i in enumerate(self.item_ids)}
        return np.array([pos[int(i)] for i in item_ids], dtype=np.int64)

    def ages(self) -> np.ndarray:
        return self.day - self.latent["intro_day"]


# ---------------------------------------------------------------------------
# cohort generation


def spawn_cohort(n: int, day: int, cfg: SimConfig, world: World, first_id: int, seed_key: int | None = None) -> Cohort:
    """``n`` new items introduced on ``day``; draws are keyed by item id."""
    if n <= 0:
        raise ConfigError(f"cohort size must be positive, got {n}")
    ids = np.arange(first_id, first_id + n, dtype=np.int64)
    L = {k: np.zeros(n) for k in _LATENT}
    content = np.zeros((n, cfg.content_dim))
    seed = cfg.seed if seed_key is None else seed_key
    for k, item in enumerate(ids):
        rng = _rng(seed, _STREAM_SPAWN, int(item))
        brand = int(rng.integers(cfg.n_brands))
        shop = int(rng.integers(cfg.n_shops))
        category = int(world.shop_category[shop]) if rng.random() < 0.7 else int(rng.integers(cfg.n_categories))
        high = rng.random() < world.brand_high_prob[brand]
        thr = cfg.high_quality_threshold
        q = rng.uniform(thr, 1.0) if high else thr * rng.beta(2.0, 2.5)
        q = float(np.clip(q, 1e-3, 1 - 1e-3))
        L["quality"][k] = q
        L["high"][k] = high
        L["appeal_decay"][k] = rng.uniform(cfg.appeal_decay_min, cfg.appeal_decay_max)
        L["intro_day"][k] = day
        L["category"][k] = category
        L["brand"][k] = brand
        L["shop"][k] = shop
        L["base_price"][k] = world.category_price[category] * math.exp(rng.normal(0.0, 0.3))
        L["campaign"][k] = rng.random() < cfg.campaign_fraction
        content[k] = (world.centroids[category]
                      + cfg.content_quality_scale * (q - 0.35) * world.quality_direction
                      + cfg.content_noise * rng.normal(size=cfg.content_dim))
    for key in ("intro_day", "category", "brand", "shop"):
        L[key] = L[key].astype(np.int64)
    L["campaign"] = L["campaign"].astype(bool)
    L["high"] = L["high"].astype(bool)
    return Cohort(ids, L, content)


def initial_state(cfg: SimConfig) -> MarketState:
    cfg.validate()
    world = World(cfg)
    cohort = spawn_cohort(cfg.n_items, 0, cfg, world, first_id=0)
    rng = _rng(cfg.seed, _STREAM_WORLD, 1)
    # spread ages so the opening market mixes fresh and mature items
    ages = rng.integers(0, cfg.initial_age_max + 1, size=cfg.n_items)
    cohort.latent["intro_day"] = -ages
    counters = {k: np.zeros(cfg.n_items) for k in _COUNTERS}
    counters["pv_other_next"][:] = cfg.base_other
    trend_walk = {s: np.zeros(n) for s, n in trend_group_counts(cfg).items()}
    history = {s: np.zeros((0, n, 3)) for s, n in trend_group_counts(cfg).items()}
    state = MarketState(cfg, world, 0, cfg.n_items, cohort.item_ids, cohort.latent, cohort.content,
                        counters, trend_walk, history)
    _seed_history(state, ages)
    return state


def _seed_history(state: MarketState, ages: np.ndarray) -> None:
    """Give pre-existing items a plausible past: crowd and counters proportional to quality x age."""
    cfg = state.cfg
    q = state.latent["quality"]
    c = state.counters
    rng = _rng(cfg.seed, _STREAM_WORLD, 2)
    daily_pv = cfg.daily_budget / cfg.n_items * (0.5 + q) * rng.lognormal(0.0, 0.3, size=len(q))
    ctr = cfg.ctr_max * q * 0.8
    c["pv_cum"][:] = np.round(daily_pv * ages)
    c["ipv_cum"][:] = np.round(c["pv_cum"] * ctr)
    c["sls_cum"][:] = np.round(c["ipv_cum"] * cfg.cvr_max * (0.3 + 0.7 * q))
    c["pv_today"][:] = np.where(ages > 0, np.round(daily_pv), 0)
    c["ipv_today"][:] = np.round(c["pv_today"] * ctr)
    c["sls_today"][:] = np.round(c["ipv_today"] * cfg.cvr_max * (0.3 + 0.7 * q))
    steady = (c["ipv_today"] + cfg.sales_weight * c["sls_today"]) / (1.0 - cfg.crowd_decay)
    c["crowd_size"][:] = steady * (1.0 - cfg.crowd_decay ** ages)
    c["pv_other_next"][:] = np.floor(cfg.base_other + cfg.feedback * c["crowd_size"])
    c["ctr_pv"][:] = c["pv_today"] / (1.0 - cfg.ctr_memory)
    c["ctr_ipv"][:] = c["ipv_today"] / (1.0 - cfg.ctr_memory)
    c["pv_rec_cum"][:] = c["pv_cum"]


# ---------------------------------------------------------------------------
# latent curves


def life_curve(age, appeal_decay, cfg: SimConfig):
    """Logistic rise into maturity, exponential fade after the rise midpoint."""
    age = np.asarray(age, dtype=np.float64)
    rise = 1.0 / (1.0 + np.exp(-(age - cfg.rise_mid) / cfg.rise_width))
    fade = np.exp(-appeal_decay * np.maximum(age - cfg.rise_mid, 0.0))
    return (cfg.life_floor + (1.0 - cfg.life_floor) * rise) * fade


def _trend_level(state: MarketState, source: str, day: int) -> np.ndarray:
    cfg = state.cfg
    season = cfg.trend_season_amp * np.sin(2 * np.pi * day / cfg.trend_season_period + state.world.trend_phase[source])
    return state.trend_walk[source] + season


def trend_multiplier(state: MarketState, day: int | None = None) -> np.ndarray:
    day = state.day if day is None else day
    L = state.latent
    log_m = (_trend_level(state, "market", day)[0]
             + _trend_level(state, "campaign", day)[0] * L["campaign"]
             + _trend_level(state, "seller", day)[L["shop"]]
             + _trend_level(state, "brand", day)[L["brand"]]
             + _trend_level(state, "category", day)[L["category"]])
    return np.exp(state.cfg.trend_strength * log_m / 2.0)


def true_ctr(state: MarketState) -> np.ndarray:
    cfg = state.cfg
    L = state.latent
    social = 1.0 + cfg.social_proof * state.counters["crowd_size"] / (state.counters["crowd_size"] + cfg.social_half)
    ctr = cfg.ctr_max * L["quality"] * life_curve(state.ages(), L["appeal_decay"], cfg) * trend_multiplier(state) * social
    return np.clip(ctr, 0.0, 0.95)


def true_cvr(state: MarketState, p: np.ndarray) -> np.ndarray:
    cfg = state.cfg
    q = state.latent["quality"]
    cvr = cfg.cvr_max * q * (1.0 + cfg.price_elasticity * (1.0 - np.asarray(p)))
    return np.clip(cvr, 0.0, 0.95)


# ---------------------------------------------------------------------------
# observations and the click-model scorer


def group_index(state: MarketState, source: str) -> np.ndarray:
    L = state.latent
    n = len(state)
    return {
        "market": np.zeros(n, dtype=np.int64),
        "campaign": np.zeros(n, dtype=np.int64),
        "seller": L["shop"],
        "brand": L["brand"],
        "category": L["category"],
    }[source]


def magp(history: np.ndarray, window: int) -> np.ndarray:
    """Moving-average growth percentage over the last ``window`` day-over-day changes.

    ``history`` is (days, groups, metrics); returns (groups, metrics).
    """
    if history.shape[0] < 2:
        return np.zeros(history.shape[1:])
    h = history[-(window + 1):]
    growth = (h[1:] - h[:-1]) / np.maximum(h[:-1], 1.0)
    return 100.0 * growth.mean(axis=0)


def trend_factors(state: MarketState) -> np.ndarray:
    """(n_items, 15) block of MAGP values, source-major."""
    cfg = state.cfg
    out = np.zeros((len(state), XT_DIM))
    for k, source in enumerate(TREND_SOURCES):
        m = magp(state.trend_history[source], cfg.magp_window)
        out[:, 3 * k:3 * k + 3] = m[group_index(state, source)]
    return out


def raw_observations(state: MarketState) -> np.ndarray:
    """Rows [s, x_t, content, category, brand, shop] for every live item, in storage order."""
    c = state.counters
    s = np.column_stack([
        state.ages().astype(np.float64),
        c["pv_today"], c["ipv_today"], c["sls_today"],
        c["pv_cum"], c["ipv_cum"], c["sls_cum"],
        c["crowd_size"], c["crowd_activeness"], c["crowd_purchase_power"],
    ])
    ids = np.column_stack([state.latent["category"], state.latent["brand"], state.latent["shop"]]).astype(np.float64)
    return np.concatenate([s, trend_factors(state), state.content, ids], axis=1)


def observations(state: MarketState) -> dict[int, Observation]:
    raw = raw_observations(state)
    return {int(i): Observation.from_raw(r, state.cfg.content_dim) for i, r in zip(state.item_ids, raw)}


def ctr_prior(state: MarketState) -> float:
    c = state.counters
    pv = c["ctr_pv"].sum()
    return float(c["ctr_ipv"].sum() / pv) if pv > 0 else 0.5 * state.cfg.ctr_max


def ctr_scores(state: MarketState) -> np.ndarray:
    """Simulated production click model: recency-weighted click rate shrunk
    toward the global rate with weight prior_strength / (prior_strength + pv),
    rescaled by ``ctr_max`` into [0, 1]."""
    cfg = state.cfg
    c = state.counters
    k = cfg.ctr_prior_strength
    est = (c["ctr_ipv"] + k * ctr_prior(state)) / (c["ctr_pv"] + k)
    return np.clip(est / cfg.ctr_max, 0.0, 1.0)


# ---------------------------------------------------------------------------
# allocation


def allocate_impressions(scores: Mapping[int, float] | np.ndarray, daily_budget: float,
                         temperature: float = 1.0):
    """Split ``daily_budget`` by a temperature softmax of the scores, rounded to
    whole page views with largest-remainder so the total is preserved."""
    if daily_budget <= 0:
        raise ConfigError("daily budget must be positive")
    as_map = isinstance(scores, Mapping)
    keys = list(scores.keys()) if as_map else None
    vals = np.array(list(scores.values()) if as_map else scores, dtype=np.float64)
    if vals.size == 0:
        raise ConfigError("no items to allocate impressions to")
    if not np.all(np.isfinite(vals)):
        raise ConfigError("non-finite ranking score")
    shares = softmax(vals / temperature)
    exact = shares * daily_budget
    alloc = np.floor(exact)
    short = int(round(daily_budget - alloc.sum()))
    if short > 0:
        order = np.argsort(-(exact - alloc), kind="stable")
        alloc[order[:short]] += 1
    if as_map:
        return {k: float(v) for k, v in zip(keys, alloc)}
    return alloc


# ---------------------------------------------------------------------------
# the day step


@dataclass
class Pool:
    """A slice of traffic: the items it may show and how many page views it has."""
    item_ids: np.ndarray
    budget: float


@dataclass
class DayResult:
    item_ids: np.ndarray          # items live during the day, storage order
    raw_obs: np.ndarray           # o_t rows
    next_raw_obs: np.ndarray      # o_{t+1} rows
    y_ctr: np.ndarray
    y_final: np.ndarray
    pv_rec: np.ndarray
    pv_other: np.ndarray
    ipv: np.ndarray
    sls: np.ndarray
    gmv: np.ndarray
    price: np.ndarray
    true_ctr: np.ndarray
    rewards: np.ndarray
    terminal: np.ndarray
    day: int

    def outcome(self, k: int) -> DailyOutcome:
        return DailyOutcome(float(self.pv_rec[k]), float(self.pv_other[k]), float(self.pv_rec[k] + self.pv_other[k]),
                            float(self.ipv[k]), float(self.sls[k]), float(self.gmv[k]), float(self.price[k]))


def advance(state: MarketState, y_rl: np.ndarray, price: np.ndarray, final_scores: Callable,
            pools: Sequence[Pool] | None = None, y_ctr: np.ndarray | None = None) -> DayResult:
    """Advance ``state`` one day in place.  ``y_rl`` and ``price`` are in storage
    order; ``final_scores(item_ids, y_ctr, y_rl)`` returns ranking scores.
    ``y_ctr`` defaults to the built-in click model."""
    cfg = state.cfg
    n = len(state)
    day = state.day
    c = state.counters
    L = state.latent
    raw_obs = raw_observations(state)
    y_ctr = ctr_scores(state) if y_ctr is None else np.asarray(y_ctr, dtype=np.float64)
    y = np.asarray(final_scores(state.item_ids, y_ctr, y_rl), dtype=np.float64)

    pv_rec = np.zeros(n)
    if pools is None:
        pools = [Pool(state.item_ids, cfg.daily_budget)]
    seen = np.zeros(n, dtype=bool)
    for pool in pools:
        idx = state.index_of(pool.item_ids)
        if seen[idx].any():
            raise ConfigError("an item appears in more than one traffic pool")
        seen[idx] = True
        pv_rec[idx] = allocate_impressions(y[idx], pool.budget, cfg.temperature)

    pv_other = c["pv_other_next"].copy()
    pv_total = pv_rec + pv_other
    ctr = true_ctr(state)
    cvr = true_cvr(state, price)
    ipv = np.zeros(n)
    sls = np.zeros(n)
    for k in range(n):
        rng = _rng(cfg.seed, _STREAM_OUTCOME, int(state.item_ids[k]), day)
        ipv[k] = rng.binomial(int(pv_total[k]), ctr[k])
        sls[k] = rng.binomial(int(ipv[k]), cvr[k])
    gmv = sls * L["base_price"] * price

    # counters for tomorrow
    c["pv_today"][:] = pv_total
    c["ipv_today"][:] = ipv
    c["sls_today"][:] = sls
    c["pv_cum"] += pv_total
    c["ipv_cum"] += ipv
    c["sls_cum"] += sls
    c["pv_rec_cum"] += pv_rec
    c["gmv_cum"] += gmv
    crowd = cfg.crowd_decay * c["crowd_size"] + ipv + cfg.sales_weight * sls
    c["crowd_activeness"][:] = ipv / np.maximum(crowd, 1.0)
    c["crowd_purchase_power"][:] = np.where(sls > 0, gmv / np.maximum(sls, 1.0), c["crowd_purchase_power"])
    c["crowd_size"][:] = crowd
    c["ctr_pv"][:] = cfg.ctr_memory * c["ctr_pv"] + pv_total
    c["ctr_ipv"][:] = cfg.ctr_memory * c["ctr_ipv"] + ipv

    _update_trends(state, pv_total, ipv, sls)
    state.day = day + 1
    c["pv_other_next"][:] = np.floor(cfg.base_other + cfg.feedback * crowd * trend_multiplier(state))

    next_raw = raw_observations(state)
    rewards = mdp.reward_array(ipv, pv_rec, cfg.reward_epsilon)
    terminal = state.ages() >= cfg.max_age
    result = DayResult(state.item_ids.copy(), raw_obs, next_raw, y_ctr, y, pv_rec, pv_other, ipv, sls, gmv,
                       np.asarray(price, dtype=np.float64).copy(), ctr, rewards, terminal, day)
    _retire_and_spawn(state, terminal)
    return result


def _update_trends(state: MarketState, pv, ipv, sls) -> None:
    cfg = state.cfg
    metrics = np.column_stack([pv, ipv, sls])
    counts = trend_group_counts(cfg)
    for source in TREND_SOURCES:
        g = group_index(state, source)
        agg = np.zeros((counts[source], 3))
        if source == "campaign":
            np.add.at(agg, g[state.latent["campaign"]], metrics[state.latent["campaign"]])
        else:
            np.add.at(agg, g, metrics)
        state.trend_history[source] = np.concatenate([state.trend_history[source], agg[None]], axis=0)[-(cfg.magp_window + 1):]
    rng = _rng(cfg.seed, _STREAM_TREND, state.day)
    for source in TREND_SOURCES:
        w = state.trend_walk[source]
        state.trend_walk[source] = cfg.trend_reversion * w + cfg.trend_walk_sigma * rng.normal(size=w.shape)


def _retire_and_spawn(state: MarketState, terminal: np.ndarray) -> None:
    cfg = state.cfg
    n_new = 0
    if terminal.any():
        state.retired.extend(int(i) for i in state.item_ids[terminal])
        keep = ~terminal
        state.item_ids = state.item_ids[keep]
        state.latent = {k: v[keep] for k, v in state.latent.items()}
        state.content = state.content[keep]
        state.counters = {k: v[keep] for k, v in state.counters.items()}
        if cfg.replace_retired:
            n_new += int(terminal.sum())
    if cfg.cohort_every and cfg.cohort_size and state.day % cfg.cohort_every == 0:
        n_new += cfg.cohort_size
    if n_new:
        add_items(state, spawn_cohort(n_new, state.day, cfg, state.world, state.next_id))


def add_items(state: MarketState, cohort: Cohort) -> None:
    cfg = state.cfg
    n = len(cohort)
    state.next_id = max(state.next_id, int(cohort.item_ids.max()) + 1)
    state.item_ids = np.concatenate([state.item_ids, cohort.item_ids])
    state.latent = {k: np.concatenate([state.latent[k], cohort.latent[k]]) for k in state.latent}
    state.content = np.concatenate([state.content, cohort.content])
    fresh = {k: np.zeros(n) for k in _COUNTERS}
    fresh["pv_other_next"][:] = cfg.base_other
    state.counters = {k: np.concatenate([state.counters[k], fresh[k]]) for k in state.counters}


# ---------------------------------------------------------------------------
# mapping-based interface


def step_day(state: MarketState, actions: Mapping[int, Action], ctr_scores_in: Mapping[int, float] | None,
             mixer, pools: Sequence[Pool] | None = None):
    """Pure one-day step: returns (new state, outcomes, transitions), all keyed by item id.

    ``ctr_scores_in`` must cover every live item (None falls back to the
    built-in click model).  ``mixer`` exposes ``final_scores(item_ids, y_ctr, y_rl)``.
    """
    new = state.copy()
    missing = [int(i) for i in new.item_ids if int(i) not in actions]
    if missing:
        raise ConfigError(f"no action for items {missing[:5]}")
    if ctr_scores_in is not None:
        lacking = [int(i) for i in new.item_ids if int(i) not in ctr_scores_in]
        if lacking:
            raise ConfigError(f"no ctr score for items {lacking[:5]}")
    y_rl = np.array([actions[int(i)].y_rl for i in new.item_ids])
    price = np.array([actions[int(i)].p for i in new.item_ids])
    y_ctr = None if ctr_scores_in is None else np.array([ctr_scores_in[int(i)] for i in new.item_ids])
    res = advance(new, y_rl, price, mixer.final_scores, pools, y_ctr)
    cd = state.cfg.content_dim
    outcomes, transitions = {}, {}
    for k, item in enumerate(res.item_ids):
        item = int(item)
        outcomes[item] = res.outcome(k)
        transitions[item] = Transition(
            Observation.from_raw(res.raw_obs[k], cd), actions[item], float(res.rewards[k]),
            Observation.from_raw(res.next_raw_obs[k], cd), res.day, bool(res.terminal[k]))
    return new, outcomes, transitions


def ctr_score_map(state: MarketState) -> dict[int, float]:
    return {int(i): float(s) for i, s in zip(state.item_ids, ctr_scores(state))}
