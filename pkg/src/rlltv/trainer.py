"""Itemwise episodic recurrent DPG: generation stage plus episodic updates.

A session first lets the current (exploring) policy act on the market for
``episode_len`` days, cutting one episode per item, then runs ``epochs``
passes that each sample a batch of episodes and step through them in
lockstep from their first day, carrying the LSTM state forward.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field, asdict, replace
from typing import Callable, Iterable, Optional

import numpy as np

from . import actor as A
from . import critic as C
from . import market as M
from .dualrank import DualRankMixer, MixerConfig, alpha
from .mdp import Episode, Normalizer
from .nn import (AdamState, ConfigError, LstmState, NumericError, ParameterSet, Tape, adam_update,
                 clip_by_global_norm, soft_update, save_tensors, load_tensors, adam_tensors, adam_from_tensors)

log = logging.getLogger(__name__)


@dataclass
class TrainerConfig:
    gamma: float = 0.5
    tau: float = 0.001
    lr: float = 1e-4
    alpha_min: float = 0.0
    alpha_max: float = 0.2
    batch_size: int = 50
    epochs: int = 4
    episode_len: int = 7
    buffer_capacity: int = 200
    clip_norm: float = 5.0
    noise_start: float = 0.2
    noise_end: float = 0.02
    noise_sessions: int = 10
    q_low_pct: float = 1.0
    q_high_pct: float = 99.0
    burn_in_days: int = 7
    freeze_price: bool = False
    price_value: float = 1.0
    no_x_i: bool = False
    no_x_t: bool = False
    no_recurrent: bool = False
    seed: int = 0

    def validate(self) -> "TrainerConfig":
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("tau must lie in [0, 1]")
        if self.lr < 0 or self.batch_size <= 0 or self.epochs < 0 or self.episode_len <= 0:
            raise ConfigError("lr, batch_size, epochs and episode_len must be sensible")
        if self.buffer_capacity <= 0:
            raise ConfigError("buffer capacity must be positive")
        if not 0.0 <= self.alpha_min <= self.alpha_max < 1.0:
            raise ConfigError("need 0 <= alpha_min <= alpha_max < 1")
        if not 0.0 < self.price_value <= 1.0:
            raise ConfigError("price_value must lie in (0, 1]")
        return self

    def ablation(self) -> str | None:
        flags = [k for k, v in (("x_i", self.no_x_i), ("x_t", self.no_x_t), ("recurrent", self.no_recurrent)) if v]
        return ",".join(flags) or None


class PriceTrace:
    """Externally controlled price discount: a constant, optionally overridden per (item, day)."""

    def __init__(self, default: float = 1.0, table: dict | None = None):
        self.default = default
        self.table = table or {}

    @classmethod
    def from_csv(cls, path, default: float = 1.0) -> "PriceTrace":
        import csv
        table = {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                table[(int(row["item_id"]), int(row["day"]))] = float(row["p"])
        return cls(default, table)

    def __call__(self, item_ids, day: int) -> np.ndarray:
        return np.array([self.table.get((int(i), day), self.default) for i in item_ids])


# ---------------------------------------------------------------------------
# replay buffer


class ReplayBuffer:
    """FIFO ring of whole episodes."""

    def __init__(self, capacity: int = 200):
        if capacity <= 0:
            raise ConfigError("buffer capacity must be positive")
        self.capacity = capacity
        self.episodes: list[Episode] = []
        self.inserted = 0

    def __len__(self):
        return len(self.episodes)

    def add(self, ep: Episode, normalizer: Normalizer | None = None) -> None:
        if ep.raw_obs.shape[0] != len(ep) + 1:
            raise ConfigError("episode is not chained")
        if normalizer is not None:
            ep.norm_obs = normalizer.transform(ep.raw_obs)
        self.episodes.append(ep)
        self.inserted += 1
        if len(self.episodes) > self.capacity:
            self.episodes.pop(0)

    def extend(self, eps: Iterable[Episode], normalizer: Normalizer | None = None) -> None:
        for ep in eps:
            self.add(ep, normalizer)

    def sample(self, n: int, rng: np.random.Generator) -> list[Episode]:
        """``n`` episodes of one common length; the length bucket is drawn in
        proportion to how many episodes it holds."""
        if not self.episodes:
            raise ConfigError("cannot sample from an empty buffer")
        lengths = np.array([len(e) for e in self.episodes])
        uniq, counts = np.unique(lengths, return_counts=True)
        L = uniq[rng.choice(len(uniq), p=counts / counts.sum())]
        pool = np.flatnonzero(lengths == L)
        if len(self.episodes) < n:
            warnings.warn(f"buffer holds {len(self.episodes)} episodes, fewer than the batch of {n}",
                          RuntimeWarning, stacklevel=2)
        pick = rng.choice(pool, size=min(n, len(pool)), replace=False)
        return [self.episodes[k] for k in np.sort(pick)]


# ---------------------------------------------------------------------------
# agent


class Agent:
    def __init__(self, model: A.ModelConfig, tcfg: TrainerConfig, normalizer: Normalizer | None = None,
                 params: ParameterSet | None = None):
        self.model = model.check()
        self.cfg = tcfg.validate()
        rng = np.random.default_rng([tcfg.seed, 17])
        self.params = params if params is not None else A.init_parameters(model, rng)
        self.targets = self.params.copy()
        self.critic_span = self.params.span(A.CRITIC_PREFIXES)
        self.actor_span = self.params.span(A.ACTOR_PREFIXES)
        n_c = self.critic_span.stop - self.critic_span.start
        n_a = self.actor_span.stop - self.actor_span.start
        self.opt_critic = AdamState(n_c, lr=tcfg.lr)
        self.opt_actor = AdamState(n_a, lr=tcfg.lr)
        self.normalizer = normalizer
        self.mixer_cfg = MixerConfig(tcfg.alpha_min, tcfg.alpha_max, 0.0, 1.0)
        self.price_trace = PriceTrace(tcfg.price_value)

    # -- inference ---------------------------------------------------------

    def infer(self, obs_norm: np.ndarray, prev: LstmState, params: ParameterSet | None = None):
        """Policy action, Q at that action and the next LSTM state for a batch."""
        tape = Tape(params or self.params, trainable=())
        tr = A.trunk(tape, obs_norm, prev, self.model)
        out = A.actor_head(tape, tr, self.model)
        a = tape.concat([out.y_rl, out.p])
        q = C.q_parts(tape, tr, a, self.model).q
        return out.y_rl.value[:, 0], out.p.value[:, 0], q.value[:, 0], LstmState(tr.c.value, tr.h.value)

    def q_of(self, obs_norm, actions, prev: LstmState, params: ParameterSet | None = None):
        return C.q_value(params or self.params, obs_norm, actions, prev, self.model)

    def alphas(self, q: np.ndarray) -> np.ndarray:
        return np.atleast_1d(alpha(q, self.mixer_cfg))

    def set_q_bounds(self, q_values: np.ndarray) -> None:
        lo, hi = np.percentile(q_values, [self.cfg.q_low_pct, self.cfg.q_high_pct])
        if not hi > lo:
            hi = lo + 1e-6
        self.mixer_cfg = replace(self.mixer_cfg, q_min=float(lo), q_max=float(hi))

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        tensors = {f"params/{n}": self.params[n] for n in self.params.names()}
        tensors.update({f"targets/{n}": self.targets[n] for n in self.targets.names()})
        tensors.update(adam_tensors("adam/critic", self.opt_critic))
        tensors.update(adam_tensors("adam/actor", self.opt_actor))
        tensors["mixer/q_bounds"] = np.array([self.mixer_cfg.q_min, self.mixer_cfg.q_max])
        save_tensors(path, tensors)
        meta = {"model": asdict(self.model), "trainer": asdict(self.cfg),
                "normalizer": self.normalizer.state_dict() if self.normalizer else None}
        with open(str(path) + ".json", "w") as fh:
            json.dump(meta, fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "Agent":
        with open(str(path) + ".json") as fh:
            meta = json.load(fh)
        mdl = meta["model"]
        for k in ("vocab_sizes", "deep_widths", "critic_hidden"):
            mdl[k] = tuple(mdl[k])
        model = A.ModelConfig(**mdl)
        norm = Normalizer.from_state_dict(meta["normalizer"]) if meta["normalizer"] else None
        agent = cls(model, TrainerConfig(**meta["trainer"]), norm)
        t = load_tensors(path)
        for n in agent.params.names():
            agent.params[n][...] = t[f"params/{n}"]
            agent.targets[n][...] = t[f"targets/{n}"]
        agent.opt_critic = adam_from_tensors("adam/critic", t)
        agent.opt_actor = adam_from_tensors("adam/actor", t)
        lo, hi = t["mixer/q_bounds"]
        agent.mixer_cfg = replace(agent.mixer_cfg, q_min=float(lo), q_max=float(hi))
        return agent


def model_for(sim: M.SimConfig, tcfg: TrainerConfig, **overrides) -> A.ModelConfig:
    return A.ModelConfig(content_dim=sim.content_dim,
                         vocab_sizes=(sim.n_categories + 1, sim.n_brands + 1, sim.n_shops + 1),
                         no_x_i=tcfg.no_x_i, no_x_t=tcfg.no_x_t, no_recurrent=tcfg.no_recurrent, **overrides)


def fit_normalizer(raw_obs: np.ndarray, sim: M.SimConfig) -> Normalizer:
    return Normalizer(sim.content_dim).fit(raw_obs, (sim.n_categories, sim.n_brands, sim.n_shops))


# ---------------------------------------------------------------------------
# generation stage


@dataclass
class DayLog:
    """What happened to every live item on one day, plus the agent's view of it."""
    result: M.DayResult
    y_rl: np.ndarray
    p: np.ndarray
    q: np.ndarray
    alpha: np.ndarray


class Rollout:
    """Drives the market with an agent, keeping one LSTM state per item.

    ``mode`` picks how the final score is formed: ``"dual"`` (critic-driven
    alpha), ``"ctr"`` (alpha 0), or ``"fixed"`` (``fixed_alpha`` for all).
    """

    def __init__(self, agent: Agent, state: M.MarketState, noise: float = 0.0,
                 rng: np.random.Generator | None = None, mode: str = "dual", fixed_alpha: float = 0.0):
        self.agent = agent
        self.state = state
        self.noise = noise
        self.rng = rng or np.random.default_rng(0)
        self.mode = mode
        self.fixed_alpha = fixed_alpha
        self.hidden: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def reset_hidden(self) -> None:
        self.hidden = {}

    def _prev(self, ids) -> LstmState:
        H = self.agent.model.lstm_hidden
        zero = np.zeros(H)
        h = np.array([self.hidden.get(int(i), (zero, zero))[0] for i in ids]).reshape(len(ids), H)
        c = np.array([self.hidden.get(int(i), (zero, zero))[1] for i in ids]).reshape(len(ids), H)
        return LstmState(c, h)

    def step(self, pools=None, alpha_override: Callable | None = None,
             price_override: Callable | None = None) -> DayLog:
        st = self.state
        ids = st.item_ids.copy()
        raw = M.raw_observations(st)
        norm = self.agent.normalizer.transform(raw)
        y, p, q, nxt = self.agent.infer(norm, self._prev(ids))
        y, p = A.explore(y, p, self.noise, self.rng)
        if self.agent.cfg.freeze_price:
            p = self.agent.price_trace(ids, st.day)
        if self.mode == "dual":
            a = self.agent.alphas(q)
        elif self.mode == "ctr":
            a = np.zeros(len(ids))
        elif self.mode == "fixed":
            a = np.full(len(ids), self.fixed_alpha)
        else:
            raise ConfigError(f"unknown rollout mode {self.mode!r}")
        if alpha_override is not None:
            a = alpha_override(ids, a)
        if price_override is not None:
            p = price_override(ids, p)
        mixer = DualRankMixer({int(i): float(x) for i, x in zip(ids, a)})
        res = M.advance(st, y, p, mixer.final_scores, pools)
        for k, i in enumerate(ids):
            self.hidden[int(i)] = (nxt.h[k], nxt.c[k])
        for i in res.item_ids[res.terminal]:
            self.hidden.pop(int(i), None)
        return DayLog(res, y, p, q, a)


def episodes_from_days(days: list[DayLog], max_items: int | None = None) -> list[Episode]:
    """Cut one episode per item from consecutive day logs."""
    rows: dict[int, list] = {}
    order = []
    for d in days:
        r = d.result
        for k, item in enumerate(r.item_ids):
            item = int(item)
            if item not in rows:
                rows[item] = []
                order.append(item)
            rows[item].append((r.day, r.raw_obs[k], r.next_raw_obs[k], d.y_rl[k], d.p[k], r.rewards[k], r.terminal[k]))
    if max_items is not None:
        order = sorted(order)[:max_items]
    out = []
    for item in order:
        seq = rows[item]
        for a, b in zip(seq[:-1], seq[1:]):
            if b[0] != a[0] + 1 or not np.array_equal(a[2], b[1]):
                raise ConfigError(f"item {item}: broken chain between days {a[0]} and {b[0]}")
        raw = np.stack([s[1] for s in seq] + [seq[-1][2]])
        ep = Episode(item, seq[0][0], raw, np.array([[s[3], s[4]] for s in seq]),
                     np.array([s[5] for s in seq]), terminal=bool(seq[-1][6]),
                     truncated=len(seq) < len(days))
        out.append(ep)
    return out


def generate_transitions(rollout: Rollout, n_items: int | None = None, days: int = 7) -> tuple[list[Episode], list[DayLog]]:
    """Act for ``days`` days from zero LSTM states; returns per-item episodes and the day logs."""
    rollout.reset_hidden()
    logs = [rollout.step() for _ in range(days)]
    return episodes_from_days(logs, n_items), logs


# ---------------------------------------------------------------------------
# update stage


@dataclass
class EpochStats:
    critic_loss: float
    actor_objective: float
    steps: int
    hidden_lineage: str = ""


def _batch_arrays(episodes: list[Episode], normalizer: Normalizer):
    obs = np.stack([getattr(e, "norm_obs", None) if getattr(e, "norm_obs", None) is not None
                    else normalizer.transform(e.raw_obs) for e in episodes], axis=1)          # (L+1, B, d)
    actions = np.stack([e.actions for e in episodes], axis=1)        # (L, B, 2)
    rewards = np.stack([e.rewards for e in episodes], axis=1)        # (L, B)
    L = actions.shape[0]
    terminal = np.zeros((L, len(episodes)))
    terminal[-1] = [e.terminal for e in episodes]
    return obs, actions, rewards, terminal


def update_epoch(buffer: ReplayBuffer, agent: Agent, rng: np.random.Generator, trace_hidden: bool = False) -> EpochStats:
    cfg = agent.cfg
    model = agent.model
    eps = buffer.sample(cfg.batch_size, rng)
    obs, actions, rewards, terminal = _batch_arrays(eps, agent.normalizer)
    L, B = actions.shape[:2]
    P, T = agent.params, agent.targets
    H = model.lstm_hidden
    prev = LstmState.zeros(B, H)
    # target chain is one step ahead: it needs h'_{t+1} for o_{t+1}
    tr0 = A.trunk(Tape(T, trainable=()), obs[0], LstmState.zeros(B, H), model)
    tgt_prev = LstmState(tr0.c.value, tr0.h.value)
    losses, objectives = [], []
    lineage = []
    for t in range(L):
        # TD target from the target networks
        tape_t = Tape(T, trainable=())
        tr_next = A.trunk(tape_t, obs[t + 1], tgt_prev, model)
        out_next = A.actor_head(tape_t, tr_next, model)
        p_next = out_next.p if not cfg.freeze_price else tape_t.const(actions[min(t + 1, L - 1), :, 1:2])
        q_next = C.q_parts(tape_t, tr_next, tape_t.concat([out_next.y_rl, p_next]), model).q.value[:, 0]
        tgt_prev = LstmState(tr_next.c.value, tr_next.h.value)
        y = C.td_target(rewards[t], q_next, cfg.gamma, terminal[t])

        # critic step
        tape = Tape(P, trainable=A.CRITIC_PREFIXES)
        tr = A.trunk(tape, obs[t], prev, model)
        parts = C.q_parts(tape, tr, tape.const(actions[t]), model)
        q = parts.q.value[:, 0]
        err = q - y
        losses.append(float(np.mean(err * err)))
        if not np.isfinite(losses[-1]):
            raise NumericError(f"critic loss is {losses[-1]} at step {t}")
        grads = tape.backward(parts.q, (2.0 * err / B)[:, None])
        g = grads[agent.critic_span]
        clip_by_global_norm(g, cfg.clip_norm)
        adam_update(P.flat[agent.critic_span], g, agent.opt_critic)

        # actor step through the freshly updated critic; trunk values are constants
        atape = Tape(P, trainable=A.ACTOR_PREFIXES)
        tr_d = A.detached(atape, tr)
        out = A.actor_head(atape, tr_d, model)
        p_used = out.p if not cfg.freeze_price else atape.const(actions[t, :, 1:2])
        adv, bias = C.advantage_terms(atape, tr_d, atape.concat([out.y_rl, p_used]), model)
        obj = adv if bias is None else atape.add(adv, bias)
        objectives.append(float(obj.value.mean()))
        grads = atape.backward(obj, np.full((B, 1), -1.0 / B))
        g = grads[agent.actor_span]
        clip_by_global_norm(g, cfg.clip_norm)
        adam_update(P.flat[agent.actor_span], g, agent.opt_actor)

        soft_update(T.flat, P.flat, cfg.tau)
        if trace_hidden:
            lineage.append(_digest(prev.h))
        prev = LstmState(tr.c.value, tr.h.value)
    return EpochStats(float(np.mean(losses)), float(np.mean(objectives)), L,
                      ",".join(lineage) if trace_hidden else "")


def _digest(a: np.ndarray) -> str:
    import hashlib
    return hashlib.sha1(np.ascontiguousarray(a).tobytes()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# sessions


@dataclass
class SessionRecord:
    session: int
    day: int
    critic_loss: float
    actor_obj: float
    q_p01: float
    q_p99: float
    mean_reward: float
    noise: float
    episodes: int
    eval_snapshot: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)


class Trainer:
    """Owns the agent, the buffer and the market; ``run`` repeats sessions."""

    def __init__(self, sim_cfg: M.SimConfig, tcfg: TrainerConfig, model_overrides: dict | None = None,
                 state: M.MarketState | None = None):
        self.sim_cfg = sim_cfg.validate()
        self.cfg = tcfg.validate()
        self.state = state if state is not None else M.initial_state(sim_cfg)
        self.rng = np.random.default_rng([tcfg.seed, 29])
        self.buffer = ReplayBuffer(tcfg.buffer_capacity)
        self.agent = Agent(model_for(sim_cfg, tcfg, **(model_overrides or {})), tcfg)
        self.session = 0
        self.history: list[SessionRecord] = []
        self.logs: list[DayLog] = []
        self._burn_in()

    def _burn_in(self) -> None:
        """Run the market under pure click ranking, fit the normalizer on what it
        saw, and seed the mixer's Q bounds from the untrained critic."""
        raws = []
        n = self.cfg.burn_in_days
        for _ in range(max(n, 1)):
            raws.append(M.raw_observations(self.state))
            if n == 0:
                break
            k = len(self.state)
            y, p = np.full(k, 0.5), np.full(k, self.cfg.price_value)
            res = M.advance(self.state, y, p, lambda ids, yc, yr: yc)
            self.logs.append(DayLog(res, y, p, np.zeros(k), np.zeros(k)))
        self.agent.normalizer = fit_normalizer(np.concatenate(raws), self.sim_cfg)
        norm = self.agent.normalizer.transform(M.raw_observations(self.state))
        _, _, q, _ = self.agent.infer(norm, LstmState.zeros(len(norm), self.agent.model.lstm_hidden))
        self.agent.set_q_bounds(q)

    def noise_level(self) -> float:
        c = self.cfg
        frac = min(self.session / max(c.noise_sessions - 1, 1), 1.0)
        return c.noise_start + (c.noise_end - c.noise_start) * frac

    def run_session(self) -> SessionRecord:
        noise = self.noise_level()
        rollout = Rollout(self.agent, self.state, noise, np.random.default_rng([self.cfg.seed, 31, self.session]))
        episodes, logs = generate_transitions(rollout, None, self.cfg.episode_len)
        self.buffer.extend(episodes, self.agent.normalizer)
        self.logs.extend(logs)
        q_all = np.concatenate([d.q for d in logs])
        self.agent.set_q_bounds(q_all)
        stats = [update_epoch(self.buffer, self.agent, self.rng) for _ in range(self.cfg.epochs)]
        rec = SessionRecord(
            session=self.session, day=self.state.day,
            critic_loss=float(np.mean([s.critic_loss for s in stats])) if stats else float("nan"),
            actor_obj=float(np.mean([s.actor_objective for s in stats])) if stats else float("nan"),
            q_p01=self.agent.mixer_cfg.q_min, q_p99=self.agent.mixer_cfg.q_max,
            mean_reward=float(np.mean([e.rewards.mean() for e in episodes])),
            noise=noise, episodes=len(episodes))
        self.history.append(rec)
        self.session += 1
        log.info("session %d day %d critic_loss %.4f actor_obj %.4f", rec.session, rec.day,
                 rec.critic_loss, rec.actor_obj)
        return rec

    def run(self, n_sessions: int, on_session: Callable[[SessionRecord], None] | None = None) -> list[SessionRecord]:
        out = []
        for _ in range(n_sessions):
            rec = self.run_session()
            if on_session:
                on_session(rec)
            out.append(rec)
        return out
