"""Offline evaluation: regression and ranking metrics, baselines, alpha sweep.

Everything here reads a :class:`Trace`, a day-by-day record of what the
market did, and scores its item-days after the fact.  The realized return
of an item-day uses only rewards from that day onward, so nothing a scorer
sees can leak the label.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import actor as A
from . import critic as C
from .mdp import Normalizer
from .nn import (AdamState, ConfigError, LstmState, NumericError, ParameterSet, Tape, adam_update,
                 clip_by_global_norm, init_uniform)

TRACE_VERSION = 1


class MetricWarning(UserWarning):
    """A metric fell back to its documented default (e.g. all-zero relevance)."""


# ---------------------------------------------------------------------------
# metrics


def regression_metrics(pred, actual) -> tuple[float, float]:
    """(RMSE, MAE) between predictions and realized returns."""
    pred = np.asarray(pred, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if pred.shape != actual.shape or pred.size == 0:
        raise ConfigError("need matching, non-empty prediction and label arrays")
    err = pred - actual
    return float(np.sqrt(np.mean(err * err))), float(np.mean(np.abs(err)))


def _order(scores, ids):
    """Descending by score, ties by ascending id."""
    scores = np.asarray(scores, dtype=np.float64)
    ids = np.arange(len(scores)) if ids is None else np.asarray(ids)
    return np.lexsort((ids, -scores))


def dcg(relevances_in_rank_order, k: int) -> float:
    rel = np.asarray(relevances_in_rank_order, dtype=np.float64)[:k]
    return float(np.sum(rel / np.log2(np.arange(2, rel.size + 2))))


def ndcg_at_k(scores, relevances, k: int, ids=None, return_flag: bool = False):
    """NDCG@k with gain = relevance and discount 1/log2(rank + 1).

    Tied scores are ordered by item id.  A list whose relevances are all zero
    scores 1.0; with ``return_flag`` the result is ``(value, degenerate)``.
    """
    rel = np.asarray(relevances, dtype=np.float64)
    if not 1 <= k <= rel.size:
        raise ConfigError(f"k={k} outside 1..{rel.size}")
    if np.any(rel < 0):
        raise ConfigError("relevances must be non-negative")
    ideal = dcg(np.sort(rel)[::-1], k)
    if ideal == 0.0:
        return (1.0, True) if return_flag else 1.0
    value = dcg(rel[_order(scores, ids)], k) / ideal
    return (value, False) if return_flag else value


def auc(scores, labels, weights=None, return_flag: bool = False):
    """Area under the ROC curve via the Mann-Whitney statistic, ties counted half.

    ``labels`` are 0/1.  ``weights`` (optional) count how many identical
    examples each entry stands for, which lets item-level impression counts
    stand in for individual impressions.  Returns NaN, with a warning, when
    only one class is present.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    w = np.ones_like(s) if weights is None else np.asarray(weights, dtype=np.float64)
    pos_w = np.where(y, w, 0.0)
    neg_w = np.where(y, 0.0, w)
    n_pos, n_neg = pos_w.sum(), neg_w.sum()
    if n_pos == 0 or n_neg == 0:
        warnings.warn("AUC undefined for single-class labels", MetricWarning, stacklevel=2)
        return (math.nan, True) if return_flag else math.nan
    uniq, inv = np.unique(s, return_inverse=True)
    p = np.bincount(inv, pos_w, len(uniq))
    n = np.bincount(inv, neg_w, len(uniq))
    neg_below = np.concatenate([[0.0], np.cumsum(n)[:-1]])
    u = np.sum(p * (neg_below + 0.5 * n))
    value = float(u / (n_pos * n_neg))
    return (value, False) if return_flag else value


def impression_auc(scores, clicks, impressions) -> float:
    """AUC where each item-day contributes ``clicks`` positives and
    ``impressions - clicks`` negatives at its score."""
    clicks = np.asarray(clicks, dtype=np.float64)
    impressions = np.asarray(impressions, dtype=np.float64)
    s = np.asarray(scores, dtype=np.float64)
    return auc(np.concatenate([s, s]), np.concatenate([np.ones_like(s), np.zeros_like(s)]),
               np.concatenate([clicks, impressions - clicks]))


def spearman(a, b) -> float:
    from scipy.stats import spearmanr
    return float(spearmanr(a, b).statistic)


# ---------------------------------------------------------------------------
# traces


@dataclass
class TraceDay:
    day: int
    item_ids: np.ndarray
    raw_obs: np.ndarray
    y_ctr: np.ndarray
    y_rl: np.ndarray
    price: np.ndarray
    q: np.ndarray
    pv_rec: np.ndarray
    pv_other: np.ndarray
    ipv: np.ndarray
    sls: np.ndarray
    gmv: np.ndarray
    rewards: np.ndarray
    terminal: np.ndarray

    FIELDS = ("item_ids", "raw_obs", "y_ctr", "y_rl", "price", "q", "pv_rec", "pv_other", "ipv", "sls", "gmv",
              "rewards", "terminal")


class Trace:
    """Ordered days of market activity with the deployed agent's outputs."""

    def __init__(self, days: Sequence[TraceDay] = (), content_dim: int = 16):
        self.days = list(days)
        self.content_dim = content_dim

    def __len__(self):
        return len(self.days)

    @classmethod
    def from_logs(cls, logs, content_dim: int) -> "Trace":
        """Build from trainer day logs (objects with ``result``, ``y_rl``, ``q``)."""
        out = []
        for d in logs:
            r = d.result
            out.append(TraceDay(r.day, r.item_ids.copy(), r.raw_obs, r.y_ctr, np.asarray(d.y_rl), r.price,
                                np.asarray(d.q), r.pv_rec, r.pv_other, r.ipv, r.sls, r.gmv, r.rewards, r.terminal))
        return cls(out, content_dim)

    def save(self, path) -> None:
        arrays = {"version": np.array(TRACE_VERSION), "content_dim": np.array(self.content_dim),
                  "days": np.array([d.day for d in self.days])}
        for k, d in enumerate(self.days):
            for f in TraceDay.FIELDS:
                arrays[f"{k}/{f}"] = getattr(d, f)
        with open(path, "wb") as fh:
            np.savez_compressed(fh, **arrays)

    @classmethod
    def load(cls, path) -> "Trace":
        with np.load(path) as z:
            if int(z["version"]) != TRACE_VERSION:
                raise ConfigError(f"unsupported trace version {int(z['version'])}")
            days = [TraceDay(int(day), *(z[f"{k}/{f}"] for f in TraceDay.FIELDS)) for k, day in enumerate(z["days"])]
            return cls(days, int(z["content_dim"]))

    def returns(self, gamma: float, window: int) -> list[np.ndarray]:
        """Per day, the discounted return over ``window`` days starting that day
        (NaN where the trace ends before the window closes)."""
        series: dict[int, dict[int, tuple[float, bool]]] = {}
        for d in self.days:
            for i, r, t in zip(d.item_ids, d.rewards, d.terminal):
                series.setdefault(int(i), {})[d.day] = (float(r), bool(t))
        out = []
        for d in self.days:
            J = np.full(len(d.item_ids), np.nan)
            for k, i in enumerate(d.item_ids):
                s = series[int(i)]
                total, ok = 0.0, False
                for j in range(window):
                    rec = s.get(d.day + j)
                    if rec is None:
                        break
                    total += gamma ** j * rec[0]
                    if rec[1] or j == window - 1:
                        ok = True
                        break
                if ok:
                    J[k] = total
            out.append(J)
        return out


def score_trace(params: ParameterSet, model: A.ModelConfig, normalizer: Normalizer, trace: Trace):
    """Replay ``trace`` through an agent offline: per day, its (q, y_rl) for
    every live item, with LSTM state carried per item from the trace start.
    Q is evaluated at the action the market actually executed."""
    hidden: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    H = model.lstm_hidden
    zero = np.zeros(H)
    qs, ys = [], []
    for d in trace.days:
        ids = d.item_ids
        prev = LstmState(np.array([hidden.get(int(i), (zero, zero))[1] for i in ids]).reshape(-1, H),
                         np.array([hidden.get(int(i), (zero, zero))[0] for i in ids]).reshape(-1, H))
        tape = Tape(params, trainable=())
        tr = A.trunk(tape, normalizer.transform(d.raw_obs), prev, model)
        out = A.actor_head(tape, tr, model)
        act = tape.const(np.column_stack([d.y_rl, d.price]))
        qs.append(C.q_parts(tape, tr, act, model).q.value[:, 0])
        ys.append(out.y_rl.value[:, 0])
        for k, i in enumerate(ids):
            if d.terminal[k]:
                hidden.pop(int(i), None)
            else:
                hidden[int(i)] = (tr.h.value[k], tr.c.value[k])
    return qs, ys


# ---------------------------------------------------------------------------
# baselines


def empirical_baseline(item_groups, history_groups, history_j, weights=(1 / 3, 1 / 3, 1 / 3),
                       percentile: float = 50.0) -> np.ndarray:
    """Score items by the historical return percentile of their category, shop
    and brand groups, averaged with ``weights`` and min-max scaled into [0, 1].

    ``item_groups`` and ``history_groups`` have one column per grouping.  A
    group absent from the history falls back to the global percentile.
    """
    item_groups = np.atleast_2d(np.asarray(item_groups))
    history_groups = np.atleast_2d(np.asarray(history_groups))
    history_j = np.asarray(history_j, dtype=np.float64)
    if history_j.size == 0:
        raise ConfigError("empirical baseline needs a non-empty history")
    w = np.asarray(weights, dtype=np.float64)
    if w.size != item_groups.shape[1] or w.sum() <= 0:
        raise ConfigError("one non-negative weight per grouping column")
    w = w / w.sum()
    fallback = np.percentile(history_j, percentile)
    raw = np.zeros(item_groups.shape[0])
    for col in range(item_groups.shape[1]):
        table = {}
        for g in np.unique(history_groups[:, col]):
            table[g] = np.percentile(history_j[history_groups[:, col] == g], percentile)
        raw += w[col] * np.array([table.get(g, fallback) for g in item_groups[:, col]])
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.full_like(raw, 0.5)
    return (raw - lo) / (hi - lo)


def supervised_specs(model: A.ModelConfig, head_width: int = 0) -> list[tuple[str, tuple]]:
    """Shared encoder/LSTM shapes plus the regression head; ``head_width`` 0
    means a single linear readout of the hidden state."""
    shared = [s for s in A.parameter_specs(model) if s[0].startswith(("enc/", "lstm/"))]
    H = model.lstm_hidden
    if head_width == 0:
        return shared + [("head/W0", (1, H)), ("head/b0", (1,))]
    return shared + [("head/W0", (head_width, H)), ("head/b0", (head_width,)),
                     ("head/W1", (1, head_width)), ("head/b1", (1,))]


class SupervisedLSTM:
    """Encoder and LSTM identical to the agent's trunk, with a small dense
    head on the hidden state regressing the realized return."""

    def __init__(self, model: A.ModelConfig, normalizer: Normalizer, seed: int = 0, lr: float = 1e-3,
                 head_width: int = 0, clip_norm: float = 5.0):
        self.model = model
        self.head_layers = 1 if head_width == 0 else 2
        self.normalizer = normalizer
        rng = np.random.default_rng([seed, 41])
        self.params = ParameterSet(supervised_specs(model, head_width))
        init_uniform(self.params, rng, skip=lambda n: n.startswith("enc/emb"))
        for name in ("enc/emb_category", "enc/emb_brand", "enc/emb_shop"):
            self.params[name][...] = rng.normal(0.0, 0.1, size=self.params[name].shape)
        self.params["lstm/b"][:model.lstm_hidden] = 1.0
        self.opt = AdamState(self.params.size, lr=lr)
        self.clip_norm = clip_norm
        self.diverged = False

    def _forward(self, tape: Tape, obs_seq: np.ndarray):
        steps = A.trunk_seq(tape, obs_seq, self.model)
        preds = [A._mlp(tape, s.h, "head", self.head_layers, last_act="identity") for s in steps]
        return tape.concat(preds)          # (B, T)

    def loss_and_grad(self, obs_seq: np.ndarray, labels: np.ndarray, mask: np.ndarray):
        """Mean squared error over unmasked steps; ``labels``/``mask`` are (T, B)."""
        tape = Tape(self.params)
        pred = self._forward(tape, obs_seq)
        err = (pred.value - labels.T) * mask.T
        n = max(mask.sum(), 1.0)
        loss = float(np.sum(err * err) / n)
        grad = tape.backward(pred, 2.0 * err / n)
        return loss, grad

    def fit(self, sequences: np.ndarray, labels: np.ndarray, mask: np.ndarray, steps: int, batch: int,
            rng: np.random.Generator) -> list[float]:
        """Minibatch Adam over ``sequences`` of shape (T, n, obs_dim), already normalized.
        Stops early and sets ``diverged`` if the loss goes non-finite or explodes."""
        n = sequences.shape[1]
        history = []
        for _ in range(steps):
            pick = rng.choice(n, size=min(batch, n), replace=False)
            loss, g = self.loss_and_grad(sequences[:, pick], labels[:, pick], mask[:, pick])
            if not np.isfinite(loss) or (history and loss > 1e6 * max(history[0], 1e-12)):
                self.diverged = True
                warnings.warn("supervised baseline diverged; stopping early", MetricWarning, stacklevel=2)
                break
            history.append(loss)
            clip_by_global_norm(g, self.clip_norm)
            adam_update(self.params.flat, g, self.opt)
        return history

    def predict_trace(self, trace: Trace) -> list[np.ndarray]:
        """Per day predictions, LSTM state carried per item from the trace start."""
        hidden = {}
        H = self.model.lstm_hidden
        zero = np.zeros(H)
        out = []
        for d in trace.days:
            ids = d.item_ids
            prev = LstmState(np.array([hidden.get(int(i), (zero, zero))[1] for i in ids]).reshape(-1, H),
                             np.array([hidden.get(int(i), (zero, zero))[0] for i in ids]).reshape(-1, H))
            tape = Tape(self.params, trainable=())
            tr = A.trunk(tape, self.normalizer.transform(d.raw_obs), prev, self.model)
            out.append(A._mlp(tape, tr.h, "head", self.head_layers, last_act="identity").value[:, 0])
            for k, i in enumerate(ids):
                hidden[int(i)] = (tr.h.value[k], tr.c.value[k])
        return out


def training_windows(trace: Trace, normalizer: Normalizer, gamma: float, window: int, length: int):
    """Cut every item's trace into consecutive non-overlapping windows of
    ``length`` days, with the realized return of each day as its label.

    Returns ``(sequences (length, n, d), labels (length, n), mask (length, n))``.
    """
    J = trace.returns(gamma, window)
    per_item: dict[int, list] = {}
    for d, Jd in zip(trace.days, J):
        norm = normalizer.transform(d.raw_obs)
        for k, i in enumerate(d.item_ids):
            per_item.setdefault(int(i), []).append((d.day, norm[k], Jd[k]))
    seqs, labs, masks = [], [], []
    dim = None
    for rows in per_item.values():
        for start in range(0, len(rows), length):
            chunk = rows[start:start + length]
            dim = chunk[0][1].size
            o = np.zeros((length, dim))
            y = np.zeros(length)
            m = np.zeros(length)
            for t, (_, ob, j) in enumerate(chunk):
                o[t] = ob
                if np.isfinite(j):
                    y[t], m[t] = j, 1.0
            # pad by repeating the last observation; padded steps are masked out
            o[len(chunk):] = o[len(chunk) - 1]
            seqs.append(o)
            labs.append(y)
            masks.append(m)
    if not seqs:
        raise ConfigError("no training windows in trace")
    return np.stack(seqs, axis=1), np.stack(labs, axis=1), np.stack(masks, axis=1)


# ---------------------------------------------------------------------------
# eval lists and tables


def eval_lists(trace: Trace, J: list[np.ndarray], days: Iterable[int], size: int, rng: np.random.Generator,
               max_age: int | None = None, content_dim: int = 16) -> list[tuple[int, np.ndarray]]:
    """Per evaluation day, a list of row indices: items with a defined return,
    optionally only those at most ``max_age`` days on the market, sampled
    round-robin across categories up to ``size`` items."""
    from .mdp import S_DIM, XT_DIM
    cat_col = S_DIM + XT_DIM + content_dim
    wanted = set(days)
    out = []
    for k, d in enumerate(trace.days):
        if d.day not in wanted:
            continue
        ok = np.isfinite(J[k])
        if max_age is not None:
            ok &= d.raw_obs[:, 0] <= max_age
        idx = np.flatnonzero(ok)
        if idx.size > size:
            cats = d.raw_obs[idx, cat_col]
            groups = [rng.permutation(idx[cats == c]) for c in np.unique(cats)]
            picked = []
            depth = 0
            while len(picked) < size:
                for g in groups:
                    if depth < g.size and len(picked) < size:
                        picked.append(g[depth])
                depth += 1
            idx = np.sort(np.array(picked))
        out.append((k, idx))
    return out


def ranking_metrics(lists, J, scores, trace: Trace, ks=(10, 20, 50)) -> dict[int, float]:
    """Mean NDCG@k over the eval lists for one per-day score array family."""
    res = {}
    for k in ks:
        vals = []
        for day_k, idx in lists:
            if idx.size < k:
                continue
            vals.append(ndcg_at_k(scores[day_k][idx], J[day_k][idx], k, ids=trace.days[day_k].item_ids[idx]))
        res[k] = float(np.mean(vals)) if vals else math.nan
    return res


def pooled(lists, arrays) -> np.ndarray:
    return np.concatenate([arrays[k][idx] for k, idx in lists]) if lists else np.zeros(0)


def alpha_sweep(grid, lists, J, y_ctr, y_rl, trace: Trace, ks=(10, 20, 50)) -> list[dict]:
    """For each fixed alpha, blend the two scores for every item and report
    impression AUC on the realized clicks plus NDCG against the realized return."""
    grid = np.asarray(list(grid), dtype=np.float64)
    if np.any(grid < 0) or np.any(grid > 1):
        raise ConfigError("sweep grid must lie in [0, 1]")
    clicks = pooled(lists, [d.ipv for d in trace.days])
    impressions = pooled(lists, [d.pv_rec + d.pv_other for d in trace.days])
    curve = []
    for a in grid:
        y = [(1.0 - a) * c + a * r for c, r in zip(y_ctr, y_rl)]
        row = {"alpha": float(a), "auc": impression_auc(pooled(lists, y), clicks, impressions)}
        for k, v in ranking_metrics(lists, J, y, trace, ks).items():
            row[f"ndcg@{k}"] = v
        curve.append(row)
    return curve


def format_table(rows: dict[str, dict], columns: Sequence[str]) -> str:
    width = max(len(n) for n in rows) + 2
    lines = ["method".ljust(width) + "".join(c.rjust(10) for c in columns)]
    for name, vals in rows.items():
        lines.append(name.ljust(width) + "".join(f"{vals.get(c, math.nan):10.4f}" for c in columns))
    return "\n".join(lines)


def write_csv(path, rows: list[dict]) -> None:
    import csv
    if not rows:
        raise ConfigError("nothing to write")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
