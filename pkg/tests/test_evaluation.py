import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rlltv import evaluation as E
from rlltv import market as M
from rlltv.nn import ConfigError
from rlltv.trainer import Trainer, TrainerConfig


def brute_ndcg(scores, rel, k, ids):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], ids[i]))
    dcg = sum(rel[i] / math.log2(r + 2) for r, i in enumerate(order[:k]))
    best = max(sum(rel[i] / math.log2(r + 2) for r, i in enumerate(p[:k]))
               for p in itertools.permutations(range(len(rel))))
    return 1.0 if best == 0 else dcg / best


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


@settings(max_examples=150, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 4)), min_size=1, max_size=6), st.integers(1, 6))
def test_ndcg_matches_brute_force(pairs, k):
    scores = [float(s) for s, _ in pairs]
    rel = [float(r) for _, r in pairs]
    k = min(k, len(pairs))
    ids = list(range(len(pairs)))[::-1]
    assert E.ndcg_at_k(scores, rel, k, ids=ids) == pytest.approx(brute_ndcg(scores, rel, k, ids), abs=1e-12)


def test_ndcg_edge_cases():
    assert E.ndcg_at_k([0.1, 0.2], [0.0, 0.0], 2, return_flag=True) == (1.0, True)
    assert E.ndcg_at_k([0.9, 0.1], [1.0, 0.0], 1) == 1.0
    for bad in (0, 3):
        with pytest.raises(ConfigError):
            E.ndcg_at_k([0.1, 0.2], [1.0, 0.0], bad)
    with pytest.raises(ConfigError):
        E.ndcg_at_k([0.1], [-1.0], 1)


@settings(max_examples=150, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=2, max_size=30))
def test_auc_matches_pairwise_count(pairs):
    scores = [float(s) for s, _ in pairs]
    labels = [y for _, y in pairs]
    if all(labels) or not any(labels):
        with pytest.warns(E.MetricWarning):
            assert math.isnan(E.auc(scores, labels))
        return
    assert E.auc(scores, labels) == pytest.approx(brute_auc(scores, labels), abs=1e-12)


def test_impression_auc_expands_counts():
    scores, clicks, imps = [0.9, 0.2, 0.5], [3, 0, 1], [5, 4, 2]
    flat_s, flat_y = [], []
    for s, c, n in zip(scores, clicks, imps):
        flat_s += [s] * n
        flat_y += [1] * c + [0] * (n - c)
    assert E.impression_auc(scores, clicks, imps) == pytest.approx(brute_auc(flat_s, flat_y), abs=1e-12)


def test_regression_metrics():
    assert E.regression_metrics([1.0, 3.0], [2.0, 1.0]) == pytest.approx((math.sqrt(2.5), 1.5))
    with pytest.raises(ConfigError):
        E.regression_metrics([], [])


def test_empirical_baseline_by_hand():
    hist_groups = np.array([[0, 0, 0], [0, 1, 1], [1, 1, 1]])
    hist_j = np.array([1.0, 3.0, 10.0])
    # item 0 sees medians (2, 1, 1), item 1 sees (10, 6.5, 6.5), item 2 falls back to the global 3
    out = E.empirical_baseline([[0, 0, 0], [1, 1, 1], [7, 7, 7]], hist_groups, hist_j)
    raw = np.array([4 / 3, 23 / 3, 3.0])
    np.testing.assert_allclose(out, (raw - raw.min()) / (raw.max() - raw.min()), rtol=1e-12)
    np.testing.assert_array_equal(E.empirical_baseline([[0, 0, 0]], hist_groups, hist_j), [0.5])
    with pytest.raises(ConfigError):
        E.empirical_baseline([[0, 0, 0]], hist_groups[:0], hist_j[:0])


@pytest.fixture(scope="module")
def trace():
    sim = M.SimConfig(seed=5, n_items=40, daily_budget=6000.0, max_age=12, initial_age_max=11)
    tr = Trainer(sim, TrainerConfig(burn_in_days=3, episode_len=4, epochs=1, batch_size=8))
    tr.run(2)
    return tr, E.Trace.from_logs(tr.logs, sim.content_dim)


def test_trace_roundtrip_and_returns(trace, tmp_path):
    tr, t = trace
    t.save(tmp_path / "t.npz")
    back = E.Trace.load(tmp_path / "t.npz")
    assert len(back) == len(t) == 11
    for a, b in zip(t.days, back.days):
        for f in E.TraceDay.FIELDS:
            np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
    J = t.returns(0.5, 3)
    d0 = t.days[0]
    i = int(d0.item_ids[0])
    rows = [(d.rewards[list(d.item_ids).index(i)], d.terminal[list(d.item_ids).index(i)])
            for d in t.days[:3] if i in d.item_ids]
    if len(rows) == 3 and not any(term for _, term in rows[:2]):
        assert J[0][0] == pytest.approx(sum(0.5 ** j * r for j, (r, _) in enumerate(rows)), abs=1e-15)
    # the window runs past the end of the trace on the last two days unless the item retires
    assert all(np.isnan(J[-1][~t.days[-1].terminal]))


def test_supervised_fits_a_constant_label(trace):
    tr, t = trace
    seqs, labels, mask = E.training_windows(t, tr.agent.normalizer, 0.5, 3, 4)
    assert seqs.shape[:2] == labels.shape == mask.shape
    labels = np.where(mask > 0, 0.3, 0.0)
    sup = E.SupervisedLSTM(tr.agent.model, tr.agent.normalizer, seed=0, lr=1e-2)
    hist = sup.fit(seqs, labels, mask, steps=400, batch=32, rng=np.random.default_rng(0))
    assert not sup.diverged and hist[-1] < hist[0]
    preds = np.concatenate(sup.predict_trace(t))
    assert abs(np.mean(preds) - 0.3) < 1e-2


def test_eval_lists_are_cold_and_stratified(trace):
    tr, t = trace
    J = t.returns(0.5, 3)
    days = [d.day for d in t.days[:6]]
    lists = E.eval_lists(t, J, days, 10, np.random.default_rng(0), max_age=5, content_dim=tr.sim_cfg.content_dim)
    assert [t.days[k].day for k, _ in lists] == days
    cat_col = 10 + 15 + tr.sim_cfg.content_dim
    for k, idx in lists:
        d = t.days[k]
        assert idx.size <= 10 and np.all(np.isfinite(J[k][idx])) and np.all(d.raw_obs[idx, 0] <= 5)
        eligible = np.flatnonzero(np.isfinite(J[k]) & (d.raw_obs[:, 0] <= 5))
        if eligible.size > 10:
            counts = np.unique(d.raw_obs[idx, cat_col], return_counts=True)[1]
            avail = np.unique(d.raw_obs[eligible, cat_col], return_counts=True)[1]
            # round robin: no category gets two more picks than another unless it ran out
            assert counts.max() - counts.min() <= 1 or counts.min() == avail.min()


def test_sweep_endpoints_are_the_pure_scores(trace):
    tr, t = trace
    J = t.returns(0.5, 3)
    lists = E.eval_lists(t, J, [d.day for d in t.days[:6]], 20, np.random.default_rng(1))
    y_ctr = [d.y_ctr for d in t.days]
    y_rl = [d.y_rl for d in t.days]
    curve = E.alpha_sweep([0.0, 1.0], lists, J, y_ctr, y_rl, t, ks=(10,))
    assert curve[0]["ndcg@10"] == E.ranking_metrics(lists, J, y_ctr, t, (10,))[10]
    assert curve[1]["ndcg@10"] == E.ranking_metrics(lists, J, y_rl, t, (10,))[10]
    clicks = E.pooled(lists, [d.ipv for d in t.days])
    imps = E.pooled(lists, [d.pv_rec + d.pv_other for d in t.days])
    assert curve[0]["auc"] == E.impression_auc(E.pooled(lists, y_ctr), clicks, imps)
    with pytest.raises(ConfigError):
        E.alpha_sweep([1.5], lists, J, y_ctr, y_rl, t)


def test_scores_do_not_depend_on_the_future(trace):
    # replaying a truncated trace gives the same scores on the days both contain
    tr, t = trace
    full_q, full_y = E.score_trace(tr.agent.params, tr.agent.model, tr.agent.normalizer, t)
    short = E.Trace(t.days[:5], t.content_dim)
    q, y = E.score_trace(tr.agent.params, tr.agent.model, tr.agent.normalizer, short)
    for k in range(5):
        np.testing.assert_array_equal(q[k], full_q[k])
        np.testing.assert_array_equal(y[k], full_y[k])
