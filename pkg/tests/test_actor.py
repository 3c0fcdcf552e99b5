import numpy as np
import pytest

from helpers import random_obs, random_params, small_model
from rlltv import actor as A
from rlltv.nn import ConfigError, LstmState


def test_shapes_and_ranges():
    rng = np.random.default_rng(0)
    model = small_model(rng)
    ps = A.init_parameters(model, rng)
    obs = random_obs(rng, model, 6)
    y, p, nxt = A.act(ps, obs, LstmState.zeros(6, model.lstm_hidden), model)
    assert y.shape == p.shape == (6,)
    assert np.all((y > 0) & (y < 1)) and np.all((p > 0) & (p < 1))
    assert nxt.h.shape == nxt.c.shape == (6, model.lstm_hidden)


def test_parameter_groups_are_contiguous():
    model = small_model(np.random.default_rng(1))
    ps = A.init_parameters(model, np.random.default_rng(1))
    critic, actor = ps.span(A.CRITIC_PREFIXES), ps.span(A.ACTOR_PREFIXES)
    assert critic.stop <= actor.start or actor.stop <= critic.start
    assert (critic.stop - critic.start) + (actor.stop - actor.start) == ps.size


def test_bad_model_config_is_rejected():
    with pytest.raises(ConfigError):
        A.ModelConfig(deep_widths=(4, 4)).check()
    with pytest.raises(ConfigError):
        A.ModelConfig(lstm_hidden=0).check()


def test_recurrence_carries_history_unless_ablated():
    rng = np.random.default_rng(2)
    for flag, differs in ((False, True), (True, False)):
        model = small_model(rng, no_recurrent=flag)
        ps = random_params(rng, model)
        obs = random_obs(rng, model, 3)
        a = A.act(ps, obs, LstmState.zeros(3, model.lstm_hidden), model)[0]
        h = LstmState(rng.normal(size=(3, model.lstm_hidden)), rng.normal(size=(3, model.lstm_hidden)))
        b = A.act(ps, obs, h, model)[0]
        assert (not np.array_equal(a, b)) == differs


def test_item_features_are_ignored_when_ablated():
    rng = np.random.default_rng(3)
    model = small_model(rng, no_x_i=True)
    ps = random_params(rng, model)
    obs = random_obs(rng, model, 4)
    other = obs.copy()
    k = model.s_dim + model.xt_dim
    other[:, k:] = random_obs(rng, model, 4)[:, k:]
    prev = LstmState.zeros(4, model.lstm_hidden)
    np.testing.assert_array_equal(A.act(ps, obs, prev, model)[0], A.act(ps, other, prev, model)[0])


def test_explore_without_noise_is_the_identity():
    y, p = np.array([0.2, 0.9]), np.array([0.5, 0.99])
    y2, p2 = A.explore(y, p, 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(y2, y)
    np.testing.assert_array_equal(p2, p)
    with pytest.raises(ConfigError):
        A.explore(y, p, -0.1, np.random.default_rng(0))


def test_explore_spread_matches_the_logistic_slope():
    # small logit noise sigma moves y by about sigma * y * (1 - y)
    y = np.full(200_000, 0.3)
    y2, p2 = A.explore(y, y, 0.01, np.random.default_rng(4))
    assert abs(y2.std() / (0.01 * 0.3 * 0.7) - 1.0) < 0.02
    assert np.all((y2 > 0) & (y2 < 1)) and np.all((p2 > 0) & (p2 <= 1))
    extreme = A.explore(np.array([1 - 1e-15]), np.array([1e-15]), 50.0, np.random.default_rng(5))
    assert 0 < extreme[0][0] < 1 and 0 < extreme[1][0] <= 1
