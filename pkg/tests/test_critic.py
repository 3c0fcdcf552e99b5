import numpy as np
import pytest

from helpers import random_obs, random_params, reference_q, small_model
from rlltv import actor as A
from rlltv import critic as C
from rlltv.nn import LstmState, ParameterSet, Tape


def _q(ps, model, obs, act, prev):
    return C.q_value(ps, obs, act, prev, model)[0]


def test_zero_weights_give_zero_value():
    rng = np.random.default_rng(0)
    model = small_model(rng)
    ps = ParameterSet(A.parameter_specs(model))
    obs = random_obs(rng, model, 5)
    q = _q(ps, model, obs, rng.random((5, 2)), LstmState.zeros(5, model.lstm_hidden))
    assert np.all(q == 0.0)


def test_q_is_the_sum_of_its_three_parts():
    rng = np.random.default_rng(1)
    model = small_model(rng)
    ps = random_params(rng, model)
    obs, act = random_obs(rng, model, 7), rng.random((7, 2))
    prev = LstmState(rng.normal(size=(7, model.lstm_hidden)), rng.normal(size=(7, model.lstm_hidden)))
    tape = Tape(ps, trainable=())
    parts = C.q_parts(tape, A.trunk(tape, obs, prev, model), tape.const(act), model)
    v, a, b = reference_q(ps, model, obs, act, prev.h, prev.c)
    np.testing.assert_allclose(parts.v.value[:, 0], v, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(parts.a.value[:, 0], a, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(parts.q.value[:, 0], v + a + b, rtol=1e-12, atol=1e-12)


def test_trend_features_drop_out_when_ablated():
    rng = np.random.default_rng(2)
    model = small_model(rng, no_x_t=True)
    ps = random_params(rng, model)
    obs, act = random_obs(rng, model, 4), rng.random((4, 2))
    bumped = obs.copy()
    bumped[:, model.s_dim:model.s_dim + model.xt_dim] += 3.0
    prev = LstmState.zeros(4, model.lstm_hidden)
    np.testing.assert_array_equal(_q(ps, model, obs, act, prev), _q(ps, model, bumped, act, prev))


def test_history_is_ignored_without_recurrence():
    rng = np.random.default_rng(3)
    model = small_model(rng, no_recurrent=True)
    ps = random_params(rng, model)
    obs, act = random_obs(rng, model, 4), rng.random((4, 2))
    h = rng.normal(size=(4, model.lstm_hidden))
    np.testing.assert_array_equal(_q(ps, model, obs, act, LstmState.zeros(4, model.lstm_hidden)),
                                  _q(ps, model, obs, act, LstmState(h, h)))


def test_td_target():
    assert C.td_target(1.0, 4.0, 0.5, False) == 3.0
    assert C.td_target(1.0, 4.0, 0.5, True) == 1.0
    np.testing.assert_array_equal(C.td_target([1.0, 2.0], [2.0, 2.0], 0.25, [0, 1]), [1.5, 2.0])
    with pytest.raises(ValueError):
        C.td_target(1.0, 1.0, 1.0, False)
