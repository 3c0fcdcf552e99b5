import numpy as np
import pytest

from rlltv import market as M
from rlltv.mdp import Episode
from rlltv.nn import ConfigError, NumericError
from rlltv.trainer import Agent, ReplayBuffer, Trainer, TrainerConfig, _digest, update_epoch

SIM = M.SimConfig(seed=2, n_items=20, daily_budget=4000.0)


def _trainer(**kw):
    base = dict(burn_in_days=2, episode_len=3, epochs=1, batch_size=8, seed=1)
    base.update(kw)
    return Trainer(SIM, TrainerConfig(**base))


@pytest.fixture(scope="module")
def warm():
    tr = _trainer()
    tr.run(1)
    return tr


def _ep(item, n):
    return Episode(item, 0, np.zeros((n + 1, 4)), np.full((n, 2), 0.5), np.zeros(n))


def test_buffer_is_fifo_and_samples_one_length():
    buf = ReplayBuffer(3)
    buf.extend([_ep(1, 2), _ep(2, 2), _ep(3, 5), _ep(4, 5)])
    assert [e.item_id for e in buf.episodes] == [2, 3, 4] and buf.inserted == 4
    rng = np.random.default_rng(0)
    for _ in range(20):
        with pytest.warns(RuntimeWarning, match="fewer than the batch"):
            batch = buf.sample(10, rng)
        assert len({len(e) for e in batch}) == 1
    with pytest.raises(ConfigError):
        ReplayBuffer(0)
    with pytest.raises(ConfigError):
        ReplayBuffer(2).sample(1, rng)


def test_bad_trainer_config():
    for bad in (dict(gamma=1.0), dict(tau=2.0), dict(batch_size=0), dict(alpha_max=1.0), dict(price_value=0.0)):
        with pytest.raises(ConfigError):
            TrainerConfig(**bad).validate()


def _clone(agent):
    return Agent(agent.model, agent.cfg, agent.normalizer, agent.params.copy())


def test_zero_learning_rate_leaves_parameters_bit_identical(warm):
    agent = _clone(warm.agent)
    agent.cfg = TrainerConfig(**{**vars(warm.cfg), "lr": 0.0})
    agent.opt_critic.lr = agent.opt_actor.lr = 0.0
    before = agent.params.flat.copy()
    update_epoch(warm.buffer, agent, np.random.default_rng(0))
    assert np.array_equal(agent.params.flat, before)


def test_zero_tau_freezes_the_targets(warm):
    agent = _clone(warm.agent)
    agent.cfg = TrainerConfig(**{**vars(warm.cfg), "tau": 0.0})
    before = agent.targets.flat.copy()
    update_epoch(warm.buffer, agent, np.random.default_rng(0))
    assert np.array_equal(agent.targets.flat, before)
    assert not np.array_equal(agent.params.flat, before)


def test_hidden_state_lineage_starts_from_zero(warm):
    agent = _clone(warm.agent)
    stats = update_epoch(warm.buffer, agent, np.random.default_rng(0), trace_hidden=True)
    chain = stats.hidden_lineage.split(",")
    assert len(chain) == stats.steps == 3
    B = min(len(warm.buffer), warm.cfg.batch_size)
    assert chain[0] == _digest(np.zeros((B, agent.model.lstm_hidden)))
    assert len(set(chain)) == len(chain)


def test_updates_are_off_policy(warm):
    # stored actions are replayed as-is even after the policy changed
    agent = _clone(warm.agent)
    agent.params.flat[agent.actor_span] += 1.0
    stats = update_epoch(warm.buffer, agent, np.random.default_rng(0))
    assert np.isfinite(stats.critic_loss)


def test_non_finite_rewards_halt_the_update(warm):
    agent = _clone(warm.agent)
    buf = ReplayBuffer()
    for ep in warm.buffer.episodes:
        bad = Episode(ep.item_id, ep.start_day, ep.raw_obs, ep.actions, np.full(len(ep), np.nan))
        buf.add(bad, agent.normalizer)
    with pytest.raises(NumericError):
        update_epoch(buf, agent, np.random.default_rng(0))


def test_zero_sessions_do_nothing():
    tr = _trainer()
    before = tr.agent.params.flat.copy()
    assert tr.run(0) == [] and np.array_equal(tr.agent.params.flat, before) and len(tr.buffer) == 0


def test_sessions_are_deterministic_and_checkpoints_roundtrip(warm, tmp_path):
    other = _trainer()
    other.run(1)
    assert np.array_equal(other.agent.params.flat, warm.agent.params.flat)
    assert other.history[0] == warm.history[0]
    path = tmp_path / "a.ckpt"
    warm.agent.save(path)
    back = Agent.load(path)
    assert np.array_equal(back.params.flat, warm.agent.params.flat)
    assert np.array_equal(back.targets.flat, warm.agent.targets.flat)
    assert back.mixer_cfg == warm.agent.mixer_cfg and back.opt_critic.step == warm.agent.opt_critic.step


def test_noise_anneals_linearly():
    tr = _trainer(noise_start=0.4, noise_end=0.1, noise_sessions=4)
    levels = []
    for k in range(6):
        tr.session = k
        levels.append(tr.noise_level())
    np.testing.assert_allclose(levels, [0.4, 0.3, 0.2, 0.1, 0.1, 0.1])
