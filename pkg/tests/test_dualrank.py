import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rlltv.dualrank import DualRankMixer, MixerConfig, alpha, mix
from rlltv.nn import ConfigError


def test_alpha_endpoints_and_clamping():
    cfg = MixerConfig(0.0, 0.2, -1.0, 3.0)
    assert alpha(-1.0, cfg) == 0.0 and alpha(3.0, cfg) == 0.2
    assert alpha(-50.0, cfg) == 0.0 and alpha(50.0, cfg) == 0.2
    mid = alpha(1.0, cfg)
    assert mid == pytest.approx(np.sqrt(1.2) - 1.0, rel=1e-14)
    # convex ramp: below the straight line through the ends
    assert mid < 0.1


@settings(max_examples=200, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 0.5), st.floats(0, 0.49))
def test_alpha_is_monotone_and_bounded(q1, q2, lo, width):
    cfg = MixerConfig(lo * 0.9, lo * 0.9 + width, -2.0, 2.0)
    a1, a2 = alpha(min(q1, q2), cfg), alpha(max(q1, q2), cfg)
    assert cfg.alpha_min <= a1 <= a2 <= cfg.alpha_max


def test_fixed_and_flat_alpha():
    assert alpha(0.3, MixerConfig(fixed_alpha=0.7)) == 0.7
    np.testing.assert_array_equal(alpha(np.array([0.0, 9.0]), MixerConfig(0.1, 0.1)), [0.1, 0.1])


def test_bad_mixer_config():
    for bad in (MixerConfig(0.3, 0.2), MixerConfig(0.0, 1.0), MixerConfig(q_min=1.0, q_max=1.0),
                MixerConfig(fixed_alpha=1.5)):
        with pytest.raises(ConfigError):
            bad.validate()


def test_mixer_blends_per_item():
    assert mix(0.4, 0.8, 0.25) == pytest.approx(0.5)
    mixer = DualRankMixer.from_q([5, 6], [0.0, 1.0], MixerConfig())
    assert mixer.alphas == {5: 0.0, 6: 0.2}
    out = mixer.final_scores([6, 5, 7], [0.5, 0.5, 0.5], [1.0, 1.0, 1.0])
    np.testing.assert_allclose(out, [0.6, 0.5, 0.5])
