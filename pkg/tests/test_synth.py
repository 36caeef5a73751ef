import numpy as np
import pytest

from fmgteleop import synth
from fmgteleop.signal import compute_baseline
from fmgteleop.synth import (GeneratorConfig, config_from_mapping, config_to_text, generate_session,
                             make_config, make_user_variant, sensor_drive)


def test_default_config_shape():
    cfg = make_config()
    assert cfg.seed == 7 and cfg.n_sessions == 15 and cfg.frames_per_session == 3000
    assert len(cfg.informative_sensors) == 18 and len(cfg.uninformative_sensors) == 10
    assert (cfg.noise_std, cfg.lag_alpha, cfg.session_offset_scale) == (8.0, 0.25, 30.0)
    dead = [s - 1 for s in cfg.uninformative_sensors]
    assert not cfg.coupling[dead].any() and not cfg.confound_loading[dead].any()
    live = [s - 1 for s in cfg.informative_sensors]
    # every informative sensor sees at least two joints, every joint at least three sensors
    assert np.all((cfg.coupling[live] > 0).sum(1) >= 2)
    assert np.all((cfg.coupling > 0).sum(0) >= 3)


def test_config_validation():
    cfg = make_config()
    bad = cfg.coupling.copy()
    bad[cfg.uninformative_sensors[0] - 1, 0] = 1.0
    with pytest.raises(ValueError):
        make_config(coupling=bad)
    with pytest.raises(ValueError):
        make_config(lag_alpha=0.0)
    with pytest.raises(ValueError):
        make_config(noise_std=-1.0)
    with pytest.raises(ValueError):
        make_config(coupling=-cfg.coupling)
    make_config(lag_alpha=1.0)


def test_generation_is_deterministic(small_config):
    a, qa = generate_session(small_config, 2)
    b, qb = generate_session(small_config, 2)
    assert a.equals(b) and np.array_equal(qa, qb)
    c, _ = generate_session(small_config, 3)
    assert not np.array_equal(a.raw, c.raw)


def test_session_structure(small_config, small_sessions):
    for s in small_sessions:
        s.validate()
        assert s.n_baseline == small_config.baseline_frames
        assert len(s) == small_config.baseline_frames + small_config.frames_per_session
        assert s.raw.min() >= 0 and s.raw.max() <= 1023
        assert not s.poses[s.is_baseline].any()
        q = s.poses[~s.is_baseline]
        assert q.min() >= 0 and q.max() <= 90


def test_memoryless_degenerate_case():
    """gamma=0, alpha=1, no noise and no offsets: x(t) is a function of q(t) alone."""
    cfg = make_config(seed=2, frames_per_session=400, velocity_gain=0.0, lag_alpha=1.0, noise_std=0.0,
                      session_offset_scale=0.0, arm_confound_scale=0.0)
    s, q = generate_session(cfg, 0)
    drive = sensor_drive(cfg, q, np.zeros_like(q))
    expected = np.clip(np.rint(cfg.rest_level[None] + drive), 0, 1023)
    assert np.array_equal(s.raw, expected)


def test_rest_state_matches_baseline(monkeypatch):
    def still(rng, n, rate_hz=33.0):
        return np.zeros((n, 10)), np.zeros((n, 10))

    monkeypatch.setattr(synth, "joint_trajectories", still)
    cfg = make_config(seed=4, frames_per_session=200, noise_std=0.0, arm_confound_scale=0.0)
    s, _ = generate_session(cfg, 1)
    base = compute_baseline(s.baseline_rows()).values
    assert np.all(s.raw[~s.is_baseline] == base[None])


def test_uninformative_sensors_carry_only_offset_and_noise():
    cfg = make_config(seed=5, frames_per_session=500, noise_std=0.0)
    s, _ = generate_session(cfg, 0)
    for sensor in cfg.uninformative_sensors:
        assert len(np.unique(s.raw[:, sensor - 1])) == 1


def test_user_variant():
    cfg = make_config()
    a, b = make_user_variant(cfg, 1), make_user_variant(cfg, 1)
    assert config_to_text(a) == config_to_text(b)
    c = make_user_variant(cfg, 2)
    assert config_to_text(a) != config_to_text(c)
    assert a.informative_sensors == cfg.informative_sensors
    nz = cfg.coupling > 0
    ratio = a.coupling[nz] / cfg.coupling[nz]
    assert ratio.min() >= 0.8 and ratio.max() <= 1.2
    assert not a.coupling[~nz].any()
    rest = a.rest_level / cfg.rest_level
    assert rest.min() >= 0.9 and rest.max() <= 1.1
    assert 0.8 * 30 <= a.session_offset_scale <= 1.2 * 30
    assert a.seed != cfg.seed


def test_config_text_round_trip():
    cfg = make_config(seed=11, noise_std=3.5)
    text = config_to_text(cfg)
    values = dict(line.split(" = ", 1) for line in text.splitlines())
    back = config_from_mapping(values)
    assert config_to_text(back) == text
    with pytest.raises(KeyError):
        config_from_mapping({"bogus": "1"})
    partial = config_from_mapping({"noise_std": "2"}, base=cfg)
    assert partial.noise_std == 2.0 and np.array_equal(partial.coupling, cfg.coupling)


def test_write_sessions(small_config, tmp_path):
    paths = synth.write_sessions(small_config, tmp_path, indices=[0, 2])
    assert [p.name for p in paths] == ["session_000.csv", "session_002.csv"]


def test_generator_config_requires_arrays():
    with pytest.raises(ValueError):
        GeneratorConfig(coupling=np.zeros((28, 9)), rest_level=np.zeros(28), confound_loading=np.zeros(28))
