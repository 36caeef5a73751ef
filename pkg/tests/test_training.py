import numpy as np
import pytest

from fmgteleop.models import ModelSpec, build_model, checkpoint_bytes
from fmgteleop.signal import SessionRecording, session_timestamps
from fmgteleop.training import (EvalReport, TrainConfig, TrainingDivergedError, benchmark, evaluate, finetune,
                                format_grid, format_table, history_csv, permutation_importance, report_csv,
                                split_sessions, train)

SMALL_FC = {"hidden": 16, "layers": 2}


def _constant_pose_sessions(n_sessions=3, n=120, angle=30.0, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n_sessions):
        raw = rng.integers(395, 405, (n, 28))
        poses = np.full((n, 10), angle)
        poses[:10] = 0.0
        out.append(SessionRecording(f"c{k}", session_timestamps(n), raw, poses, np.arange(n) < 10))
    return out


class SensorEcho:
    """Predicts joint j as calibrated sensor ``source[j]`` / 10, from the last frame."""

    def __init__(self, source, H=1):
        self.source = np.asarray(source)
        self.spec = ModelSpec("fcnn", H=H)

    def predict_batch(self, X, batch_size=256):
        last = np.asarray(X, dtype=np.float64)[:, -1].reshape(len(X), 28)
        return np.clip(last[:, self.source] / 10.0, 0, 120)


def _echo_sessions(n_sessions=2, n=80, seed=1):
    """Zero baseline, so calibrated values equal raw counts and poses are exact functions of them."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n_sessions):
        raw = rng.integers(0, 1024, (n, 28))
        raw[:5] = 0
        poses = raw[:, :10] / 10.0
        out.append(SessionRecording(f"e{k}", session_timestamps(n), raw, poses, np.arange(n) < 5))
    return out


def test_train_config_validation():
    for bad in ({"lr": 0}, {"batch_size": 1}, {"val_fraction": 1.0}, {"stride": 0}, {"noise_sigma": -1}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_split_is_session_disjoint(small_sessions):
    tr, va = split_sessions(small_sessions, 0.25, seed=3)
    assert len(va) == 1 and len(tr) == 3
    assert not {s.session_id for s in tr} & {s.session_id for s in va}
    assert split_sessions(small_sessions, 0.25, seed=3)[1][0].session_id == va[0].session_id


def test_constant_pose_is_learned():
    model = build_model(ModelSpec("fcnn", dims=SMALL_FC))
    cfg = TrainConfig(lr=1e-2, batch_size=32, max_epochs=40, patience=40, noise_sigma=0, stride=1, val_fraction=0)
    trained, history = train(model, _constant_pose_sessions(), cfg)
    rep = evaluate(trained, _constant_pose_sessions(seed=9))
    assert rep.mean < 0.5
    assert history[0].epoch == 0 and len(history) == 41


def test_training_is_deterministic(small_sessions):
    cfg = TrainConfig(batch_size=64, max_epochs=2, stride=8)
    spec = ModelSpec("tcn", H=12, dims={"enc_channels": 4, "temporal_channels": 8, "n_blocks": 2, "kernel_size": 3})
    a, ha = train(build_model(spec), small_sessions, cfg)
    b, hb = train(build_model(spec), small_sessions, cfg)
    assert ha == hb
    assert checkpoint_bytes(a) == checkpoint_bytes(b)


def test_train_keeps_the_best_validation_checkpoint(small_sessions):
    cfg = TrainConfig(lr=1e-3, batch_size=32, max_epochs=4, patience=4, stride=4)
    model, history = train(build_model(ModelSpec("fcnn", dims=SMALL_FC)), small_sessions, cfg)
    _, val = split_sessions(small_sessions, cfg.val_fraction, cfg.seed)
    best = min(r.val_mae for r in history)
    assert evaluate(model, val, stride=4).mean == pytest.approx(best, rel=1e-6)


def test_training_errors(small_sessions):
    with pytest.raises(ValueError):
        train(build_model(ModelSpec("fcnn", dims=SMALL_FC)), [])
    with pytest.raises(TrainingDivergedError), np.errstate(over="ignore", invalid="ignore"):
        train(build_model(ModelSpec("fcnn", dims=SMALL_FC)), small_sessions,
              TrainConfig(lr=1e30, max_epochs=3, stride=8))


def test_finetune_without_data_is_a_no_op(small_sessions):
    model = build_model(ModelSpec("fcnn", dims=SMALL_FC))
    same = finetune(model, [])
    assert checkpoint_bytes(same) == checkpoint_bytes(model)
    assert checkpoint_bytes(finetune(model, small_sessions, epochs=0)) == checkpoint_bytes(model)
    moved = finetune(model, small_sessions[:1], epochs=1, stride=10)
    assert checkpoint_bytes(moved) != checkpoint_bytes(model)
    # the input model is not modified in place
    assert checkpoint_bytes(finetune(model, [])) == checkpoint_bytes(model)


def test_evaluate_constant_predictor_arithmetic():
    model = build_model(ModelSpec("fcnn", dims=SMALL_FC))
    for p in model.store.params.values():
        p.data[...] = 0
    model.store["mlp.head.bias"].data[:] = -1.5  # 45 + 30 * -1.5 = 0 degrees
    rep = evaluate(model, _constant_pose_sessions(angle=30.0))
    assert np.all(rep.errors == 30.0)
    assert rep.mean == 30.0 and rep.std == 0.0
    assert np.all(rep.per_joint_mae == 30.0)


def test_evaluate_perfect_predictor():
    rep = evaluate(SensorEcho(np.arange(10)), _echo_sessions())
    assert rep.n_samples == 2 * 75
    assert not rep.errors.any()


def test_eval_report_aggregates():
    rng = np.random.default_rng(0)
    e = np.abs(rng.normal(size=(37, 10)))
    rep = EvalReport(e)
    assert rep.mean == pytest.approx(e.mean(), rel=1e-14)
    assert rep.std == pytest.approx(e.std(), rel=1e-12)
    np.testing.assert_allclose(rep.per_joint_mae, e.mean(0), rtol=1e-14)
    # grid rows are (MCP, PIP), columns fingers
    assert rep.grid.shape == (2, 5)
    assert rep.grid[1, 0] == rep.per_joint_mae[1] and rep.grid[0, 4] == rep.per_joint_mae[8]
    # order-independent aggregates
    assert EvalReport(e[::-1]).mean == rep.mean


def test_permutation_importance_trivial_cases():
    sessions = _echo_sessions(n=200)
    model = SensorEcho(np.array([0] * 10))  # reads sensor 1 only
    scores = permutation_importance(model, sessions, repeats=2)
    assert scores.shape == (28,)
    assert scores[0] > 0
    assert np.all(scores[1:] == 0.0)
    again = permutation_importance(model, sessions, repeats=2)
    assert np.array_equal(scores, again)
    with pytest.raises(ValueError):
        permutation_importance(model, sessions, repeats=0)


def test_benchmark_and_reports(small_sessions):
    cfg = TrainConfig(batch_size=32, max_epochs=1, stride=8)
    specs = [ModelSpec("fcnn", dims=SMALL_FC), ModelSpec("cnn", dims={"conv_channels": 2, "fc": (8,)})]
    res = benchmark(specs, small_sessions[:3], small_sessions[3:], cfg)
    assert list(res) == ["cnn", "fcnn"]
    reports = {k: v.report for k, v in res.items()}
    text = report_csv(reports)
    lines = text.splitlines()
    assert lines[0] == "model,joint,mae_deg,std_deg" and len(lines) == 1 + 2 * 11
    assert lines[11].startswith("cnn,all,")
    assert "fcnn" in format_table(reports)
    assert format_grid(reports["cnn"]).splitlines()[1].startswith("MCP")
    assert history_csv(res["cnn"].history).splitlines()[1].startswith("0,")
