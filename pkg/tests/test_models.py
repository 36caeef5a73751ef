import struct
import zlib

import numpy as np
import pytest

from fmgteleop import autodiff as ad
from fmgteleop.models import (ARCHS, BadMagicError, CRCMismatchError, CheckpointError, ModelSpec,
                              ShapeInconsistencyError, SpecMismatchError, VersionMismatchError, build_model,
                              checkpoint_bytes, load_checkpoint, model_from_bytes, predict, save_checkpoint)
from fmgteleop.signal import CalibratedFrame, HandPose

# counts from the layer sizes, computed by hand
EXPECTED_PARAMS = {
    "fcnn": 28 * 224 + 224 + 7 * (224 * 224 + 224) + 224 * 10 + 10,
    "fcnn5": 5 * (28 * 224 + 224 + 3 * (224 * 224 + 224) + 224 * 2 + 2),
    "cnn": (8 * 9 + 8) + (8 * 8 * 9 + 8) + (224 * 324 + 324) + (324 * 120 + 120) + (120 * 54 + 54) + (54 * 10 + 10),
    "lstm": (4 * 54 * (28 + 54) + 4 * 54) + 2 * (4 * 54 * (54 + 54) + 4 * 54)
    + (54 * 54 + 54) + (54 * 112 + 112) + (112 * 54 + 54) + (54 * 10 + 10),
}


def _tcn_expected():
    enc = (16 * 9 + 16) + (16 * 16 * 9 + 16) + 2 * 16 * 2 + 16 + (16 * 3 + 1)
    blocks = (64 * 49 * 10 + 64) + (64 * 64 * 10 + 64) + (64 * 49 + 64) + 2 * 64 * 2
    blocks += 2 * ((64 * 64 * 10 + 64) + (64 * 64 * 10 + 64) + 2 * 64 * 2)
    return enc + blocks + 64 * 10 + 10


EXPECTED_PARAMS["tcn"] = _tcn_expected()


@pytest.mark.parametrize("arch", ARCHS)
def test_parameter_counts(arch):
    model = build_model(ModelSpec(arch))
    assert model.n_params() == EXPECTED_PARAMS[arch]
    assert build_model(ModelSpec(arch)).n_params() == model.n_params()


def test_fcnn_count_arithmetic():
    # 8 hidden layers: 28->224, then seven 224->224, then 224->10
    assert EXPECTED_PARAMS["fcnn"] == 361_546


@pytest.mark.parametrize("arch", ARCHS)
def test_output_shape_and_clamp(arch):
    model = build_model(ModelSpec(arch, H=8 if arch in ("tcn", "lstm") else None))
    X = np.random.default_rng(0).normal(0, 3000, (3, model.spec.H, 4, 7))
    out = model.predict_batch(X)
    assert out.shape == (3, 10) and out.dtype == np.float32
    assert out.min() >= 0.0 and out.max() <= 120.0


def test_instantaneous_models_read_only_the_last_frame():
    model = build_model(ModelSpec("fcnn"))
    rng = np.random.default_rng(1)
    a = rng.normal(0, 50, (2, 5, 4, 7))
    b = a.copy()
    b[:, :-1] = rng.normal(0, 50, (2, 4, 4, 7))
    assert np.array_equal(model.predict_batch(a), model.predict_batch(b))


def test_zero_weights_give_the_head_bias():
    model = build_model(ModelSpec("fcnn", dims={"hidden": 8, "layers": 2}))
    for p in model.store.params.values():
        p.data[...] = 0
    model.store["mlp.head.bias"].data[:] = np.arange(10) / 30
    out = model.forward(np.ones((1, 1, 4, 7))).data[0]
    np.testing.assert_allclose(out, 45 + np.arange(10), rtol=1e-6)


def test_fcnn5_fingers_are_independent():
    model = build_model(ModelSpec("fcnn5", dims={"hidden": 8}, dtype="float64"))
    X = np.random.default_rng(2).normal(0, 50, (4, 1, 4, 7))
    for i in range(5):
        model.store.zero_grad()
        out = model.forward(X, training=True)
        g = np.zeros(out.shape)
        g[:, 2 * i : 2 * i + 2] = 1.0
        out.backward(g)
        for name, p in model.store.params.items():
            finger = int(name[len("finger")])
            if finger != i:
                assert p.grad is None or not np.any(p.grad), name
    # perturbing the thumb network leaves fingers 2-5 alone
    before = model.forward(X).data
    model.store["finger0.fc0.weight"].data += 1.0
    after = model.forward(X).data
    assert np.array_equal(before[:, 2:], after[:, 2:]) and not np.array_equal(before[:, :2], after[:, :2])
    sizes = {sum(p.data.size for n, p in model.store.params.items() if n.startswith(f"finger{f}.")) for f in range(5)}
    assert len(sizes) == 1


def test_tcn_receptive_field():
    assert build_model(ModelSpec("tcn")).receptive_field() == 1 + 2 * 9 * 7
    model = build_model(ModelSpec("tcn", H=12, dims={"enc_channels": 4, "temporal_channels": 8,
                                                    "kernel_size": 2, "n_blocks": 2}))
    rf = model.receptive_field()
    assert rf == 7
    rng = np.random.default_rng(3)
    X = rng.normal(0, 50, (2, 12, 4, 7))
    older = X.copy()
    older[:, : 12 - rf] = rng.normal(0, 50, (2, 12 - rf, 4, 7))
    assert np.array_equal(model.predict_batch(X), model.predict_batch(older))
    inside = X.copy()
    inside[:, 12 - rf] += 100.0
    assert not np.array_equal(model.predict_batch(X), model.predict_batch(inside))


def test_predict_single_window_types():
    model = build_model(ModelSpec("fcnn"))
    pose = predict(model, CalibratedFrame(0, np.zeros(28)))
    assert isinstance(pose, HandPose)
    seq = build_model(ModelSpec("lstm", H=5))
    with pytest.raises(ValueError):
        predict(seq, np.zeros((4, 4, 7)))
    assert isinstance(predict(seq, np.zeros((5, 4, 7))), HandPose)
    with pytest.raises(ValueError):
        seq.predict_batch(np.zeros((1, 6, 4, 7)))


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec("rnn")
    with pytest.raises(ValueError):
        ModelSpec("tcn", dims={"width": 3})
    with pytest.raises(ValueError):
        ModelSpec("tcn", H=0)
    assert ModelSpec("tcn").H == 60 and ModelSpec("cnn").H == 1


@pytest.mark.parametrize("arch", ARCHS)
def test_checkpoint_round_trip_is_a_fixed_point(arch, tmp_path):
    dims = {"tcn": {"enc_channels": 4, "temporal_channels": 8, "n_blocks": 2}, "lstm": {"hidden": 6}}.get(arch, {})
    model = build_model(ModelSpec(arch, H=12 if arch in ("tcn", "lstm") else None, seed=5, dims=dims))
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path, expected_arch=arch)
    assert loaded.spec.dims == model.spec.dims and loaded.spec.H == model.spec.H
    assert checkpoint_bytes(loaded) == path.read_bytes()
    X = np.random.default_rng(0).normal(0, 50, (2, model.spec.H, 4, 7))
    assert np.array_equal(loaded.predict_batch(X), model.predict_batch(X))


def test_checkpoint_errors():
    model = build_model(ModelSpec("fcnn", dims={"hidden": 4, "layers": 1}))
    data = checkpoint_bytes(model)
    with pytest.raises(BadMagicError):
        model_from_bytes(b"NOTACKPT" + data[8:])
    bad_version = data[:8] + (2).to_bytes(4, "little") + data[12:]
    with pytest.raises(VersionMismatchError):
        model_from_bytes(bad_version)
    flipped = bytearray(data)
    flipped[40] ^= 0xFF
    with pytest.raises(CRCMismatchError):
        model_from_bytes(bytes(flipped))
    with pytest.raises(SpecMismatchError):
        model_from_bytes(data, expected_arch="tcn")
    with pytest.raises(CheckpointError):
        model_from_bytes(data[:10])
    # re-sign a body whose tensor table lies about its size
    body = data[:-4] + b"\0"
    with pytest.raises(ShapeInconsistencyError):
        model_from_bytes(body + struct.pack("<I", zlib.crc32(body)))


def test_float64_models_for_verification():
    model = build_model(ModelSpec("cnn", dtype="float64"))
    assert model.dtype == np.float64
    assert model.forward(np.zeros((1, 1, 4, 7))).dtype == np.float64
    assert isinstance(model.store["conv1.weight"], ad.Tensor)
