"""Regressors from FMG windows to ten finger-joint angles, plus checkpoint I/O.

Every model consumes windows shaped ``(N, H, 4, 7)`` of calibrated values.
Instantaneous models (fcnn, fcnn5, cnn) only read the last frame. Inside the
network the inputs are multiplied by ``INPUT_SCALE`` and the raw outputs are
mapped to degrees by ``OUTPUT_OFFSET + OUTPUT_SCALE * y``; both are fixed
constants, not fitted to data.
"""

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .signal import ANGLE_MAX, CalibratedFrame, HandPose, N_JOINTS, N_SENSORS, WindowSequence, GRID_SHAPE

ARCHS = ("tcn", "fcnn", "fcnn5", "cnn", "lstm")
SEQUENCE_ARCHS = ("tcn", "lstm")
ARCH_TAGS = {"tcn": 1, "fcnn": 2, "fcnn5": 3, "cnn": 4, "lstm": 5}

INPUT_SCALE = 0.01
OUTPUT_OFFSET = 45.0
OUTPUT_SCALE = 30.0

DEFAULT_DIMS = {
    "tcn": {"enc_channels": 16, "temporal_channels": 64, "kernel_size": 10, "n_blocks": 3},
    "fcnn": {"hidden": 224, "layers": 8},
    "fcnn5": {"hidden": 224, "layers": 4},
    "cnn": {"conv_channels": 8, "fc": (324, 120, 54)},
    "lstm": {"hidden": 54, "layers": 3, "fc": (54, 112, 54)},
}
DEFAULT_H = {"tcn": 60, "lstm": 60, "fcnn": 1, "fcnn5": 1, "cnn": 1}


@dataclass
class ModelSpec:
    arch: str
    H: int = None
    seed: int = 0
    dims: dict = field(default_factory=dict)
    dtype: str = "float32"

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}; expected one of {ARCHS}")
        if self.H is None:
            self.H = DEFAULT_H[self.arch]
        if self.H < 1:
            raise ValueError("H must be >= 1")
        unknown = set(self.dims) - set(DEFAULT_DIMS[self.arch])
        if unknown:
            raise ValueError(f"unknown {self.arch} hyperparameters: {sorted(unknown)}")
        self.dims = {**DEFAULT_DIMS[self.arch], **self.dims}
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def is_sequence(self):
        return self.arch in SEQUENCE_ARCHS


class Model:
    """Parameters plus a forward function; subclasses define the layer graph."""

    def __init__(self, spec):
        self.spec = spec
        self.store = ad.ParameterStore()
        self._rng = np.random.default_rng(spec.seed)
        self._dtype = np.dtype(spec.dtype)
        self.build()
        del self._rng

    # parameter helpers -------------------------------------------------------
    def _uniform(self, name, shape, fan_in, gain=6.0):
        bound = np.sqrt(gain / fan_in)
        return self.store.add_param(name, self._rng.uniform(-bound, bound, size=shape).astype(self._dtype))

    def _zeros(self, name, shape):
        return self.store.add_param(name, np.zeros(shape, dtype=self._dtype))

    def _dense(self, name, n_in, n_out, gain=6.0):
        self._uniform(f"{name}.weight", (n_out, n_in), n_in, gain)
        self._zeros(f"{name}.bias", (n_out,))

    def _bn(self, name, channels):
        self.store.add_param(f"{name}.scale", np.ones(channels, dtype=self._dtype))
        self._zeros(f"{name}.shift", (channels,))
        self.store.add_buffer(f"{name}.running_mean", np.zeros(channels, dtype=self._dtype))
        self.store.add_buffer(f"{name}.running_var", np.ones(channels, dtype=self._dtype))

    # graph helpers -----------------------------------------------------------
    def _p(self, name):
        return self.store.params[name]

    def _apply_dense(self, name, x):
        return ad.dense(x, self._p(f"{name}.weight"), self._p(f"{name}.bias"))

    def _apply_bn(self, name, x, training):
        s = self.store
        return ad.batchnorm(x, s.params[f"{name}.scale"], s.params[f"{name}.shift"],
                            s.buffers[f"{name}.running_mean"], s.buffers[f"{name}.running_var"], training)

    def _mlp(self, prefix, x, n_hidden):
        for i in range(n_hidden):
            x = ad.relu(self._apply_dense(f"{prefix}.fc{i}", x))
        return self._apply_dense(f"{prefix}.head", x)

    def _to_degrees(self, y):
        return ad.affine(y, OUTPUT_SCALE, OUTPUT_OFFSET)

    def _prepare(self, X):
        X = np.asarray(X)
        if X.ndim != 4 or X.shape[2:] != GRID_SHAPE:
            raise ValueError(f"expected windows shaped (N, H, 4, 7), got {X.shape}")
        if self.spec.is_sequence and X.shape[1] != self.spec.H:
            raise ValueError(f"{self.spec.arch} expects windows of H={self.spec.H}, got {X.shape[1]}")
        return X.astype(self._dtype) * self._dtype.type(INPUT_SCALE)

    # public ------------------------------------------------------------------
    def forward(self, X, training=False):
        """Unclamped angles (degrees) as a Tensor of shape (N, 10)."""
        return self._forward(self._prepare(X), training)

    def predict_batch(self, X, batch_size=256):
        """Clamped angles for a stack of windows, inference mode."""
        X = np.asarray(X)
        out = np.empty((len(X), N_JOINTS), dtype=self._dtype)
        for i in range(0, len(X), batch_size):
            out[i : i + batch_size] = self.forward(X[i : i + batch_size]).data
        return np.clip(out, 0.0, ANGLE_MAX)

    def n_params(self):
        return self.store.n_params()

    @property
    def dtype(self):
        return self._dtype

    def copy(self):
        new = object.__new__(type(self))
        new.spec = ModelSpec(self.spec.arch, self.spec.H, self.spec.seed, dict(self.spec.dims), self.spec.dtype)
        new.store = self.store.copy()
        new._dtype = self._dtype
        return new

    def state_dict(self):
        return self.store.state_dict()


class TCN(Model):
    """Per-frame spatial encoder shared over time, then dilated causal residual blocks."""

    def build(self):
        d = self.spec.dims
        ce, ct, k = d["enc_channels"], d["temporal_channels"], d["kernel_size"]
        self._uniform("enc.conv1.weight", (ce, 1, 3, 3), 9)
        self._zeros("enc.conv1.bias", (ce,))
        self._bn("enc.bn1", ce)
        self._uniform("enc.conv2.weight", (ce, ce, 3, 3), ce * 9)
        self._zeros("enc.conv2.bias", (ce,))
        self._bn("enc.bn2", ce)
        self._uniform("enc.skip.weight", (ce, 1, 1, 1), 1, gain=3.0)
        self._uniform("enc.lift.weight", (ce, 1, 1, 3), ce * 3, gain=3.0)
        self._zeros("enc.lift.bias", (1,))
        c_in = 49
        for b in range(d["n_blocks"]):
            p = f"tcn.block{b}"
            self._uniform(f"{p}.conv1.weight", (ct, c_in, k), c_in * k)
            self._zeros(f"{p}.conv1.bias", (ct,))
            self._bn(f"{p}.bn1", ct)
            self._uniform(f"{p}.conv2.weight", (ct, ct, k), ct * k)
            self._zeros(f"{p}.conv2.bias", (ct,))
            self._bn(f"{p}.bn2", ct)
            if c_in != ct:
                self._uniform(f"{p}.shortcut.weight", (ct, c_in, 1), c_in, gain=3.0)
                self._zeros(f"{p}.shortcut.bias", (ct,))
            c_in = ct
        self._dense("head", ct, N_JOINTS, gain=3.0)

    def encode(self, x, training):
        """(M, 1, 4, 7) frames -> (M, 1, 7, 7) feature maps."""
        p = self._p
        h = self._apply_bn("enc.bn1", ad.relu(ad.conv2d(x, p("enc.conv1.weight"), p("enc.conv1.bias"), padding=1)), training)
        h = self._apply_bn("enc.bn2", ad.relu(ad.conv2d(h, p("enc.conv2.weight"), p("enc.conv2.bias"), padding=1)), training)
        h = ad.add(h, ad.conv2d(x, p("enc.skip.weight")))
        return ad.conv2d_transposed(h, p("enc.lift.weight"), p("enc.lift.bias"), stride=(2, 1), padding=(0, 1))

    def _forward(self, x, training):
        n, H = x.shape[:2]
        feats = self.encode(x.reshape(n * H, 1, *GRID_SHAPE), training)
        seq = ad.transpose(ad.reshape(feats, (n, H, 49)), (0, 2, 1))
        p = self._p
        for b in range(self.spec.dims["n_blocks"]):
            pre, dil = f"tcn.block{b}", 2 ** b
            y = ad.conv1d_dilated_causal(seq, p(f"{pre}.conv1.weight"), p(f"{pre}.conv1.bias"), dil)
            y = self._apply_bn(f"{pre}.bn1", ad.relu(y), training)
            y = ad.conv1d_dilated_causal(y, p(f"{pre}.conv2.weight"), p(f"{pre}.conv2.bias"), dil)
            y = self._apply_bn(f"{pre}.bn2", ad.relu(y), training)
            if f"{pre}.shortcut.weight" in self.store:
                seq = ad.conv1d_dilated_causal(seq, p(f"{pre}.shortcut.weight"), p(f"{pre}.shortcut.bias"))
            seq = ad.add(y, seq)
        last = ad.index_axis1(ad.transpose(seq, (0, 2, 1)), H - 1)
        return self._to_degrees(self._apply_dense("head", last))

    def receptive_field(self):
        d = self.spec.dims
        return 1 + 2 * (d["kernel_size"] - 1) * sum(2 ** b for b in range(d["n_blocks"]))


class FCNN(Model):
    def build(self):
        d = self.spec.dims
        n_in = N_SENSORS
        for i in range(d["layers"]):
            self._dense(f"mlp.fc{i}", n_in, d["hidden"])
            n_in = d["hidden"]
        self._dense("mlp.head", n_in, N_JOINTS, gain=3.0)

    def _forward(self, x, training):
        flat = x[:, -1].reshape(len(x), N_SENSORS)
        return self._to_degrees(self._mlp("mlp", flat, self.spec.dims["layers"]))


class FCNN5(Model):
    """Five independent per-finger networks, each emitting (MCP, PIP)."""

    def build(self):
        d = self.spec.dims
        for f in range(5):
            n_in = N_SENSORS
            for i in range(d["layers"]):
                self._dense(f"finger{f}.fc{i}", n_in, d["hidden"])
                n_in = d["hidden"]
            self._dense(f"finger{f}.head", n_in, 2, gain=3.0)

    def _forward(self, x, training):
        flat = x[:, -1].reshape(len(x), N_SENSORS)
        outs = [self._mlp(f"finger{f}", flat, self.spec.dims["layers"]) for f in range(5)]
        return self._to_degrees(ad.concat(outs, axis=-1))


class CNN(Model):
    def build(self):
        d = self.spec.dims
        c = d["conv_channels"]
        self._uniform("conv1.weight", (c, 1, 3, 3), 9)
        self._zeros("conv1.bias", (c,))
        self._uniform("conv2.weight", (c, c, 3, 3), c * 9)
        self._zeros("conv2.bias", (c,))
        n_in = c * N_SENSORS
        for i, width in enumerate(d["fc"]):
            self._dense(f"mlp.fc{i}", n_in, width)
            n_in = width
        self._dense("mlp.head", n_in, N_JOINTS, gain=3.0)

    def _forward(self, x, training):
        p = self._p
        n = len(x)
        h = ad.relu(ad.conv2d(x[:, -1:], p("conv1.weight"), p("conv1.bias"), padding=1))
        h = ad.relu(ad.conv2d(h, p("conv2.weight"), p("conv2.bias"), padding=1))
        h = ad.reshape(h, (n, -1))
        return self._to_degrees(self._mlp("mlp", h, len(self.spec.dims["fc"])))


class LSTM(Model):
    """Stacked LSTM over flattened frames; the last hidden state feeds an MLP head."""

    def build(self):
        d = self.spec.dims
        hid = d["hidden"]
        bound = 1.0 / np.sqrt(hid)
        n_in = N_SENSORS
        for layer in range(d["layers"]):
            p = f"lstm{layer}"
            self.store.add_param(f"{p}.W_x", self._rng.uniform(-bound, bound, (4 * hid, n_in)).astype(self._dtype))
            self.store.add_param(f"{p}.W_h", self._rng.uniform(-bound, bound, (4 * hid, hid)).astype(self._dtype))
            bias = np.zeros(4 * hid, dtype=self._dtype)
            bias[hid : 2 * hid] = 1.0
            self.store.add_param(f"{p}.bias", bias)
            n_in = hid
        for i, width in enumerate(d["fc"]):
            self._dense(f"mlp.fc{i}", n_in, width)
            n_in = width
        self._dense("mlp.head", n_in, N_JOINTS, gain=3.0)

    def _forward(self, x, training):
        n, H = x.shape[:2]
        d = self.spec.dims
        hid = d["hidden"]
        seq = x.reshape(n, H, N_SENSORS)
        p = self._p
        hs = [ad.Tensor(np.zeros((n, hid), dtype=self._dtype)) for _ in range(d["layers"])]
        cs = [ad.Tensor(np.zeros((n, hid), dtype=self._dtype)) for _ in range(d["layers"])]
        for t in range(H):
            inp = ad.Tensor(np.ascontiguousarray(seq[:, t]))
            for layer in range(d["layers"]):
                pre = f"lstm{layer}"
                hs[layer], cs[layer] = ad.lstm_cell(inp, hs[layer], cs[layer], p(f"{pre}.W_x"), p(f"{pre}.W_h"), p(f"{pre}.bias"))
                inp = hs[layer]
        return self._to_degrees(self._mlp("mlp", hs[-1], len(d["fc"])))


_CLASSES = {"tcn": TCN, "fcnn": FCNN, "fcnn5": FCNN5, "cnn": CNN, "lstm": LSTM}


def build_model(spec):
    return _CLASSES[spec.arch](spec)


def build_tcn(spec=None, **kw):
    return build_model(spec or ModelSpec("tcn", **kw))


def build_fcnn(spec=None, **kw):
    return build_model(spec or ModelSpec("fcnn", **kw))


def build_fcnn5(spec=None, **kw):
    return build_model(spec or ModelSpec("fcnn5", **kw))


def build_cnn(spec=None, **kw):
    return build_model(spec or ModelSpec("cnn", **kw))


def build_lstm(spec=None, **kw):
    return build_model(spec or ModelSpec("lstm", **kw))


def _window_array(model, window):
    H = model.spec.H
    if isinstance(window, WindowSequence):
        frames = window.frames
    elif isinstance(window, CalibratedFrame):
        frames = window.values.reshape((1,) + GRID_SHAPE)
    else:
        frames = np.asarray(window)
        if frames.ndim == 1:
            frames = frames.reshape((1,) + GRID_SHAPE)
    if frames.ndim != 3 or frames.shape[1:] != GRID_SHAPE:
        raise ValueError(f"window must be shaped (H, 4, 7), got {frames.shape}")
    if model.spec.is_sequence and frames.shape[0] != H:
        raise ValueError(f"{model.spec.arch} needs a window of {H} frames, got {frames.shape[0]}")
    if not model.spec.is_sequence:
        frames = frames[-1:]
    return frames[None]


def predict(model, window):
    """Estimate the hand pose for one window (or one calibrated frame for instantaneous models)."""
    out = model.predict_batch(_window_array(model, window), batch_size=1)[0]
    return HandPose(out.astype(np.float64))


# -- checkpoints ----------------------------------------------------------------

CKPT_MAGIC = b"FMGCKPT1"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class CRCMismatchError(CheckpointError):
    pass


class ShapeInconsistencyError(CheckpointError):
    pass


class SpecMismatchError(CheckpointError):
    pass


def checkpoint_bytes(model):
    arch_tag = ARCH_TAGS[model.spec.arch]
    tensors = model.state_dict()
    parts = [CKPT_MAGIC, struct.pack("<IBII", CKPT_VERSION, arch_tag, model.spec.H, len(tensors))]
    for name, arr in tensors.items():
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def _parse_checkpoint(data):
    if len(data) < len(CKPT_MAGIC) or data[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise BadMagicError("not a checkpoint file (bad magic)")
    if len(data) < len(CKPT_MAGIC) + 13 + 4:
        raise ShapeInconsistencyError("checkpoint truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    pos = len(CKPT_MAGIC)
    version, tag, H, count = struct.unpack_from("<IBII", body, pos)
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, expected {CKPT_VERSION}")
    if zlib.crc32(body) != crc:
        raise CRCMismatchError("checkpoint CRC mismatch")
    pos += 13
    tags = {v: k for k, v in ARCH_TAGS.items()}
    if tag not in tags:
        raise SpecMismatchError(f"unknown architecture tag {tag}")
    tensors = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(dims)
            pos += 4 * size
            tensors[name] = arr.astype(np.float32)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise ShapeInconsistencyError(f"checkpoint tensor table is inconsistent: {exc}") from None
    if pos != len(body):
        raise ShapeInconsistencyError("trailing bytes after tensor table")
    return tags[tag], H, tensors


def _count(tensors, fmt):
    i = 0
    while fmt.format(i) in tensors:
        i += 1
    return i


def infer_dims(arch, tensors):
    """Recover architecture hyperparameters from tensor names and shapes."""
    try:
        if arch == "tcn":
            w = tensors["tcn.block0.conv1.weight"]
            return {"enc_channels": tensors["enc.conv1.weight"].shape[0], "temporal_channels": w.shape[0],
                    "kernel_size": w.shape[2], "n_blocks": _count(tensors, "tcn.block{}.conv1.weight")}
        if arch == "fcnn":
            return {"hidden": tensors["mlp.fc0.weight"].shape[0], "layers": _count(tensors, "mlp.fc{}.weight")}
        if arch == "fcnn5":
            return {"hidden": tensors["finger0.fc0.weight"].shape[0],
                    "layers": _count(tensors, "finger0.fc{}.weight")}
        if arch == "cnn":
            n = _count(tensors, "mlp.fc{}.weight")
            return {"conv_channels": tensors["conv1.weight"].shape[0],
                    "fc": tuple(tensors[f"mlp.fc{i}.weight"].shape[0] for i in range(n))}
        n = _count(tensors, "mlp.fc{}.weight")
        return {"hidden": tensors["lstm0.W_h"].shape[1], "layers": _count(tensors, "lstm{}.W_h"),
                "fc": tuple(tensors[f"mlp.fc{i}.weight"].shape[0] for i in range(n))}
    except KeyError as exc:
        raise ShapeInconsistencyError(f"checkpoint lacks tensor {exc}") from None


def model_from_bytes(data, expected_arch=None):
    arch, H, tensors = _parse_checkpoint(data)
    if expected_arch is not None and arch != expected_arch:
        raise SpecMismatchError(f"checkpoint holds a {arch} model, expected {expected_arch}")
    model = build_model(ModelSpec(arch, H=H, dims=infer_dims(arch, tensors)))
    try:
        model.store.load_state_dict(tensors)
    except (KeyError, ValueError) as exc:
        raise ShapeInconsistencyError(str(exc)) from None
    return model


def load_checkpoint(path, expected_arch=None):
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read(), expected_arch)
