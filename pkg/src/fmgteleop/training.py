"""Training, fine-tuning, evaluation, benchmarking and permutation importance."""

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .models import build_model
from .signal import (N_JOINTS, JOINT_NAMES, N_SENSORS, add_noise_array, calibrate_array, compute_baseline,
                     window_arrays, windows_from_calibrated)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 60
    patience: int = 8
    noise_sigma: float = 5.0
    seed: int = 0
    val_fraction: float = 0.2
    H: int = None  # None: the model's own window length
    stride: int = 4
    lr_decay: float = 0.5  # multiply lr by this after lr_patience epochs without a new best
    lr_patience: int = 2

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch statistics need two samples)")
        if self.max_epochs < 0 or self.patience < 1 or self.stride < 1:
            raise ValueError("max_epochs >= 0, patience >= 1 and stride >= 1 required")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0 < self.lr_decay <= 1 or self.lr_patience < 1:
            raise ValueError("lr_decay must lie in (0, 1] and lr_patience >= 1")


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    val_mae: float


# -- data -----------------------------------------------------------------------

def session_windows(sessions, H, stride):
    """Stacked windows of several sessions, each calibrated with its own baseline."""
    parts = [window_arrays(s, compute_baseline(s.baseline_rows()), H, stride) for s in sessions]
    if not parts:
        return np.zeros((0, H, 4, 7), np.float32), np.zeros((0, N_JOINTS))
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def split_sessions(sessions, val_fraction, seed):
    """Session-disjoint train/validation split (validation empty for a single session)."""
    n = len(sessions)
    n_val = 0 if n < 2 or val_fraction == 0 else min(n - 1, max(1, round(val_fraction * n)))
    order = np.random.default_rng([seed, 0x5A]).permutation(n)
    val = sorted(order[:n_val])
    train = sorted(order[n_val:])
    return [sessions[i] for i in train], [sessions[i] for i in val]


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    bounds = list(range(0, n, batch_size)) + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        del bounds[-2]  # a lone sample cannot form batch statistics
    return [perm[a:b] for a, b in zip(bounds[:-1], bounds[1:])]


def _mae(model, X, Y, batch_size=256):
    if len(X) == 0:
        return math.nan
    return float(np.mean(np.abs(model.predict_batch(X, batch_size) - Y)))


def _run_epoch(model, X, Y, batch_size, lr, noise_sigma, rng, epoch):
    losses = []
    for idx in _batches(len(X), batch_size, rng):
        Xb = add_noise_array(X[idx], noise_sigma, rng)
        loss = ad.mse_loss(model.forward(Xb, training=True), Y[idx].astype(model.dtype))
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDivergedError(
                f"non-finite loss at epoch {epoch}, batch {len(losses)} (lr={lr:g}); "
                f"last finite loss {losses[-1] if losses else 'n/a'}")
        model.store.zero_grad()
        loss.backward()
        ad.adam_step(model.store, lr=lr)
        losses.append(value * len(idx))
    return math.fsum(losses) / len(X)


def train(model, sessions, config=None, log=None):
    """Adam on mean-squared angle error with session-held-out early stopping.

    Returns ``(best_model, history)``. ``history[0]`` is the untrained model
    (epoch 0, training MSE measured without noise). Every ``lr_patience``
    epochs without a new best validation MAE the learning rate is multiplied
    by ``lr_decay``; after ``patience`` such epochs training stops. With no
    validation sessions the training MSE plays that role.
    """
    config = config or TrainConfig()
    if not sessions:
        raise ValueError("train needs at least one session")
    H = config.H or model.spec.H
    train_s, val_s = split_sessions(list(sessions), config.val_fraction, config.seed)
    X, Y = session_windows(train_s, H, config.stride)
    if len(X) < 2:
        raise ValueError("training set has fewer than two windows")
    Xv, Yv = session_windows(val_s, H, config.stride)
    rng = np.random.default_rng(config.seed)
    model = model.copy()
    model.store.adam.clear()

    def score(train_mse):
        return _mae(model, Xv, Yv) if len(Xv) else train_mse

    mse0 = float(np.mean((model.predict_batch(X) - Y) ** 2))
    history = [EpochRecord(0, mse0, score(mse0))]
    best, best_state, since = history[0].val_mae, model.store.copy(), 0
    lr = config.lr
    for epoch in range(1, config.max_epochs + 1):
        train_mse = _run_epoch(model, X, Y, config.batch_size, lr, config.noise_sigma, rng, epoch)
        rec = EpochRecord(epoch, train_mse, score(train_mse))
        history.append(rec)
        if log:
            log(f"epoch {epoch:3d}  lr {lr:.2e}  train_mse {rec.train_mse:9.3f}  val_mae {rec.val_mae:7.3f}")
        if rec.val_mae < best:
            best, best_state, since = rec.val_mae, model.store.copy(), 0
        else:
            since += 1
            if since >= config.patience:
                break
            if since % config.lr_patience == 0:
                lr *= config.lr_decay
    model.store = best_state
    model.store.adam.clear()
    return model, history


def finetune(model, sessions, lr=1e-5, epochs=8, batch_size=16, stride=1, noise_sigma=5.0, seed=0, H=None):
    """Continue training every parameter on new data for exactly ``epochs`` passes."""
    model = model.copy()
    model.store.adam.clear()
    H = H or model.spec.H
    X, Y = session_windows(list(sessions), H, stride)
    if len(X) < 2 or epochs == 0:
        return model
    rng = np.random.default_rng([seed, 0xF1])
    for epoch in range(1, epochs + 1):
        _run_epoch(model, X, Y, batch_size, lr, noise_sigma, rng, epoch)
    model.store.adam.clear()
    return model


# -- evaluation -----------------------------------------------------------------

@dataclass
class EvalReport:
    errors: np.ndarray  # (n_windows, 10) absolute errors in degrees
    per_joint_mae: np.ndarray = field(init=False)
    per_joint_std: np.ndarray = field(init=False)
    mean: float = field(init=False)
    std: float = field(init=False)

    def __post_init__(self):
        e = np.asarray(self.errors, dtype=np.float64).reshape(-1, N_JOINTS)
        self.errors = e
        # fsum keeps the aggregates independent of sample order
        self.per_joint_mae = np.array([_fmean(e[:, j]) for j in range(N_JOINTS)])
        self.per_joint_std = np.array([_fstd(e[:, j]) for j in range(N_JOINTS)])
        self.mean = _fmean(e.ravel())
        self.std = _fstd(e.ravel())

    @property
    def grid(self):
        """Per-joint MAE as rows (MCP, PIP) by columns (thumb .. little)."""
        return self.per_joint_mae.reshape(5, 2).T

    @property
    def n_samples(self):
        return len(self.errors)


def _fmean(a):
    return math.fsum(a) / len(a) if len(a) else math.nan


def _fstd(a):
    if not len(a):
        return math.nan
    m = _fmean(a)
    return math.sqrt(math.fsum((np.asarray(a) - m) ** 2) / len(a))


def evaluate(model, sessions, H=None, batch_size=256, stride=1):
    """Per-window absolute angle errors on stride-1 test windows.

    Batching changes floating-point summation order inside the matrix
    products; ``batch_size=1`` reproduces window-at-a-time inference exactly.
    """
    H = H or model.spec.H
    parts = []
    for s in sessions:
        X, Y, _ = window_arrays(s, compute_baseline(s.baseline_rows()), H, stride)
        if len(X):
            parts.append(np.abs(model.predict_batch(X, batch_size).astype(np.float64) - Y))
    if not parts:
        raise ValueError("no test windows")
    return EvalReport(np.concatenate(parts))


@dataclass
class BenchmarkEntry:
    arch: str
    model: object
    history: list
    report: EvalReport


def benchmark(specs, train_sessions, test_sessions, config=None, log=None):
    """Train and evaluate each spec with the same data and training seed; keyed by arch."""
    config = config or TrainConfig()
    results = {}
    for spec in specs:
        if log:
            log(f"training {spec.arch}")
        model, history = train(build_model(spec), train_sessions, config, log=log)
        results[spec.arch] = BenchmarkEntry(spec.arch, model, history, evaluate(model, test_sessions))
    return dict(sorted(results.items()))


# -- permutation importance --------------------------------------------------------

def permutation_importance(model, sessions, repeats=3, seed=0, stride=1, batch_size=256, H=None):
    """Relative error increase (percent) when one sensor's calibrated values are shuffled.

    Values are shuffled across every active frame of the test set before
    windowing, so a window sees a scrambled history of that sensor.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    H = H or model.spec.H
    cal, poses, ts = [], [], []
    for s in sessions:
        t, raw, p = s.active()
        cal.append(calibrate_array(raw, compute_baseline(s.baseline_rows())))
        poses.append(p)
        ts.append(t)
    sizes = np.cumsum([len(c) for c in cal])[:-1]
    pooled = np.concatenate(cal)

    def error(data):
        errs = []
        for c, p, t in zip(np.split(data, sizes), poses, ts):
            X, Y, _ = windows_from_calibrated(c, p, t, H, stride)
            if len(X):
                errs.append(np.abs(model.predict_batch(X, batch_size).astype(np.float64) - Y))
        return _fmean(np.concatenate(errs).ravel())

    base = error(pooled)
    scores = np.zeros(N_SENSORS)
    for i in range(N_SENSORS):
        e = []
        for r in range(repeats):
            rng = np.random.default_rng([seed, i, r])
            shuffled = pooled.copy()
            shuffled[:, i] = pooled[rng.permutation(len(pooled)), i]
            e.append(error(shuffled))
        scores[i] = (_fmean(e) - base) / base * 100.0
    return scores


# -- reports --------------------------------------------------------------------

def report_csv(reports):
    """``model,joint,mae_deg,std_deg`` rows; joint ``all`` holds the pooled figures."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "joint", "mae_deg", "std_deg"])
    for name, rep in reports.items():
        for j, joint in enumerate(JOINT_NAMES):
            w.writerow([name, joint, f"{rep.per_joint_mae[j]:.6f}", f"{rep.per_joint_std[j]:.6f}"])
        w.writerow([name, "all", f"{rep.mean:.6f}", f"{rep.std:.6f}"])
    return buf.getvalue()


def history_csv(history):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_mse", "val_mae"])
    for r in history:
        w.writerow([r.epoch, f"{r.train_mse:.6f}", f"{r.val_mae:.6f}"])
    return buf.getvalue()


def format_table(reports):
    lines = [f"{'model':<8} {'angle error (deg)':>20}"]
    for name, rep in reports.items():
        lines.append(f"{name:<8} {rep.mean:>10.2f} +/- {rep.std:<6.2f}")
    return "\n".join(lines)


def format_grid(report):
    fingers = ("thumb", "index", "middle", "ring", "little")
    lines = ["      " + "".join(f"{f:>9}" for f in fingers)]
    for label, row in zip(("MCP", "PIP"), report.grid):
        lines.append(f"{label:<6}" + "".join(f"{v:>9.2f}" for v in row))
    return "\n".join(lines)
