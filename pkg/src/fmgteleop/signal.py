"""Sensor frames, session recordings, baseline calibration and windowing.

A session is stored column-wise (numpy arrays) rather than as a list of frame
objects; the single-frame types exist for the streaming path and for callers
that work one reading at a time.
"""

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

N_SENSORS = 28
N_JOINTS = 10
GRID_SHAPE = (4, 7)
ADC_MAX = 1023
ANGLE_MAX = 120.0
SAMPLE_RATE_HZ = 33.0
DEFAULT_NOISE_SIGMA = 5.0

# Baselines are rounded to this grid so that raw - baseline is exact in float32.
BASELINE_QUANTUM = 2.0 ** -12

HEADER_MAGIC = "# fmgsession v1"
SENSOR_COLS = [f"s{i:02d}" for i in range(1, N_SENSORS + 1)]
JOINT_COLS = [f"q{i:02d}" for i in range(1, N_JOINTS + 1)]
CSV_COLUMNS = ["t_us", "phase"] + SENSOR_COLS + JOINT_COLS

JOINT_NAMES = [f"{j}_{f}" for f in ("thumb", "index", "middle", "ring", "little") for j in ("mcp", "pip")]


class SessionFormatError(ValueError):
    """Malformed or invalid session data; ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def _vector(values, n, what):
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape != (n,):
        raise ValueError(f"{what} needs exactly {n} values, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class FmgFrame:
    timestamp_us: int
    values: np.ndarray

    def __post_init__(self):
        v = _vector(self.values, N_SENSORS, "FmgFrame")
        if v.min() < 0 or v.max() > ADC_MAX:
            raise ValueError("FmgFrame values must lie in [0, 1023]")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class BaselineVector:
    values: np.ndarray

    def __post_init__(self):
        v = _vector(self.values, N_SENSORS, "BaselineVector")
        if v.min() < 0 or v.max() > ADC_MAX:
            raise ValueError("baseline values must lie in [0, 1023]")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class CalibratedFrame:
    timestamp_us: int
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _vector(self.values, N_SENSORS, "CalibratedFrame"))


@dataclass(frozen=True)
class HandPose:
    """Ten joint angles in degrees: (MCP, PIP) for thumb, index, middle, ring, little."""

    angles_deg: np.ndarray

    def __post_init__(self):
        a = _vector(self.angles_deg, N_JOINTS, "HandPose")
        if not np.all(np.isfinite(a)) or a.min() < 0 or a.max() > ANGLE_MAX:
            raise ValueError("HandPose angles must lie in [0, 120] degrees")
        object.__setattr__(self, "angles_deg", a)


@dataclass(frozen=True)
class WindowSequence:
    """H spatial frames (oldest first) and the pose at the last one."""

    frames: np.ndarray  # (H, 4, 7)
    label_pose: np.ndarray  # (10,)
    end_timestamp_us: int = 0

    @property
    def H(self):
        return self.frames.shape[0]


@dataclass
class SessionRecording:
    session_id: str
    timestamps_us: np.ndarray  # (N,) int64
    raw: np.ndarray  # (N, 28) int
    poses: np.ndarray  # (N, 10) float64
    is_baseline: np.ndarray  # (N,) bool
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.timestamps_us = np.asarray(self.timestamps_us, dtype=np.int64)
        self.raw = np.asarray(self.raw, dtype=np.int64)
        self.poses = np.asarray(self.poses, dtype=np.float64)
        self.is_baseline = np.asarray(self.is_baseline, dtype=bool)

    def __len__(self):
        return len(self.timestamps_us)

    def validate(self):
        n = len(self.timestamps_us)
        if self.raw.shape != (n, N_SENSORS) or self.poses.shape != (n, N_JOINTS) or self.is_baseline.shape != (n,):
            raise SessionFormatError("frames, poses and phase labels differ in length")
        if not self.is_baseline.any():
            raise SessionFormatError("session has no baseline rows")
        n_base = int(self.is_baseline.sum())
        if not self.is_baseline[:n_base].all():
            first_active = int(np.argmin(self.is_baseline))
            late = first_active + int(np.argmax(self.is_baseline[first_active:]))
            raise SessionFormatError("baseline row after active row", line=late + 3)
        if n > 1 and np.any(np.diff(self.timestamps_us) <= 0):
            raise SessionFormatError("timestamps are not strictly increasing")
        if self.raw.min(initial=0) < 0 or self.raw.max(initial=0) > ADC_MAX:
            raise SessionFormatError("sensor value outside [0, 1023]")
        if self.poses.size and (self.poses.min() < 0 or self.poses.max() > ANGLE_MAX):
            raise SessionFormatError("joint angle outside [0, 120]")
        return self

    @property
    def n_baseline(self):
        return int(self.is_baseline.sum())

    def baseline_rows(self):
        return self.raw[self.is_baseline]

    def active(self):
        """(timestamps, raw, poses) of the active phase."""
        m = ~self.is_baseline
        return self.timestamps_us[m], self.raw[m], self.poses[m]

    def frames(self):
        return [FmgFrame(int(t), r) for t, r in zip(self.timestamps_us, self.raw)]

    def equals(self, other):
        return (
            self.session_id == other.session_id
            and np.array_equal(self.timestamps_us, other.timestamps_us)
            and np.array_equal(self.raw, other.raw)
            and np.array_equal(self.poses, other.poses)
            and np.array_equal(self.is_baseline, other.is_baseline)
        )


# -- calibration --------------------------------------------------------------

def compute_baseline(frames):
    """Componentwise mean of relaxed-arm readings, on a 2**-12 grid."""
    if isinstance(frames, np.ndarray):
        arr = np.asarray(frames, dtype=np.float64).reshape(-1, N_SENSORS)
    else:
        frames = list(frames)
        arr = np.array([f.values if isinstance(f, FmgFrame) else f for f in frames], dtype=np.float64)
        arr = arr.reshape(-1, N_SENSORS)
    if arr.shape[0] == 0:
        raise ValueError("no baseline frames")
    mean = arr.mean(axis=0)
    return BaselineVector(np.round(mean / BASELINE_QUANTUM) * BASELINE_QUANTUM)


def calibrate(frame, baseline):
    b = baseline.values if isinstance(baseline, BaselineVector) else _vector(baseline, N_SENSORS, "baseline")
    return CalibratedFrame(frame.timestamp_us, frame.values - b)


def calibrate_array(raw, baseline):
    """Vectorised :func:`calibrate`: (N, 28) raw counts -> float32 calibrated values."""
    b = baseline.values if isinstance(baseline, BaselineVector) else np.asarray(baseline)
    return (np.asarray(raw, dtype=np.float64) - b).astype(np.float32)


def reshape_spatial(frame):
    """Sensor s (1-based) goes to row (s-1)//7, column (s-1)%7."""
    values = frame.values if isinstance(frame, CalibratedFrame) else np.asarray(frame)
    if values.shape[-1] != N_SENSORS:
        raise ValueError(f"expected {N_SENSORS} values, got {values.shape[-1]}")
    return values.reshape(values.shape[:-1] + GRID_SHAPE)


def flatten_spatial(grid):
    grid = np.asarray(grid)
    if grid.shape[-2:] != GRID_SHAPE:
        raise ValueError(f"expected trailing shape {GRID_SHAPE}, got {grid.shape}")
    return grid.reshape(grid.shape[:-2] + (N_SENSORS,))


def sensor_position(sensor):
    """Grid (row, col) of a 1-based sensor index."""
    if not 1 <= sensor <= N_SENSORS:
        raise ValueError(f"sensor index {sensor} out of range")
    return (sensor - 1) // GRID_SHAPE[1], (sensor - 1) % GRID_SHAPE[1]


# -- windowing ----------------------------------------------------------------

def window_count(n_active, H, stride=1):
    if n_active < H:
        return 0
    return (n_active - H) // stride + 1


def window_arrays(session, baseline, H, stride=1, raw_override=None):
    """Array form of :func:`make_windows`.

    Returns ``X`` (n, H, 4, 7) float32, ``Y`` (n, 10) float64 and the
    timestamps of the last frame of each window. ``raw_override`` replaces the
    active-phase raw rows (used by permutation importance).
    """
    if H < 1 or stride < 1:
        raise ValueError("H and stride must be >= 1")
    ts, raw, poses = session.active()
    if raw_override is not None:
        raw = raw_override
    return windows_from_calibrated(calibrate_array(raw, baseline), poses, ts, H, stride)


def windows_from_calibrated(cal, poses, timestamps_us, H, stride=1):
    """Slice calibrated active frames (n, 28) into windows; see :func:`window_arrays`."""
    if H < 1 or stride < 1:
        raise ValueError("H and stride must be >= 1")
    n = window_count(len(cal), H, stride)
    if n == 0:
        return (np.zeros((0, H) + GRID_SHAPE, np.float32), np.zeros((0, N_JOINTS)), np.zeros(0, np.int64))
    grid = reshape_spatial(np.asarray(cal, dtype=np.float32))
    starts = np.arange(n) * stride
    idx = starts[:, None] + np.arange(H)[None, :]
    last = starts + H - 1
    return grid[idx], np.asarray(poses)[last], np.asarray(timestamps_us)[last]


def make_windows(session, baseline, H, stride=1):
    X, Y, T = window_arrays(session, baseline, H, stride)
    return [WindowSequence(x, y, int(t)) for x, y, t in zip(X, Y, T)]


def add_noise(window, sigma, seed):
    """Zero-mean Gaussian jitter on every grid cell; the label is untouched."""
    if sigma < 0:
        raise ValueError("noise sigma must be non-negative")
    if sigma == 0:
        return window
    rng = np.random.default_rng(seed)
    noisy = window.frames + rng.normal(0.0, sigma, size=window.frames.shape).astype(window.frames.dtype)
    return WindowSequence(noisy, window.label_pose, window.end_timestamp_us)


def add_noise_array(X, sigma, rng):
    if sigma < 0:
        raise ValueError("noise sigma must be non-negative")
    if sigma == 0:
        return X
    return X + rng.normal(0.0, sigma, size=X.shape).astype(X.dtype)


# -- CSV I/O --------------------------------------------------------------------

def _fmt_angle(v):
    return repr(float(v))


def session_to_csv(session):
    buf = io.StringIO()
    buf.write(HEADER_MAGIC + "\n")
    buf.write(",".join(CSV_COLUMNS) + "\n")
    for t, base, raw, pose in zip(session.timestamps_us, session.is_baseline, session.raw, session.poses):
        row = [str(int(t)), "baseline" if base else "active"]
        row += [str(int(v)) for v in raw]
        row += [_fmt_angle(v) for v in pose]
        buf.write(",".join(row) + "\n")
    return buf.getvalue()


def save_session(session, path):
    session.validate()
    Path(path).write_text(session_to_csv(session), encoding="utf-8", newline="\n")


def parse_session(text, session_id="session"):
    lines = text.split("\n")
    if not lines or lines[0].strip() != HEADER_MAGIC:
        raise SessionFormatError(f"missing {HEADER_MAGIC!r} header", line=1)
    if len(lines) < 2 or lines[1].strip().split(",") != CSV_COLUMNS:
        raise SessionFormatError("unexpected column header", line=2)
    ts, raws, poses, phases = [], [], [], []
    seen_active = False
    for lineno, row in enumerate(csv.reader(lines[2:]), start=3):
        if not row:
            continue
        if len(row) != len(CSV_COLUMNS):
            raise SessionFormatError(f"expected {len(CSV_COLUMNS)} columns, found {len(row)}", line=lineno)
        try:
            t = int(row[0])
        except ValueError:
            raise SessionFormatError(f"bad timestamp {row[0]!r}", line=lineno) from None
        phase = row[1]
        if phase not in ("baseline", "active"):
            raise SessionFormatError(f"unknown phase {phase!r}", line=lineno)
        if phase == "baseline" and seen_active:
            raise SessionFormatError("baseline row after active row", line=lineno)
        seen_active |= phase == "active"
        try:
            raw = [int(v) for v in row[2 : 2 + N_SENSORS]]
        except ValueError:
            raise SessionFormatError("sensor values must be integers", line=lineno) from None
        if min(raw) < 0 or max(raw) > ADC_MAX:
            raise SessionFormatError("sensor value outside [0, 1023]", line=lineno)
        try:
            pose = [float(v) for v in row[2 + N_SENSORS :]]
        except ValueError:
            raise SessionFormatError("joint angles must be numbers", line=lineno) from None
        if not all(math.isfinite(a) and 0.0 <= a <= ANGLE_MAX for a in pose):
            raise SessionFormatError("joint angle outside [0, 120]", line=lineno)
        if ts and t <= ts[-1]:
            raise SessionFormatError("timestamps are not strictly increasing", line=lineno)
        ts.append(t)
        phases.append(phase == "baseline")
        raws.append(raw)
        poses.append(pose)
    if not phases or not phases[0]:
        raise SessionFormatError("session has no baseline rows")
    return SessionRecording(
        session_id,
        np.array(ts, dtype=np.int64),
        np.array(raws, dtype=np.int64).reshape(-1, N_SENSORS),
        np.array(poses, dtype=np.float64).reshape(-1, N_JOINTS),
        np.array(phases, dtype=bool),
    )


def load_session(path):
    path = Path(path)
    return parse_session(path.read_text(encoding="utf-8"), session_id=path.stem)


def load_sessions(directory):
    """All ``*.csv`` sessions in a directory, sorted by file name."""
    paths = sorted(Path(directory).glob("*.csv"))
    if not paths:
        raise SessionFormatError(f"no session CSV files in {directory}")
    return [load_session(p) for p in paths]


def session_timestamps(n, start_us=0, rate_hz=SAMPLE_RATE_HZ):
    return start_us + np.round(np.arange(n) * (1e6 / rate_hz)).astype(np.int64)
