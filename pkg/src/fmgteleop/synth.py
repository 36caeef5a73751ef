"""Seeded synthetic forearm-sensor sessions with known joint-angle ground truth.

Raw reading of sensor s at frame t::

    x_s(t) = rest_s + lowpass(sum_j A[s, j] * (sigmoid(q_j / 45 - 1) - sigmoid(-1))
                              + gain * sum_j A[s, j] * |dq_j/dt|)
             + offset_s + confound_s(t) + noise

rounded and clipped to the ADC range. The first-order low-pass filter
``y_t = (1 - alpha) y_{t-1} + alpha u_t`` and the velocity term make the
current reading depend on recent history, which is what gives windowed
models their edge over single-frame ones. Each session starts with relaxed
frames (q = 0) labelled as baseline; the per-session offset is constant over
the whole session, so baseline subtraction removes it.
"""

from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .signal import ADC_MAX, N_JOINTS, N_SENSORS, SAMPLE_RATE_HZ, SessionRecording, save_session, session_timestamps

N_INFORMATIVE = 18
COUPLING_RANGE = (120.0, 300.0)
REST_RANGE = (200.0, 400.0)
JOINTS_PER_SENSOR = (2, 3)
MIN_SENSORS_PER_JOINT = 3
PERIOD_RANGE_S = (2.0, 20.0)
CONFOUND_PERIOD_RANGE_S = (5.0, 30.0)

# bounds used by make_user_variant
VARIANT_COUPLING_SPREAD = 0.20
VARIANT_REST_SPREAD = 0.10
VARIANT_OFFSET_SPREAD = 0.20


@dataclass
class GeneratorConfig:
    seed: int = 7
    n_sessions: int = 15
    frames_per_session: int = 3000
    baseline_frames: int = 60
    coupling: np.ndarray = None  # (28, 10)
    rest_level: np.ndarray = None  # (28,)
    confound_loading: np.ndarray = None  # (28,)
    informative_sensors: tuple = ()  # 1-based
    velocity_gain: float = 0.001
    lag_alpha: float = 0.25
    session_offset_scale: float = 30.0
    noise_std: float = 8.0
    arm_confound_scale: float = 10.0

    def __post_init__(self):
        self.coupling = np.asarray(self.coupling, dtype=np.float64)
        self.rest_level = np.asarray(self.rest_level, dtype=np.float64)
        self.confound_loading = np.asarray(self.confound_loading, dtype=np.float64)
        self.informative_sensors = tuple(int(s) for s in self.informative_sensors)
        self.validate()

    def validate(self):
        if self.coupling.shape != (N_SENSORS, N_JOINTS):
            raise ValueError(f"coupling must be 28x10, got {self.coupling.shape}")
        if self.rest_level.shape != (N_SENSORS,) or self.confound_loading.shape != (N_SENSORS,):
            raise ValueError("rest_level and confound_loading need 28 values")
        if np.any(self.coupling < 0):
            raise ValueError("coupling weights must be non-negative")
        if any(not 1 <= s <= N_SENSORS for s in self.informative_sensors):
            raise ValueError("informative sensor index out of range")
        dead = np.ones(N_SENSORS, dtype=bool)
        dead[[s - 1 for s in self.informative_sensors]] = False
        if np.any(self.coupling[dead] != 0) or np.any(self.confound_loading[dead] != 0):
            raise ValueError("sensors outside informative_sensors must have zero coupling")
        if not 0.0 < self.lag_alpha <= 1.0:
            raise ValueError("lag_alpha must lie in (0, 1]")
        for name in ("noise_std", "session_offset_scale", "arm_confound_scale", "velocity_gain"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.frames_per_session < 1 or self.baseline_frames < 1 or self.n_sessions < 0:
            raise ValueError("session sizes must be positive")
        return self

    @property
    def uninformative_sensors(self):
        return tuple(s for s in range(1, N_SENSORS + 1) if s not in self.informative_sensors)


def make_config(seed=7, **overrides):
    """Default configuration; coupling structure is drawn from ``seed``."""
    rng = np.random.default_rng([seed, 0xC0])
    informative = np.sort(rng.choice(N_SENSORS, N_INFORMATIVE, replace=False)) + 1
    A = np.zeros((N_SENSORS, N_JOINTS))
    links = np.zeros((N_SENSORS, N_JOINTS), dtype=bool)
    rows = informative - 1
    # Every joint gets MIN_SENSORS_PER_JOINT sensors, then every sensor at least two joints.
    for j in rng.permutation(N_JOINTS):
        free = rows[links[rows].sum(axis=1) < JOINTS_PER_SENSOR[1]]
        links[rng.choice(free, MIN_SENSORS_PER_JOINT, replace=False), j] = True
    for s in rows:
        while links[s].sum() < JOINTS_PER_SENSOR[0]:
            links[s, rng.integers(N_JOINTS)] = True
    A[links] = rng.uniform(*COUPLING_RANGE, size=int(links.sum()))
    rest = rng.uniform(*REST_RANGE, size=N_SENSORS)
    loading = np.zeros(N_SENSORS)
    loading[informative - 1] = rng.uniform(-1.0, 1.0, size=len(informative))
    cfg = dict(seed=seed, coupling=A, rest_level=rest, confound_loading=loading,
               informative_sensors=tuple(int(s) for s in informative))
    cfg.update(overrides)
    return GeneratorConfig(**cfg)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _sinusoid_mix(rng, n_series, t, period_range, n_terms=3):
    """Unit-variance sums of random-phase sinusoids and their time derivatives."""
    periods = rng.uniform(*period_range, size=(n_series, n_terms))
    phases = rng.uniform(0, 2 * np.pi, size=(n_series, n_terms))
    amps = rng.uniform(0.5, 1.0, size=(n_series, n_terms))
    norm = np.sqrt((amps ** 2).sum(axis=1) / 2)
    w = 2 * np.pi / periods
    arg = t[:, None, None] * w[None] + phases[None]
    z = (amps * np.sin(arg)).sum(axis=2) / norm
    dz = (amps * w * np.cos(arg)).sum(axis=2) / norm
    return z, dz


def joint_trajectories(rng, n_frames, rate_hz=SAMPLE_RATE_HZ):
    """Smooth joint angles in (0, 90) degrees and their velocities (deg/s)."""
    t = np.arange(n_frames) / rate_hz
    z, dz = _sinusoid_mix(rng, N_JOINTS, t, PERIOD_RANGE_S)
    th = np.tanh(0.9 * z)
    q = 45.0 * (1.0 + th)
    qdot = 45.0 * 0.9 * (1.0 - th ** 2) * dz
    return q, qdot


def sensor_drive(config, q, qdot):
    """Pre-filter drive ``u`` (frames x 28) for given angles and velocities."""
    A = config.coupling
    pos = _sigmoid(q / 45.0 - 1.0) - _sigmoid(-1.0)
    return pos @ A.T + config.velocity_gain * (np.abs(qdot) @ A.T)


def generate_session(config, session_index):
    """One recording plus its noise-free joint angles (also stored as the pose columns)."""
    rng = np.random.default_rng([config.seed, session_index, 0x5E])
    nb, na = config.baseline_frames, config.frames_per_session
    q, qdot = joint_trajectories(rng, na)
    q_all = np.vstack([np.zeros((nb, N_JOINTS)), q])
    qdot_all = np.vstack([np.zeros((nb, N_JOINTS)), qdot])
    u = sensor_drive(config, q_all, qdot_all)
    a = config.lag_alpha
    y = lfilter([a], [1.0, -(1.0 - a)], u, axis=0)
    offset = rng.normal(0.0, config.session_offset_scale, size=N_SENSORS)
    c, _ = _sinusoid_mix(rng, 1, np.arange(na) / SAMPLE_RATE_HZ, CONFOUND_PERIOD_RANGE_S, n_terms=2)
    confound = np.vstack([np.zeros((nb, 1)), c]) * (config.arm_confound_scale * config.confound_loading)[None]
    noise = rng.normal(0.0, config.noise_std, size=(nb + na, N_SENSORS))
    x = config.rest_level[None] + y + offset[None] + confound + noise
    raw = np.clip(np.rint(x), 0, ADC_MAX).astype(np.int64)
    session = SessionRecording(
        session_id=f"s{config.seed}_{session_index:03d}",
        timestamps_us=session_timestamps(nb + na),
        raw=raw,
        poses=q_all,
        is_baseline=np.arange(nb + na) < nb,
    )
    return session, q_all.copy()


def generate_sessions(config, indices=None):
    indices = range(config.n_sessions) if indices is None else indices
    return [generate_session(config, i)[0] for i in indices]


def make_user_variant(config, user_seed):
    """Perturb coupling, rest levels and offset scale to mimic a different wearer."""
    rng = np.random.default_rng([config.seed, user_seed, 0x05E4])
    A = config.coupling * rng.uniform(1 - VARIANT_COUPLING_SPREAD, 1 + VARIANT_COUPLING_SPREAD, size=config.coupling.shape)
    rest = np.clip(config.rest_level * rng.uniform(1 - VARIANT_REST_SPREAD, 1 + VARIANT_REST_SPREAD, size=N_SENSORS),
                   0, ADC_MAX)
    offset = config.session_offset_scale * rng.uniform(1 - VARIANT_OFFSET_SPREAD, 1 + VARIANT_OFFSET_SPREAD)
    seed = int(np.random.SeedSequence([config.seed, user_seed]).generate_state(1)[0] % (2 ** 31))
    return replace(config, seed=seed, coupling=A, rest_level=rest, session_offset_scale=float(offset))


def write_sessions(config, out_dir, indices=None, prefix="session"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    indices = range(config.n_sessions) if indices is None else indices
    paths = []
    for i in indices:
        session, _ = generate_session(config, i)
        path = out / f"{prefix}_{i:03d}.csv"
        save_session(session, path)
        paths.append(path)
    return paths


# -- key=value serialization -------------------------------------------------------

_ARRAY_KEYS = {"coupling": (N_SENSORS, N_JOINTS), "rest_level": (N_SENSORS,), "confound_loading": (N_SENSORS,)}


def config_to_text(config):
    lines = []
    for f in fields(config):
        v = getattr(config, f.name)
        if f.name in _ARRAY_KEYS:
            v = ",".join(repr(float(a)) for a in np.asarray(v).ravel())
        elif f.name == "informative_sensors":
            v = ",".join(str(s) for s in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def config_from_mapping(values, base=None):
    """Build a config from string values; unspecified keys come from ``base`` (or defaults)."""
    known = {f.name: f for f in fields(GeneratorConfig)}
    unknown = set(values) - set(known)
    if unknown:
        raise KeyError(f"unknown generator key(s): {', '.join(sorted(unknown))}")
    seed = int(values["seed"]) if "seed" in values else (base.seed if base is not None else 7)
    if base is None or base.seed != seed:
        base = make_config(seed)
    parsed = {}
    for key, raw in values.items():
        if key in _ARRAY_KEYS:
            arr = np.array([float(a) for a in str(raw).split(",")]).reshape(_ARRAY_KEYS[key])
            parsed[key] = arr
        elif key == "informative_sensors":
            parsed[key] = tuple(int(a) for a in str(raw).split(",") if a.strip())
        elif key in ("seed", "n_sessions", "frames_per_session", "baseline_frames"):
            parsed[key] = int(raw)
        else:
            parsed[key] = float(raw)
    return replace(base, **parsed)


def save_config(config, path):
    Path(path).write_text(config_to_text(config), encoding="utf-8")
