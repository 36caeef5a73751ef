"""Mapping of estimated hand poses to robot-hand joint commands.

Each robot finger has four joints in the order MCP, PIP, DIP, abduction.
DIP follows PIP through the fixed synergy ratio 2/3 and abduction is held
at a configured constant. A four-finger hand simply ignores the little
finger.
"""

from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError, check_keys, format_kv, load_kv
from .signal import HandPose

FINGERS = ("thumb", "index", "middle", "ring", "little")
JOINT_KINDS = ("mcp", "pip", "dip", "abd")


def joint_names(n_fingers):
    return [f"{f}_{k}" for f in FINGERS[:n_fingers] for k in JOINT_KINDS]


@dataclass(frozen=True)
class RobotHandConfig:
    n_fingers: int = 4
    lower: tuple = None  # per joint, degrees
    upper: tuple = None
    abduction: tuple = None  # per finger, degrees
    max_speed: float = 300.0  # deg/s

    def __post_init__(self):
        if self.n_fingers not in (4, 5):
            raise ValueError("n_fingers must be 4 or 5")
        n = 4 * self.n_fingers
        lower = np.zeros(n) if self.lower is None else np.asarray(self.lower, dtype=np.float64)
        upper = np.full(n, 110.0) if self.upper is None else np.asarray(self.upper, dtype=np.float64)
        abd = np.zeros(self.n_fingers) if self.abduction is None else np.asarray(self.abduction, dtype=np.float64)
        if lower.shape != (n,) or upper.shape != (n,):
            raise ValueError(f"joint limits need {n} values")
        if abd.shape != (self.n_fingers,):
            raise ValueError(f"abduction needs {self.n_fingers} values")
        if np.any(lower > upper):
            raise ValueError("joint limit min exceeds max")
        if not self.max_speed > 0:
            raise ValueError("max_speed must be positive")
        object.__setattr__(self, "lower", tuple(lower))
        object.__setattr__(self, "upper", tuple(upper))
        object.__setattr__(self, "abduction", tuple(abd))

    @property
    def n_joints(self):
        return 4 * self.n_fingers

    def limits(self):
        return np.array(self.lower), np.array(self.upper)


@dataclass(frozen=True)
class JointCommand:
    timestamp_us: int
    targets: np.ndarray = field(compare=False)

    def __post_init__(self):
        t = np.asarray(self.targets, dtype=np.float64)
        if t.shape not in ((16,), (20,)):
            raise ValueError(f"joint command needs 16 or 20 targets, got {t.shape}")
        object.__setattr__(self, "targets", t)

    def __eq__(self, other):
        return (isinstance(other, JointCommand) and self.timestamp_us == other.timestamp_us
                and np.array_equal(self.targets, other.targets))


def dip_from_pip(pip):
    # 2*pip is exact, so the single division gives the correctly rounded 2/3 * pip
    return 2.0 * pip / 3.0


def unclamped_targets(angles, config):
    """Synergy mapping before clamping: (MCP, PIP, 2/3 PIP, abduction) per finger."""
    angles = np.asarray(angles, dtype=np.float64)
    out = np.empty(config.n_joints)
    for f in range(config.n_fingers):
        mcp, pip = angles[2 * f], angles[2 * f + 1]
        out[4 * f : 4 * f + 4] = (mcp, pip, dip_from_pip(pip), config.abduction[f])
    return out


def clamp(targets, config):
    lo, hi = config.limits()
    return np.clip(targets, lo, hi)


def retarget(pose, config, timestamp_us=0):
    angles = pose.angles_deg if isinstance(pose, HandPose) else pose
    return JointCommand(timestamp_us, clamp(unclamped_targets(angles, config), config))


def rate_limit(prev, nxt, dt_s, config):
    """Move each joint toward ``nxt`` by at most ``max_speed * dt_s``."""
    if dt_s < 0:
        raise ValueError("dt_s must be non-negative")
    step = config.max_speed * dt_s
    delta = nxt.targets - prev.targets
    inside = np.abs(delta) <= step
    # joints already inside the envelope take the target verbatim (no round-off)
    out = np.where(inside, nxt.targets, prev.targets + np.clip(delta, -step, step))
    return JointCommand(nxt.timestamp_us, out)


# -- key=value file --------------------------------------------------------------

_KEYS = ("n_fingers", "max_speed", "lower", "upper", "abduction")


def hand_config_from_mapping(values):
    check_keys(values, _KEYS, "hand config")
    try:
        n = int(values.get("n_fingers", 4))
        vec = lambda key: tuple(float(v) for v in values[key].split(",")) if key in values else None
        return RobotHandConfig(n, vec("lower"), vec("upper"), vec("abduction"), float(values.get("max_speed", 300.0)))
    except ValueError as exc:
        raise ConfigError(f"hand config: {exc}") from exc


def load_hand_config(path):
    return hand_config_from_mapping(load_kv(path))


def hand_config_to_text(config):
    fmt = lambda v: ",".join(repr(float(a)) for a in v)
    return format_kv({"n_fingers": config.n_fingers, "max_speed": repr(float(config.max_speed)),
                      "lower": fmt(config.lower), "upper": fmt(config.upper), "abduction": fmt(config.abduction)})
