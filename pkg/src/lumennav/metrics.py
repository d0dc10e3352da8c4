"""Trajectory metrics (lumen distance, navigation safety, jerk) and scripted
reference controllers."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .env import EpisodeConfig, NavEnv, read_jsonl
from .geometry import TubeEnvironment
from .perception import DegradationProfile

COLLISION_WEIGHT = 0.6
PATH_WEIGHT = 0.4
DEVIATION_WEIGHT = 0.5
ORACLE_LOOKAHEAD = 30.0


class MetricsError(ValueError):
    pass


@dataclass
class TrajectoryLog:
    times: np.ndarray
    positions: np.ndarray
    u: np.ndarray
    v: np.ndarray
    collision: np.ndarray
    gated: np.ndarray
    width: int = 64
    height: int = 64
    step_period: float = 1.0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        n = len(self.positions)
        self.u = np.asarray(self.u, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        self.collision = np.asarray(self.collision, dtype=bool)
        self.gated = np.asarray(self.gated, dtype=bool)
        if not all(len(a) == n for a in (self.times, self.u, self.v, self.collision, self.gated)):
            raise MetricsError("trajectory fields differ in length")
        if not np.all(np.isfinite(self.positions)):
            raise MetricsError("non-finite tip position")
        if n > 1 and not np.allclose(np.diff(self.times), self.step_period, rtol=0, atol=1e-9):
            raise MetricsError("times must advance by the step period")

    def __len__(self):
        return len(self.positions)

    @property
    def pixel_offsets(self):
        """Target-to-center distances in pixels."""
        return np.hypot(self.u * self.width / 2.0, self.v * self.height / 2.0)

    @property
    def d_max(self):
        return float(np.hypot(self.width / 2.0, self.height / 2.0))

    @classmethod
    def from_records(cls, records, width=64, height=64, step_period=1.0):
        if not records:
            raise MetricsError("empty log")
        return cls(
            times=[r["t"] for r in records],
            positions=[r["tip_position"] for r in records],
            u=[r["u"] for r in records],
            v=[r["v"] for r in records],
            collision=[r["collision"] for r in records],
            gated=[r["gated"] for r in records],
            width=width, height=height, step_period=step_period,
        )

    @classmethod
    def load(cls, path):
        header, records = read_jsonl(path)
        cam = header.get("camera", {})
        return cls.from_records(records, cam.get("width", 64), cam.get("height", 64),
                                header.get("step_period", 1.0))

    def transformed(self, rotation, translation):
        """Rigidly moved copy (positions only; image offsets are frame-invariant)."""
        return TrajectoryLog(self.times, self.positions @ np.asarray(rotation).T + translation,
                             self.u, self.v, self.collision, self.gated, self.width, self.height,
                             self.step_period)


@dataclass(frozen=True)
class MetricsReport:
    d_geo: float
    s_nav: float
    jerk_index: float
    n_collisions: int
    n_steps: int
    path_length: float
    centerline_length: float
    completion: float
    mode: str = "excess"

    def to_dict(self):
        return asdict(self)


def _check(log):
    if log is None or len(log) == 0:
        raise MetricsError("empty log")


def path_length(log: TrajectoryLog) -> float:
    return float(np.sum(np.linalg.norm(np.diff(log.positions, axis=0), axis=1)))


def completion_fraction(log: TrajectoryLog, env: TubeEnvironment) -> float:
    s_star, _, _ = env.centerline.nearest_many(log.positions)
    return float(np.clip(np.max(s_star) / env.length, 0.0, 1.0))


def d_geo(log: TrajectoryLog, env: TubeEnvironment) -> float:
    """Mean of image-centering error scaled by the radius-normalized centerline deviation."""
    _check(log)
    s_star, _, dist = env.centerline.nearest_many(log.positions)
    radius = env.centerline.radius_at(s_star)
    return float(np.mean(log.pixel_offsets / log.d_max * (1.0 + DEVIATION_WEIGHT * dist / radius)))


def s_nav(log: TrajectoryLog, env: TubeEnvironment, mode="excess") -> float:
    """Safety score from the collision rate and the normalized path penalty.

    ``mode='excess'`` penalizes only path length beyond the centerline length
    covered; ``mode='literal'`` penalizes the raw path length.
    """
    _check(log)
    n_col = int(np.sum(log.collision))
    length = env.length
    dp = path_length(log)
    if mode == "excess":
        dp = max(0.0, dp - length * completion_fraction(log, env))
    elif mode != "literal":
        raise MetricsError(f"unknown s_nav mode {mode!r}")
    return float(1.0 - (COLLISION_WEIGHT * n_col / len(log) + PATH_WEIGHT * dp / length))


def jerk_index(log_or_positions, step_period=None) -> float:
    """Mean magnitude of the third time derivative of tip position.

    Uses third differences on the uniform step grid, which are exact for
    cubic motion.
    """
    if isinstance(log_or_positions, TrajectoryLog):
        x, dt = log_or_positions.positions, log_or_positions.step_period
    else:
        x = np.asarray(log_or_positions, dtype=float)
        x = x.reshape(len(x), -1)
        dt = 1.0 if step_period is None else float(step_period)
    if len(x) < 4:
        raise MetricsError("jerk index needs at least 4 samples")
    third = (x[3:] - 3.0 * x[2:-1] + 3.0 * x[1:-2] - x[:-3]) / dt**3
    return float(np.mean(np.linalg.norm(third, axis=1)))


def evaluate(log: TrajectoryLog, env: TubeEnvironment, mode="excess") -> MetricsReport:
    _check(log)
    return MetricsReport(
        d_geo=d_geo(log, env),
        s_nav=s_nav(log, env, mode),
        jerk_index=jerk_index(log) if len(log) >= 4 else float("nan"),
        n_collisions=int(np.sum(log.collision)),
        n_steps=len(log),
        path_length=path_length(log),
        centerline_length=float(env.length),
        completion=completion_fraction(log, env),
        mode=mode,
    )


AGG_FIELDS = ("d_geo", "s_nav", "jerk_index", "n_collisions", "path_length", "completion")


def aggregate(reports):
    """Mean and population std of each metric over a list of reports."""
    if not reports:
        raise MetricsError("no reports to aggregate")
    out = {"n": len(reports)}
    for f in AGG_FIELDS:
        vals = np.array([getattr(r, f) for r in reports], dtype=float)
        out[f"{f}_mean"] = float(np.mean(vals))
        out[f"{f}_std"] = float(np.std(vals))
    return out


SUMMARY_COLUMNS = ("method", "n", "d_geo_mean", "d_geo_std", "s_nav_mean", "s_nav_std",
                   "jerk_index_mean", "jerk_index_std", "n_collisions_mean", "completion_mean")


def summary_csv(rows, path=None):
    """CSV table with one aggregated row per method; returns the text."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for method, agg in rows:
        w.writerow([method] + [_num(agg[c]) for c in SUMMARY_COLUMNS[1:]])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def _num(x):
    return f"{x:.6g}" if isinstance(x, float) else str(x)


def write_report(path, payload):
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


# -- controllers ---------------------------------------------------------------------

def rollout(tube: TubeEnvironment, config: EpisodeConfig, profile: DegradationProfile, controller, seed=0):
    """Run one episode; ``controller(obs_array, env)`` returns an action."""
    env = NavEnv(tube, config, profile)
    obs = env.reset(seed)
    while True:
        out = env.step(controller(obs.as_array(), env))
        obs = out.observation
        if out.done:
            break
    return env


def env_log(env: NavEnv) -> TrajectoryLog:
    return TrajectoryLog.from_records(env.log, env.cam.width, env.cam.height, env.config.step_period)


def _steer_toward(env, point):
    """Yaw/pitch commands that turn the viewing axis toward ``point``."""
    pose = env.state.pose
    d = pose.rotation.T @ (point - pose.position)
    scale = np.radians(env.config.yaw_pitch_scale)
    yaw = np.arctan2(d[0], d[2])
    pitch = np.arctan2(d[1], d[2])
    return np.clip([yaw / scale, pitch / scale], -1.0, 1.0)


def oracle_controller(lookahead=ORACLE_LOOKAHEAD):
    def act(obs, env):
        sp = env.tube.centerline
        s = min(sp.nearest(env.state.pose.position).s_star + lookahead, sp.length)
        lr, ud = _steer_toward(env, sp.point_at(s))
        return np.array([lr, ud, 1.0])
    return act


def proportional_controller(gain=1.0):
    """Steer toward the observed target offset; full forward command."""
    def act(obs, env):
        return np.clip([gain * obs[2], gain * obs[3], 1.0], -1.0, 1.0)
    return act


def oracle_config(config: EpisodeConfig) -> EpisodeConfig:
    return config.replace(gating=False, forward_mode="constant")


def follower_config(config: EpisodeConfig) -> EpisodeConfig:
    return config.replace(level=config.n_levels, level_order="near_first", target_region="band")


def scripted_oracle(tube: TubeEnvironment, config: EpisodeConfig = EpisodeConfig(),
                    profile: DegradationProfile = DegradationProfile(), seed=0, lookahead=ORACLE_LOOKAHEAD):
    """Privileged pure-pursuit run along the true centerline, ungated at constant speed."""
    return env_log(rollout(tube, oracle_config(config), profile, oracle_controller(lookahead), seed))


def scripted_lumen_follower(tube: TubeEnvironment, config: EpisodeConfig = EpisodeConfig(),
                            profile: DegradationProfile = DegradationProfile(), seed=0, gain=1.0):
    """Proportional steering toward the deepest quantile level under the same gating."""
    return env_log(rollout(tube, follower_config(config), profile, proportional_controller(gain), seed))


# -- plotting ---------------------------------------------------------------------

def plot_trajectories(path, tube: TubeEnvironment, logs, labels=None, title=None):
    """SVG with top-down (x-y) and side (x-z) projections of centerline and runs."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "lumennav"
    pts = tube.centerline.sample(2.0)[1]
    labels = labels or [f"run {i}" for i in range(len(logs))]
    fig, axes = plt.subplots(1, 2, figsize=(10, 4.5))
    for ax, (i, j, name) in zip(axes, ((0, 1, "top-down (x, y)"), (0, 2, "side (x, z)"))):
        ax.plot(pts[:, i], pts[:, j], color="0.6", lw=6, alpha=0.4, label="lumen centerline")
        for log, lab in zip(logs, labels):
            ax.plot(log.positions[:, i], log.positions[:, j], lw=1.2, label=lab)
        ax.set_aspect("equal", adjustable="datalim")
        ax.set_xlabel("mm")
        ax.set_title(name)
    axes[0].legend(loc="best", fontsize=8)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
