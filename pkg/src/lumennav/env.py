"""Navigation MDP: tip kinematics with gated forward motion, follow-the-leader
body, per-step perception and the five-term reward."""
from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import TubeEnvironment
from .perception import (
    DegradationProfile,
    NavigationTarget,
    Observation,
    degrade_depth,
    encode_observation,
    extract_navigation_point,
)
from .render import CameraIntrinsics, Pose, render_depth

SUCCESS_REWARD = 300.0
STEP_PENALTY = -0.015
STABILITY_PENALTY = -0.5
REWARD_TERMS = ("dis", "dir", "succ", "stability", "step")
DONE_REASONS = ("collision", "horizon", "goal_reached", "target_lost")


class EpisodeError(RuntimeError):
    pass


# -- reward terms -------------------------------------------------------------

def reward_distance(u, v, epsilon=1e-6):
    return 1.0 - np.sqrt(u * u + v * v + epsilon)


def reward_direction(a_lr, a_ud, u, v, epsilon=1e-6):
    return (a_lr * u + a_ud * v) / np.sqrt(u * u + v * v + epsilon)


def reward_success(u, v, tau=0.1):
    if tau <= 0:
        raise ValueError("tau must be positive")
    return SUCCESS_REWARD if (abs(u) < tau and abs(v) < tau) else 0.0


def reward_step(success):
    return 0.0 if success else STEP_PENALTY


def reward_stability(history, window=10, count=5):
    """-0.5 when at least ``count`` of the last ``window`` rewards are <= 0."""
    recent = list(history)[-window:]
    return STABILITY_PENALTY if sum(1 for r in recent if r <= 0) >= count else 0.0


@dataclass(frozen=True)
class RewardBreakdown:
    r_dis: float
    r_dir: float
    r_succ: float
    r_step: float
    r_penalty: float
    total: float
    u_t: float
    v_t: float

    @classmethod
    def compose(cls, r_dis, r_dir, r_succ, r_step, r_penalty, u, v):
        total = r_dis + r_dir + r_succ + r_step + r_penalty
        return cls(float(r_dis), float(r_dir), float(r_succ), float(r_step), float(r_penalty),
                   float(total), float(u), float(v))


@dataclass(frozen=True)
class Action:
    a_lr: float
    a_ud: float
    a_fw: float

    @classmethod
    def from_array(cls, a):
        a = np.clip(np.asarray(a, dtype=float).ravel()[:3], -1.0, 1.0)
        return cls(float(a[0]), float(a[1]), float(a[2]))

    def as_array(self):
        return np.array([self.a_lr, self.a_ud, self.a_fw])


# -- configuration -------------------------------------------------------------

@dataclass(frozen=True)
class EpisodeConfig:
    horizon: int = 3000
    tau: float = 0.1
    clearance_min: float = 1.0
    yaw_pitch_scale: float = 3.0
    forward_speed: float = 1.0
    gate_ratio: float = 0.35
    stability_window: int = 10
    stability_count: int = 5
    epsilon: float = 1e-6
    target_lost_frames: int = 25
    goal_fraction: float = 0.98
    # forward translation: "action" uses max(a_fw, 0), "constant" always
    # advances forward_speed while the gate is open
    forward_mode: str = "action"
    allow_backward: bool = False
    gating: bool = True
    success_terminates: bool = False
    terminate_on_collision: bool = True
    contact_margin: float = 0.25
    reward_terms: tuple = REWARD_TERMS
    level: int = 8
    n_levels: int = 20
    level_order: str = "near_first"
    target_region: str = "enclosed"
    shifted_offset_obs: bool = False
    camera_width: int = 64
    camera_height: int = 64
    camera_fov: float = 120.0
    far_clip: float = 300.0
    init_offset_frac: float = 0.2
    init_tilt_deg: float = 10.0
    start_s_range: tuple = (0.0, 0.0)
    segment_spacing: float = 10.0
    n_segments: int = 10
    step_period: float = 1.0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if not 0 < self.gate_ratio < 1:
            raise ValueError("gate_ratio must lie in (0, 1)")
        if self.forward_mode not in ("action", "constant"):
            raise ValueError(f"unknown forward_mode {self.forward_mode!r}")
        unknown = set(self.reward_terms) - set(REWARD_TERMS)
        if unknown:
            raise ValueError(f"unknown reward terms {sorted(unknown)}")
        if not 0.0 <= self.init_offset_frac <= 0.2 or not 0.0 <= self.init_tilt_deg <= 10.0:
            raise ValueError("initial perturbation exceeds 20% radius / 10 degrees")
        object.__setattr__(self, "reward_terms", tuple(self.reward_terms))
        object.__setattr__(self, "start_s_range", tuple(self.start_s_range))

    @property
    def camera(self):
        return CameraIntrinsics(self.camera_width, self.camera_height, self.camera_fov, self.far_clip)

    def to_dict(self):
        d = asdict(self)
        d["reward_terms"] = list(self.reward_terms)
        d["start_s_range"] = list(self.start_s_range)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown episode config keys {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw):
        return replace(self, **kw)


# -- follow-the-leader body ----------------------------------------------------------

def ftl_body(trace, segment_spacing=10.0, n_segments=10, cumulative=None):
    """Body points at path distances ``i * spacing`` (i = 1..n) behind the tip.

    ``trace`` is the ordered tip history, oldest first; points further back
    than the recorded trace clamp to its start.
    """
    pts = np.asarray(trace, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("empty trace")
    if cumulative is None:
        cumulative = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    total = cumulative[-1]
    d = np.maximum(total - segment_spacing * np.arange(1, n_segments + 1), 0.0)
    if len(pts) == 1:
        return np.repeat(pts, n_segments, axis=0)
    return np.stack([np.interp(d, cumulative, pts[:, k]) for k in range(3)], axis=1)


def distance_to_polyline(points, polyline):
    """Distance from each point to the nearest segment of ``polyline``."""
    p = np.atleast_2d(points)[:, None, :]
    a = polyline[:-1][None]
    b = polyline[1:][None]
    ab = b - a
    denom = np.maximum(np.einsum("...k,...k->...", ab, ab), 1e-300)
    lam = np.clip(np.einsum("...k,...k->...", p - a, ab) / denom, 0.0, 1.0)
    foot = a + lam[..., None] * ab
    return np.linalg.norm(p - foot, axis=-1).min(axis=1)


@dataclass
class TipState:
    pose: Pose
    trace: list = field(default_factory=list)
    cumulative: list = field(default_factory=list)
    step_index: int = 0

    def append(self, p):
        p = np.asarray(p, dtype=float)
        if self.trace:
            self.cumulative.append(self.cumulative[-1] + float(np.linalg.norm(p - self.trace[-1])))
        else:
            self.cumulative.append(0.0)
        self.trace.append(p.copy())


@dataclass
class StepOutcome:
    observation: Observation
    reward: RewardBreakdown
    done: bool
    done_reason: str | None
    info: dict


def check_termination(state, config, clearance, s_star, length, lost_frames):
    if clearance < config.clearance_min and config.terminate_on_collision:
        return "collision"
    if s_star >= config.goal_fraction * length:
        return "goal_reached"
    if lost_frames >= config.target_lost_frames:
        return "target_lost"
    if state.step_index >= config.horizon:
        return "horizon"
    return None


class NavEnv:
    """Single-threaded episode simulator around one tube environment."""

    def __init__(self, tube: TubeEnvironment, config: EpisodeConfig = EpisodeConfig(),
                 profile: DegradationProfile = DegradationProfile()):
        self.tube = tube
        self.config = config
        self.profile = profile
        self.cam = config.camera
        self.state = None
        self.done = True
        self.log = []

    # -- perception --------------------------------------------------------
    def _perceive(self):
        cfg = self.config
        gt = render_depth(self.tube, self.state.pose, self.cam)
        frame_seed = self._episode_seed * 1_000_003 + self.state.step_index
        pred = degrade_depth(gt, self.profile, frame_seed)
        if not pred.valid.any():
            return NavigationTarget(0.0, 0.0, False, 0)
        return extract_navigation_point(pred, cfg.level, cfg.n_levels, cfg.level_order,
                                        region=cfg.target_region)

    def _update_target(self, target):
        if target.valid:
            self._target = target
            self._obs = encode_observation(target, self.cam, self.config.shifted_offset_obs)
            w, h = self.cam.width, self.cam.height
            self._u = (target.t_x - w / 2) / (w / 2)
            self._v = (target.t_y - h / 2) / (h / 2)
            self._lost = 0
        else:
            self._lost += 1
        self._target_valid = target.valid

    @property
    def rho(self):
        """Target-to-center distance over half-diagonal."""
        w, h = self.cam.width, self.cam.height
        return float(np.hypot(self._u * w / 2, self._v * h / 2) / np.hypot(w / 2, h / 2))

    # -- episode API ---------------------------------------------------------
    def reset(self, seed=0) -> Observation:
        cfg = self.config
        rng = np.random.default_rng(seed)
        self._episode_seed = int(seed)
        sp = self.tube.centerline
        lo, hi = cfg.start_s_range
        s0 = rng.uniform(lo, hi) * sp.length if hi > lo else lo * sp.length
        base = Pose.looking_along(sp.point_at(s0), sp.tangent_at(s0)).rotation
        ang = rng.uniform(0, 2 * np.pi)
        off = rng.uniform(0, cfg.init_offset_frac) * sp.radius_at(s0)
        pos = sp.point_at(s0) + off * (np.cos(ang) * base[:, 0] + np.sin(ang) * base[:, 1])
        tilt = np.radians(rng.uniform(0, cfg.init_tilt_deg))
        az = rng.uniform(0, 2 * np.pi)
        roll = rng.uniform(-np.pi, np.pi)
        rot = (Rotation.from_matrix(base)
               * Rotation.from_rotvec(tilt * np.array([np.cos(az), np.sin(az), 0.0]))
               * Rotation.from_rotvec([0.0, 0.0, roll]))
        if cfg.init_offset_frac == 0 and cfg.init_tilt_deg == 0:
            rot = Rotation.from_matrix(base)
        self.state = TipState(Pose(pos, rot.as_quat()))
        self.state.append(pos)
        self._history = deque(maxlen=cfg.stability_window)
        self._u = self._v = 0.0
        self._lost = 0
        self._obs = Observation(0.0, 0.0, 0.0, 0.0)
        self._target = NavigationTarget(0.0, 0.0, False, 0)
        self._update_target(self._perceive())
        self._clearances = self._clearance_now()
        near = sp.nearest(pos)
        self._s_star = near.s_star
        self._max_s = near.s_star
        self.done = False
        self.log = [self._record(None, None, False, 0.0, None)]
        return self._obs

    def _clearance_now(self):
        st = self.state
        body = ftl_body(np.array(st.trace), self.config.segment_spacing, self.config.n_segments,
                        np.array(st.cumulative))
        pts = np.vstack([st.pose.position, body])
        return self.tube.centerline.wall_distance(pts)

    def body_points(self):
        st = self.state
        return ftl_body(np.array(st.trace), self.config.segment_spacing, self.config.n_segments,
                        np.array(st.cumulative))

    def step(self, action) -> StepOutcome:
        if self.state is None or self.done:
            raise EpisodeError("step() called on a finished episode; call reset()")
        cfg = self.config
        act = action if isinstance(action, Action) else Action.from_array(action)
        st = self.state

        # (1) yaw/pitch about the camera's local axes; positive commands move
        # the view toward +x (right) and +y (down) in the image
        ang = np.radians(cfg.yaw_pitch_scale)
        rot = (Rotation.from_quat(st.pose.orientation)
               * Rotation.from_rotvec([0.0, act.a_lr * ang, 0.0])
               * Rotation.from_rotvec([-act.a_ud * ang, 0.0, 0.0]))
        new_pose = Pose(st.pose.position, rot.as_quat())

        # (2) gated translation along the viewing axis
        rho = self.rho
        gate_open = (not cfg.gating) or (self._target_valid and rho < cfg.gate_ratio)
        if cfg.forward_mode == "constant":
            command = 1.0
        else:
            command = act.a_fw if cfg.allow_backward else max(act.a_fw, 0.0)
        distance = cfg.forward_speed * command if gate_open else 0.0
        contact = False
        moved = False
        if distance != 0.0:
            target_pos = new_pose.position + distance * new_pose.forward
            if self.tube.wall_distance(target_pos) < cfg.contact_margin:
                contact = True
            else:
                new_pose = Pose(target_pos, new_pose.orientation)
                moved = True
        st.pose = new_pose
        st.step_index += 1

        # (3) follow-the-leader trace
        if moved:
            st.append(new_pose.position)
            self._clearances = self._clearance_now()
            near = self.tube.centerline.nearest(new_pose.position)
            self._s_star = near.s_star
            self._max_s = max(self._max_s, near.s_star)

        # (4) perception
        self._update_target(self._perceive())

        # (5) reward
        u, v = self._u, self._v
        terms = cfg.reward_terms
        success = self._target_valid and abs(u) < cfg.tau and abs(v) < cfg.tau
        r_dis = reward_distance(u, v, cfg.epsilon) if "dis" in terms else 0.0
        r_dir = reward_direction(act.a_lr, act.a_ud, u, v, cfg.epsilon) if "dir" in terms else 0.0
        r_succ = SUCCESS_REWARD if (success and "succ" in terms) else 0.0
        r_step = reward_step(success) if "step" in terms else 0.0
        r_pen = (reward_stability(self._history, cfg.stability_window, cfg.stability_count)
                 if "stability" in terms else 0.0)
        reward = RewardBreakdown.compose(r_dis, r_dir, r_succ, r_step, r_pen, u, v)
        self._history.append(reward.total)

        # (6) termination
        clearance = float(np.min(self._clearances))
        reason = check_termination(st, cfg, clearance, self._s_star, self.tube.length, self._lost)
        if reason is None and success and cfg.success_terminates:
            reason = "goal_reached"
        self.done = reason is not None
        info = {
            "clearance": clearance,
            "tip_clearance": float(self._clearances[0]),
            "gated": bool(gate_open),
            "moved": moved,
            "contact": contact,
            "rho": rho,
            "target_valid": bool(self._target_valid),
            "success": bool(success),
            "s_star": float(self._s_star),
            "collision": clearance < cfg.clearance_min,
            "translation": distance if moved else 0.0,
        }
        self.log.append(self._record(act, reward, info["collision"], clearance, reason, info))
        return StepOutcome(self._obs, reward, self.done, reason, info)

    # -- logging -------------------------------------------------------------
    def _record(self, act, reward, collision, clearance, reason, info=None):
        st = self.state
        rec = {
            "t": st.step_index * self.config.step_period,
            "tip_position": st.pose.position.tolist(),
            "quaternion": st.pose.orientation.tolist(),
            "action": None if act is None else act.as_array().tolist(),
            "reward": None if reward is None else asdict(reward),
            "u": float(self._u),
            "v": float(self._v),
            "rho": self.rho,
            "clearance": float(clearance) if info else float(np.min(self._clearances)),
            "gated": bool(info["gated"]) if info else False,
            "collision": bool(collision),
            "target_valid": bool(self._target_valid),
            "s_star": float(self._s_star),
            "done_reason": reason,
        }
        return rec

    def write_log(self, path, extra=None):
        write_jsonl(path, self.log, header={
            "camera": {"width": self.cam.width, "height": self.cam.height},
            "step_period": self.config.step_period,
            "clearance_min": self.config.clearance_min,
            **(extra or {}),
        })


def write_jsonl(path, records, header=None):
    with open(path, "w") as f:
        if header is not None:
            f.write(json.dumps({"header": header}, sort_keys=True) + "\n")
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path):
    header, records = {}, []
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"file not found: {path}")
    for line in p.read_text().splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        if "header" in obj and len(obj) == 1:
            header = obj["header"]
        else:
            records.append(obj)
    return header, records
