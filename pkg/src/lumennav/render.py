"""Monocular tip camera: sphere-traced range images and headlight-shaded RGB
renders of a tube environment, plus synthetic dataset export.

Camera frame: +z looks forward, +x points to image right, +y to image down.
Depth is range along each pixel ray in millimetres (not z-depth).
"""
from __future__ import annotations

import json
import weakref
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from . import _raymarch
from .geometry import TubeEnvironment
from .imageio import write_pfm, write_ppm

STEP_SAFETY = 0.9
HIT_EPS = 0.05
MAX_STEPS = 256

TEXTURE_CELL = 6.0
TEXTURE_AROUND = 16
ALBEDO_CELL = 2.5
ALBEDO_AROUND = 40
ALBEDO_AMPLITUDE = 0.3
BASE_COLOR = np.array([0.85, 0.42, 0.38])
FALLOFF_REF = 20.0
SPECULAR = 0.35
SHININESS = 24.0

PFM_COMMENT = "depth: range along pixel ray in mm; 0 marks invalid pixels"


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int = 128
    height: int = 128
    vertical_fov: float = 120.0
    far_clip: float = 300.0

    def __post_init__(self):
        if self.width < 16 or self.height < 16:
            raise RenderError("camera must be at least 16x16 pixels")
        if not 20.0 <= self.vertical_fov <= 170.0:
            raise RenderError("vertical FOV must lie in [20, 170] degrees")
        if self.far_clip <= 0:
            raise RenderError("far_clip must be positive")

    @property
    def focal(self):
        return 0.5 * self.height / np.tan(np.radians(self.vertical_fov) / 2)

    @property
    def center(self):
        return self.width / 2.0, self.height / 2.0

    def ray_directions(self):
        """Unit ray directions in the camera frame, shape (H, W, 3)."""
        i = np.arange(self.width) + 0.5 - self.width / 2.0
        j = np.arange(self.height) + 0.5 - self.height / 2.0
        x, y = np.meshgrid(i / self.focal, j / self.focal)
        d = np.stack([x, y, np.ones_like(x)], axis=-1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def to_dict(self):
        return {"width": self.width, "height": self.height,
                "vertical_fov": self.vertical_fov, "far_clip": self.far_clip}


@dataclass(frozen=True)
class Pose:
    """Position (mm) and unit quaternion in scalar-last ``(x, y, z, w)`` order."""

    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.orientation, dtype=float)
        norm = np.linalg.norm(q)
        if not np.isfinite(norm) or norm == 0:
            raise RenderError("invalid quaternion")
        object.__setattr__(self, "orientation", q / norm)
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).copy())

    @property
    def rotation(self):
        return Rotation.from_quat(self.orientation).as_matrix()

    @property
    def forward(self):
        return self.rotation[:, 2]

    @classmethod
    def from_matrix(cls, position, matrix):
        return cls(position, Rotation.from_matrix(matrix).as_quat())

    @classmethod
    def looking_along(cls, position, forward, up_hint=None):
        """Camera at ``position`` with +z along ``forward``."""
        f = np.asarray(forward, dtype=float)
        f = f / np.linalg.norm(f)
        if up_hint is None:
            up_hint = np.array([0.0, 1.0, 0.0]) if abs(f[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        x = np.cross(up_hint, f)
        x /= np.linalg.norm(x)
        y = np.cross(f, x)
        return cls.from_matrix(position, np.stack([x, y, f], axis=1))


@dataclass
class DepthImage:
    depth: np.ndarray
    valid: np.ndarray
    far_clip: float

    def __post_init__(self):
        self.depth = np.where(self.valid, self.depth, 0.0)

    @property
    def shape(self):
        return self.depth.shape

    @classmethod
    def from_array(cls, depth, far_clip=None):
        d = np.nan_to_num(np.asarray(depth, dtype=float), nan=0.0, posinf=0.0, neginf=0.0)
        fc = float(d.max()) if far_clip is None else float(far_clip)
        return cls(d, (d > 0) & (d <= fc), fc)


@dataclass
class RgbImage:
    pixels: np.ndarray
    radiance: np.ndarray = field(repr=False, default=None)


_TEXTURES: "weakref.WeakKeyDictionary[TubeEnvironment, tuple]" = weakref.WeakKeyDictionary()


def _textures(env: TubeEnvironment):
    tex = _TEXTURES.get(env)
    if tex is None:
        rng = np.random.default_rng([int(env.texture_seed), 7])
        n_s = int(np.ceil(env.length / TEXTURE_CELL)) + 2
        shape_tex = rng.uniform(-1.0, 1.0, (n_s, TEXTURE_AROUND))
        n_a = int(np.ceil(env.length / ALBEDO_CELL)) + 2
        albedo_tex = rng.uniform(-1.0, 1.0, (n_a, ALBEDO_AROUND))
        tex = (shape_tex, albedo_tex)
        _TEXTURES[env] = tex
    return tex


def _trace(env, pose, cam, amp=None):
    if env.wall_distance(pose.position) <= 0:
        raise RenderError("camera pose lies outside the lumen")
    ds, pts, nrm, bi, rad = env.dense_frames
    shape_tex, _ = _textures(env)
    dirs = (cam.ray_directions().reshape(-1, 3) @ pose.rotation.T).copy()
    hint = int(round(env.nearest_on_centerline(pose.position).s_star / ds))
    amp = env.texture_amplitude if amp is None else amp
    depth, hints = _raymarch.march(
        pose.position, dirs, hint, pts, nrm, bi, rad, ds, shape_tex, TEXTURE_CELL,
        amp, cam.far_clip, HIT_EPS, STEP_SAFETY, MAX_STEPS,
    )
    return dirs, depth, hints


def render_depth(env: TubeEnvironment, pose: Pose, cam: CameraIntrinsics) -> DepthImage:
    """Range image of the textured lumen wall seen from ``pose``.

    Pixels whose ray does not reach the wall within ``cam.far_clip`` are
    marked invalid (value 0).
    """
    _, depth, _ = _trace(env, pose, cam)
    d = depth.reshape(cam.height, cam.width)
    return DepthImage(d, d > 0, cam.far_clip)


def render_radiance(env, pose, cam, light_intensity):
    """Linear RGB radiance before 8-bit quantization, shape (H, W, 3)."""
    # tracing to the texture-independent horizon keeps RGB independent of far_clip
    horizon = CameraIntrinsics(cam.width, cam.height, cam.vertical_fov, far_clip=10.0 * env.length)
    dirs, depth, hints = _trace(env, pose, horizon)
    ds, pts, nrm, bi, rad = env.dense_frames
    shape_tex, albedo_tex = _textures(env)
    rad_out = _raymarch.shade(
        pose.position, dirs, depth, hints, pts, nrm, bi, rad, ds, shape_tex, TEXTURE_CELL,
        env.texture_amplitude, albedo_tex, ALBEDO_CELL, ALBEDO_AMPLITUDE, BASE_COLOR,
        FALLOFF_REF, SPECULAR, SHININESS,
    )
    return float(light_intensity) * rad_out.reshape(cam.height, cam.width, 3)


def render_rgb(env: TubeEnvironment, pose: Pose, cam: CameraIntrinsics, light_intensity: float) -> RgbImage:
    if light_intensity < 0:
        raise RenderError("light intensity must be non-negative")
    radiance = render_radiance(env, pose, cam, light_intensity)
    pixels = np.clip(np.rint(radiance * 255.0), 0, 255).astype(np.uint8)
    return RgbImage(pixels, radiance)


# -- dataset export ------------------------------------------------------------

def sample_pose(env: TubeEnvironment, rng, min_clearance=1.0, max_tilt_deg=25.0,
                s_range=(0.03, 0.95), max_offset=0.6):
    """Rejection-sample a camera pose inside the lumen looking roughly downstream."""
    sp = env.centerline
    for _ in range(1000):
        s = rng.uniform(*s_range) * sp.length
        t = sp.tangent_at(s)
        frame = Pose.looking_along(sp.point_at(s), t).rotation
        ang = rng.uniform(0, 2 * np.pi)
        off = rng.uniform(0, max_offset) * sp.radius_at(s)
        pos = sp.point_at(s) + off * (np.cos(ang) * frame[:, 0] + np.sin(ang) * frame[:, 1])
        tilt = np.radians(rng.uniform(0, max_tilt_deg))
        az = rng.uniform(0, 2 * np.pi)
        roll = rng.uniform(-np.pi, np.pi)
        r = (Rotation.from_matrix(frame)
             * Rotation.from_rotvec(tilt * np.array([np.cos(az), np.sin(az), 0.0]))
             * Rotation.from_rotvec([0.0, 0.0, roll]))
        if env.wall_distance(pos) > min_clearance:
            return Pose(pos, r.as_quat())
    raise RenderError("could not sample a pose inside the lumen")


@dataclass(frozen=True)
class DatasetConfig:
    width: int = 128
    height: int = 128
    far_clip: float = 300.0
    fov_range: tuple = (90.0, 140.0)
    light_range: tuple = (0.4, 2.0)


def export_dataset(env: TubeEnvironment, count: int, seed: int, out_dir, config=DatasetConfig()):
    """Write ``count`` (PPM, PFM) pairs plus ``manifest.json``; returns the manifest."""
    if count < 1:
        raise ValueError("count must be >= 1")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(count):
        pose = sample_pose(env, rng)
        fov = float(rng.uniform(*config.fov_range))
        light = float(rng.uniform(*config.light_range))
        cam = CameraIntrinsics(config.width, config.height, fov, config.far_clip)
        rgb = render_rgb(env, pose, cam, light)
        depth = render_depth(env, pose, cam)
        rgb_name, depth_name = f"rgb_{i:05d}.ppm", f"depth_{i:05d}.pfm"
        write_ppm(out / rgb_name, rgb.pixels)
        write_pfm(out / depth_name, depth.depth, comment=PFM_COMMENT)
        samples.append({
            "rgb": rgb_name,
            "depth": depth_name,
            "position": pose.position.tolist(),
            "quaternion_xyzw": pose.orientation.tolist(),
            "light_intensity": light,
            "vertical_fov": fov,
        })
    manifest = {
        "count": count,
        "seed": seed,
        "camera": {"width": config.width, "height": config.height, "far_clip": config.far_clip},
        "environment": env.to_dict(),
        "samples": samples,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest
