"""Tubular lumen geometry: centerline splines, nearest-point queries and
procedural environment generation.

All lengths are in millimetres.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

TIP_RADIUS = 5.0
DEFAULT_FAR_CLIP = 300.0
DEFAULT_TEXTURE_AMPLITUDE = 0.05

# 5-point Gauss-Legendre rule on [0, 1]
_GL_X, _GL_W = np.polynomial.legendre.leggauss(5)
_GL_X = 0.5 * (_GL_X + 1.0)
_GL_W = 0.5 * _GL_W

_ARC_SUBDIV = 64
_NEAREST_SPACING = 0.5
_RENDER_SPACING = 1.0


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class NearestPointResult:
    s_star: float
    point: np.ndarray
    distance: float
    radius_at: float


class CenterlineSpline:
    """Chordal Catmull-Rom spline through ``control_points`` with a per-point
    lumen radius, parameterized by arclength.

    The curve passes through every control point; phantom end points are
    reflected so the first and last control points are the curve ends.
    """

    def __init__(self, control_points, radii):
        pts = np.asarray(control_points, dtype=float)
        rad = np.asarray(radii, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise GeometryError("control points must be an (n, 3) array")
        if len(pts) < 4:
            raise GeometryError(f"need at least 4 control points, got {len(pts)}")
        if rad.shape != (len(pts),):
            raise GeometryError("one radius per control point required")
        if not np.all(np.isfinite(pts)) or not np.all(np.isfinite(rad)):
            raise GeometryError("control points and radii must be finite")
        if np.any(rad <= 0):
            raise GeometryError("radii must be positive")
        chords = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        if np.any(chords < 1e-9):
            raise GeometryError("duplicate consecutive control points")

        self.control_points = pts
        self.radii = rad
        self._coeffs = _chordal_hermite_coefficients(pts)
        self.n_segments = len(pts) - 1
        self._build_arc_table()

    # -- arclength -------------------------------------------------------
    def _build_arc_table(self):
        n = self.n_segments
        grid = np.linspace(0.0, 1.0, _ARC_SUBDIV + 1)
        a, b = grid[:-1], grid[1:]
        # (sub, gl) local parameters within a segment
        local = a[:, None] + (b - a)[:, None] * _GL_X[None, :]
        seg = np.repeat(np.arange(n), _ARC_SUBDIV * len(_GL_X))
        u = seg + np.tile(local.ravel(), n)
        speed = np.linalg.norm(self._eval(u, 1), axis=1)
        pieces = (speed.reshape(n, _ARC_SUBDIV, len(_GL_X)) * _GL_W).sum(axis=2) / _ARC_SUBDIV
        cum = np.concatenate([[0.0], np.cumsum(pieces.ravel())])
        self.arc_u = (np.arange(n)[:, None] + grid[None, :-1]).ravel()
        self.arc_u = np.concatenate([self.arc_u, [float(n)]])
        self.arc_s = cum
        self.length = float(cum[-1])
        self.control_s = self.arc_s[:: _ARC_SUBDIV]
        if np.any(np.diff(self.arc_s) <= 0):
            raise GeometryError("degenerate spline: arclength not increasing")

    def _s_of_u(self, u):
        u = np.clip(np.asarray(u, dtype=float), 0.0, self.n_segments)
        idx = np.minimum((u * _ARC_SUBDIV).astype(int), len(self.arc_u) - 2)
        u0 = self.arc_u[idx]
        h = u - u0
        pts = u0[..., None] + h[..., None] * _GL_X
        speed = np.linalg.norm(self._eval(pts.ravel(), 1), axis=1).reshape(pts.shape)
        return self.arc_s[idx] + h * (speed * _GL_W).sum(axis=-1)

    def _u_of_s(self, s):
        s = np.asarray(s, dtype=float)
        u = np.interp(s, self.arc_s, self.arc_u)
        for _ in range(3):
            speed = np.linalg.norm(self._eval(u, 1), axis=-1)
            u = np.clip(u - (self._s_of_u(u) - s) / speed, 0.0, self.n_segments)
        return u

    # -- raw polynomial evaluation ---------------------------------------
    def _eval(self, u, deriv=0):
        u = np.asarray(u, dtype=float)
        seg = np.clip(np.floor(u).astype(int), 0, self.n_segments - 1)
        t = (u - seg)[..., None]
        c0, c1, c2, c3 = (self._coeffs[k][seg] for k in range(4))
        if deriv == 0:
            return c0 + t * (c1 + t * (c2 + t * c3))
        if deriv == 1:
            return c1 + t * (2 * c2 + 3 * t * c3)
        if deriv == 2:
            return 2 * c2 + 6 * t * c3
        raise ValueError("deriv must be 0, 1 or 2")

    # -- public queries --------------------------------------------------
    def _check_s(self, s):
        s = np.asarray(s, dtype=float)
        tol = 1e-9 * max(1.0, self.length)
        if np.any(s < -tol) or np.any(s > self.length + tol) or not np.all(np.isfinite(s)):
            raise GeometryError(f"arclength out of range [0, {self.length:.3f}]")
        return np.clip(s, 0.0, self.length)

    def point_at(self, s):
        return self._eval(self._u_of_s(self._check_s(s)))

    def tangent_at(self, s):
        d = self._eval(self._u_of_s(self._check_s(s)), 1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def radius_at(self, s):
        s = self._check_s(s)
        return np.interp(s, self.control_s, self.radii)

    def curvature_at(self, s):
        u = self._u_of_s(self._check_s(s))
        d1 = self._eval(u, 1)
        d2 = self._eval(u, 2)
        return np.linalg.norm(np.cross(d1, d2), axis=-1) / np.linalg.norm(d1, axis=-1) ** 3

    def arclength_of_point(self, p):
        """Inverse of :meth:`point_at` for points on the curve."""
        return self.nearest(p).s_star

    def sample(self, spacing):
        n = max(2, int(np.ceil(self.length / spacing)) + 1)
        s = np.linspace(0.0, self.length, n)
        return s, self.point_at(s)

    @cached_property
    def _nearest_index(self):
        s, pts = self.sample(_NEAREST_SPACING)
        u = self._u_of_s(s)
        return s, u, cKDTree(pts)

    def nearest_many(self, points):
        """Vectorized nearest centerline point; returns ``(s_star, foot, distance)``."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        s_grid, u_grid, tree = self._nearest_index
        _, k = tree.query(p)
        lo = u_grid[np.maximum(k - 1, 0)]
        hi = u_grid[np.minimum(k + 1, len(u_grid) - 1)]
        u = u_grid[k].copy()
        for _ in range(4):
            c = self._eval(u)
            d1 = self._eval(u, 1)
            d2 = self._eval(u, 2)
            diff = c - p
            g = np.einsum("ij,ij->i", diff, d1)
            gp = np.einsum("ij,ij->i", d1, d1) + np.einsum("ij,ij->i", diff, d2)
            step = np.where(gp > 0, g / np.where(gp > 0, gp, 1.0), 0.0)
            u = np.clip(u - step, lo, hi)
        # guard against Newton landing on a worse point than the bracket ends
        cand = np.stack([u, lo, hi], axis=1)
        dist = np.linalg.norm(self._eval(cand.ravel()).reshape(-1, 3, 3) - p[:, None, :], axis=2)
        best = np.argmin(dist, axis=1)
        u = cand[np.arange(len(p)), best]
        foot = self._eval(u)
        s_star = np.clip(self._s_of_u(u), 0.0, self.length)
        return s_star, foot, np.linalg.norm(foot - p, axis=1)

    def nearest(self, p) -> NearestPointResult:
        s, foot, dist = self.nearest_many(np.asarray(p, dtype=float).reshape(1, 3))
        s0 = float(s[0])
        return NearestPointResult(s0, foot[0], float(dist[0]), float(self.radius_at(s0)))

    def wall_distance(self, p):
        """Signed clearance: positive inside the lumen, <= 0 at or through the wall."""
        p = np.asarray(p, dtype=float)
        s, _, dist = self.nearest_many(p.reshape(-1, 3))
        out = self.radius_at(s) - dist
        return float(out[0]) if p.ndim == 1 else out

    def rotation_minimizing_frames(self, s):
        """Double-reflection frames (tangent, normal, binormal) along sorted ``s``."""
        s = np.asarray(s, dtype=float)
        x = self.point_at(s)
        t = self.tangent_at(s)
        seed = np.array([1.0, 0.0, 0.0]) if abs(t[0, 0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        r = np.empty_like(t)
        r[0] = seed - t[0] * (seed @ t[0])
        r[0] /= np.linalg.norm(r[0])
        for i in range(len(s) - 1):
            v1 = x[i + 1] - x[i]
            c1 = v1 @ v1
            if c1 < 1e-18:
                r[i + 1] = r[i]
                continue
            rl = r[i] - (2.0 / c1) * (v1 @ r[i]) * v1
            tl = t[i] - (2.0 / c1) * (v1 @ t[i]) * v1
            v2 = t[i + 1] - tl
            c2 = v2 @ v2
            r[i + 1] = rl if c2 < 1e-18 else rl - (2.0 / c2) * (v2 @ rl) * v2
            r[i + 1] -= t[i + 1] * (r[i + 1] @ t[i + 1])
            r[i + 1] /= np.linalg.norm(r[i + 1])
        b = np.cross(t, r)
        return t, r, b


def _chordal_hermite_coefficients(pts):
    ext = np.vstack([2 * pts[0] - pts[1], pts, 2 * pts[-1] - pts[-2]])
    knots = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(ext, axis=0), axis=1))])
    # derivative w.r.t. the knot parameter at every interior node
    j = np.arange(1, len(ext) - 1)
    tj, tm, tp = knots[j], knots[j - 1], knots[j + 1]
    m = (
        (ext[j] - ext[j - 1]) / (tj - tm)[:, None]
        - (ext[j + 1] - ext[j - 1]) / (tp - tm)[:, None]
        + (ext[j + 1] - ext[j]) / (tp - tj)[:, None]
    )
    p0, p1 = pts[:-1], pts[1:]
    span = (knots[2:-1] - knots[1:-2])[:, None]
    m0, m1 = m[:-1] * span, m[1:] * span
    c0 = p0
    c1 = m0
    c2 = -3 * p0 - 2 * m0 + 3 * p1 - m1
    c3 = 2 * p0 + m0 - 2 * p1 + m1
    return c0, c1, c2, c3


def build_centerline(control_points, radii) -> CenterlineSpline:
    return CenterlineSpline(control_points, radii)


PROFILES = ("simple", "complex")


@dataclass(frozen=True, eq=False)
class TubeEnvironment:
    centerline: CenterlineSpline
    texture_seed: int = 0
    profile_tag: str = "simple"
    far_clip: float = DEFAULT_FAR_CLIP
    texture_amplitude: float = DEFAULT_TEXTURE_AMPLITUDE
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.profile_tag not in PROFILES:
            raise GeometryError(f"unknown profile {self.profile_tag!r}")
        if not 0.0 <= self.texture_amplitude <= 0.1:
            raise GeometryError("texture amplitude must lie in [0, 0.1]")
        if self.far_clip <= 0:
            raise GeometryError("far_clip must be positive")

    @property
    def length(self):
        return self.centerline.length

    def nearest_on_centerline(self, p) -> NearestPointResult:
        return self.centerline.nearest(p)

    def wall_distance(self, p):
        return self.centerline.wall_distance(p)

    def min_radius(self):
        s, _ = self.centerline.sample(1.0)
        return float(self.centerline.radius_at(s).min())

    @cached_property
    def dense_frames(self):
        """Uniform-arclength samples with rotation-minimizing frames.

        Returns ``(ds, points, normals, binormals, radii)``; used by the
        raymarcher for fast local nearest-point queries.
        """
        sp = self.centerline
        n = max(2, int(np.ceil(sp.length / _RENDER_SPACING)) + 1)
        s = np.linspace(0.0, sp.length, n)
        _, nrm, bi = sp.rotation_minimizing_frames(s)
        return s[1] - s[0], sp.point_at(s), nrm, bi, sp.radius_at(s)

    def to_dict(self):
        return {
            "control_points": self.centerline.control_points.tolist(),
            "radii": self.centerline.radii.tolist(),
            "profile_tag": self.profile_tag,
            "texture_seed": int(self.texture_seed),
            "far_clip": float(self.far_clip),
            "texture_amplitude": float(self.texture_amplitude),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            centerline=build_centerline(d["control_points"], d["radii"]),
            texture_seed=int(d.get("texture_seed", 0)),
            profile_tag=d.get("profile_tag", "simple"),
            far_clip=float(d.get("far_clip", DEFAULT_FAR_CLIP)),
            texture_amplitude=float(d.get("texture_amplitude", DEFAULT_TEXTURE_AMPLITUDE)),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def straight_tube(length=300.0, radius=20.0, n_points=7, texture_amplitude=0.0, **kw):
    """Straight tube along +z starting at the origin."""
    z = np.linspace(0.0, length, n_points)
    pts = np.stack([np.zeros_like(z), np.zeros_like(z), z], axis=1)
    return TubeEnvironment(
        build_centerline(pts, np.full(n_points, float(radius))),
        texture_amplitude=texture_amplitude,
        **kw,
    )


# -- procedural generation ---------------------------------------------------

_PROFILE_CODES = {"simple": 0, "complex": 1}


def _rotate(v, axis, angle):
    axis = axis / np.linalg.norm(axis)
    return (
        v * np.cos(angle)
        + np.cross(axis, v) * np.sin(angle)
        + axis * (axis @ v) * (1 - np.cos(angle))
    )


def _plan_bends(profile, rng):
    if profile == "simple":
        n = int(rng.integers(3, 6))
        bends = [("gentle", rng.uniform(4.6, 6.5), np.radians(rng.uniform(25, 50))) for _ in range(n)]
    else:
        n = int(rng.integers(6, 11))
        n_sharp = int(rng.integers(2, min(4, n) + 1))
        kinds = ["sharp"] * n_sharp + ["mid"] * (n - n_sharp)
        kinds = [kinds[i] for i in rng.permutation(n)]
        bends = []
        for kind in kinds:
            if kind == "sharp":
                bends.append((kind, rng.uniform(2.1, 2.4), np.radians(rng.uniform(45, 80))))
            else:
                bends.append((kind, rng.uniform(2.7, 4.0), np.radians(rng.uniform(30, 55))))
    return bends


def _trace_path(bends, straights, radius_fn, rng, spacing=0.5):
    """Integrate a curvature profile made of raised-cosine bumps, one per bend.

    A bump with peak curvature ``1/rho`` and turning angle ``theta`` spans
    ``2 * theta * rho`` of arclength, so ``rho`` is the tightest bend radius.
    """
    pos = np.zeros(3)
    heading = np.array([0.0, 0.0, 1.0])
    side = np.array([1.0, 0.0, 0.0])
    pts = [pos.copy()]
    s = 0.0
    table = []
    phi = rng.uniform(0, 2 * np.pi)
    for i, straight in enumerate(straights):
        n = max(1, int(round(straight / spacing)))
        for _ in range(n):
            pos = pos + heading * (straight / n)
            pts.append(pos.copy())
        s += straight
        if i == len(bends):
            break
        kind, ratio, angle = bends[i]
        rho = ratio * radius_fn(s)
        span = 2.0 * angle * rho
        # zig-zag bend planes with jitter keep the path progressing
        phi = phi + np.pi + rng.uniform(-0.7, 0.7)
        u = side * np.cos(phi) + np.cross(heading, side) * np.sin(phi)
        axis = np.cross(heading, u)
        n = max(4, int(np.ceil(span / spacing)))
        h = span / n
        for k in range(n):
            mid = (k + 0.5) / n
            dtheta = 0.5 * (1.0 - np.cos(2 * np.pi * mid)) / rho * h
            # midpoint rule for the heading keeps the path second-order accurate
            heading_mid = _rotate(heading, axis, 0.5 * dtheta)
            pos = pos + heading_mid * h
            heading = _rotate(heading, axis, dtheta)
            side = _rotate(side, axis, dtheta)
            pts.append(pos.copy())
        table.append({"kind": kind, "s_start": float(s), "bend_radius": float(rho),
                      "angle_deg": float(np.degrees(angle))})
        s += span
    return np.array(pts), s, table


def generate_environment(profile: str, seed: int, texture_seed=None, far_clip=DEFAULT_FAR_CLIP,
                         texture_amplitude=DEFAULT_TEXTURE_AMPLITUDE) -> TubeEnvironment:
    """Procedural colon-like tube; a pure function of ``(profile, seed)``.

    ``simple`` has 3-5 gentle bends (bend radius >= 4x lumen radius);
    ``complex`` has 6-10 bends, at least two tighter than 2.5x lumen radius.
    """
    if profile not in PROFILES:
        raise GeometryError(f"unknown profile {profile!r}")
    rng = np.random.default_rng([_PROFILE_CODES[profile], int(seed)])
    for _attempt in range(200):
        r_mean = rng.uniform(17.5, 22.0)
        amp = rng.uniform(1.0, 2.5)
        waves = rng.uniform(2.0, 4.0)
        ph = rng.uniform(0, 2 * np.pi)

        def radius_fn(s, r_mean=r_mean, amp=amp, waves=waves, ph=ph):
            return r_mean + amp * np.sin(2 * np.pi * waves * s / 1000.0 + ph)

        bends = _plan_bends(profile, rng)
        n = len(bends)
        spans = sum(2.0 * angle * ratio * r_mean for _, ratio, angle in bends)
        target = rng.uniform(680.0, 1120.0)
        room = target - spans - 70.0 - 90.0
        if room < 15.0 * (n - 1):
            continue
        inner = 15.0 + (room - 15.0 * (n - 1)) * rng.dirichlet(np.full(n - 1, 4.0))
        straights = [70.0, *inner, 90.0]
        dense, total, table = _trace_path(bends, straights, radius_fn, rng)
        if not 620.0 <= total <= 1180.0:
            continue
        # reject paths that fold back near themselves
        seg = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(dense, axis=0), axis=1))])
        pairs = cKDTree(dense).query_pairs(3.2 * 25.0, output_type="ndarray")
        if len(pairs) and np.any(np.abs(seg[pairs[:, 0]] - seg[pairs[:, 1]]) > 6.0 * 25.0):
            continue
        step = 8.0
        n_ctrl = int(np.ceil(seg[-1] / step)) + 1
        s_ctrl = np.linspace(0.0, seg[-1], n_ctrl)
        ctrl = np.stack([np.interp(s_ctrl, seg, dense[:, k]) for k in range(3)], axis=1)
        radii = np.clip(radius_fn(s_ctrl), 15.0, 25.0)
        env = TubeEnvironment(
            build_centerline(ctrl, radii),
            texture_seed=int(seed if texture_seed is None else texture_seed),
            profile_tag=profile,
            far_clip=far_clip,
            texture_amplitude=texture_amplitude,
            meta={"bends": table},
        )
        if env.min_radius() <= 2 * TIP_RADIUS:
            continue
        if not _bends_ok(env, profile):
            continue
        return env
    raise GeometryError(f"could not generate a valid {profile} environment for seed {seed}")


def _bends_ok(env, profile):
    sp = env.centerline
    s = np.arange(0.0, sp.length, 1.0)
    k = sp.curvature_at(s)
    r = sp.radius_at(s)
    runs = detect_bends(sp)
    if profile == "simple":
        if not 3 <= len(runs) <= 5:
            return False
        return bool(np.all(1.0 / np.maximum(k, 1e-12) >= 4.0 * r))
    if not 6 <= len(runs) <= 10:
        return False
    sharp = 0
    for a, b in runs:
        m = (s >= a) & (s <= b)
        if np.any(1.0 / np.maximum(k[m], 1e-12) <= 2.5 * r[m]):
            sharp += 1
    return sharp >= 2


def detect_bends(spline: CenterlineSpline, threshold=1.0 / 400.0, spacing=1.0, window=16.0):
    """Arclength intervals where curvature exceeds ``threshold``.

    Curvature is box-smoothed over ``window`` mm first (Catmull-Rom curvature
    jumps at control points); bends are delimited by the zero-crossings of
    ``smoothed curvature - threshold``.
    """
    s = np.arange(0.0, spline.length, spacing)
    k = spline.curvature_at(s)
    w = max(1, int(round(window / spacing)))
    k = np.convolve(k, np.ones(w) / w, mode="same")
    above = k > threshold
    edges = np.flatnonzero(np.diff(above.astype(int)))
    starts = list(edges[~above[edges]] + 1) if len(edges) else []
    ends = list(edges[above[edges]]) if len(edges) else []
    if above[0]:
        starts.insert(0, 0)
    if above[-1]:
        ends.append(len(s) - 1)
    return [(float(s[a]), float(s[b])) for a, b in zip(starts, ends)]
