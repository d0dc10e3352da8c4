"""Numba kernels for sphere tracing the textured tube SDF.

The tube is described by uniformly spaced centerline samples; the nearest
sample is found by hill-climbing from a per-ray hint, which is valid while
the query point stays inside the lumen.
"""
import math

import numpy as np
from numba import njit


@njit(cache=True)
def _noise(grid, cell, x_s, theta):
    ns, nt = grid.shape
    x = x_s / cell
    y = theta / (2.0 * math.pi) * nt
    ix = int(math.floor(x))
    if ix < 0:
        ix = 0
        fx = 0.0
    elif ix > ns - 2:
        ix = ns - 2
        fx = 1.0
    else:
        fx = x - ix
    iy = int(math.floor(y))
    fy = y - iy
    iy0 = iy % nt
    iy1 = (iy + 1) % nt
    fx = fx * fx * (3.0 - 2.0 * fx)
    fy = fy * fy * (3.0 - 2.0 * fy)
    a = grid[ix, iy0] * (1.0 - fx) + grid[ix + 1, iy0] * fx
    b = grid[ix, iy1] * (1.0 - fx) + grid[ix + 1, iy1] * fx
    return a * (1.0 - fy) + b * fy


@njit(cache=True)
def _climb(px, py, pz, pts, k):
    n = pts.shape[0]
    dx = px - pts[k, 0]
    dy = py - pts[k, 1]
    dz = pz - pts[k, 2]
    dk = dx * dx + dy * dy + dz * dz
    while k + 1 < n:
        dx = px - pts[k + 1, 0]
        dy = py - pts[k + 1, 1]
        dz = pz - pts[k + 1, 2]
        d = dx * dx + dy * dy + dz * dz
        if d < dk:
            k += 1
            dk = d
        else:
            break
    while k > 0:
        dx = px - pts[k - 1, 0]
        dy = py - pts[k - 1, 1]
        dz = pz - pts[k - 1, 2]
        d = dx * dx + dy * dy + dz * dz
        if d < dk:
            k -= 1
            dk = d
        else:
            break
    return k


@njit(cache=True)
def _project(px, py, pz, pts, a):
    # projection onto segment a..a+1, returns (lambda, squared distance)
    ex = pts[a + 1, 0] - pts[a, 0]
    ey = pts[a + 1, 1] - pts[a, 1]
    ez = pts[a + 1, 2] - pts[a, 2]
    wx = px - pts[a, 0]
    wy = py - pts[a, 1]
    wz = pz - pts[a, 2]
    ee = ex * ex + ey * ey + ez * ez
    lam = (wx * ex + wy * ey + wz * ez) / ee
    if lam < 0.0:
        lam = 0.0
    elif lam > 1.0:
        lam = 1.0
    fx = wx - lam * ex
    fy = wy - lam * ey
    fz = wz - lam * ez
    return lam, fx * fx + fy * fy + fz * fz


@njit(cache=True)
def tube_sdf(px, py, pz, k, pts, nrm, bi, rad, ds, tex, tex_cell, amp):
    """Inside-positive signed distance to the textured wall; returns (sdf, hint)."""
    n = pts.shape[0]
    k = _climb(px, py, pz, pts, k)
    best_f = float(k)
    best_d2 = 1e300
    if k > 0:
        lam, d2 = _project(px, py, pz, pts, k - 1)
        best_f = k - 1 + lam
        best_d2 = d2
    if k < n - 1:
        lam, d2 = _project(px, py, pz, pts, k)
        if d2 < best_d2:
            best_f = k + lam
            best_d2 = d2
    i0 = int(math.floor(best_f))
    if i0 > n - 2:
        i0 = n - 2
    w = best_f - i0
    r = rad[i0] * (1.0 - w) + rad[i0 + 1] * w
    dist = math.sqrt(best_d2)
    # far from the wall the untextured lower bound is a safe, cheaper step
    if amp > 0.0 and r * (1.0 - amp) - dist > 1.0:
        return r * (1.0 - amp) - dist, k
    if amp > 0.0:
        cx = pts[i0, 0] * (1.0 - w) + pts[i0 + 1, 0] * w
        cy = pts[i0, 1] * (1.0 - w) + pts[i0 + 1, 1] * w
        cz = pts[i0, 2] * (1.0 - w) + pts[i0 + 1, 2] * w
        vx = px - cx
        vy = py - cy
        vz = pz - cz
        nx = nrm[i0, 0] * (1.0 - w) + nrm[i0 + 1, 0] * w
        ny = nrm[i0, 1] * (1.0 - w) + nrm[i0 + 1, 1] * w
        nz = nrm[i0, 2] * (1.0 - w) + nrm[i0 + 1, 2] * w
        bx = bi[i0, 0] * (1.0 - w) + bi[i0 + 1, 0] * w
        by = bi[i0, 1] * (1.0 - w) + bi[i0 + 1, 1] * w
        bz = bi[i0, 2] * (1.0 - w) + bi[i0 + 1, 2] * w
        theta = math.atan2(vx * bx + vy * by + vz * bz, vx * nx + vy * ny + vz * nz)
        r = r * (1.0 + amp * _noise(tex, tex_cell, best_f * ds, theta))
    return r - dist, k


@njit(cache=True)
def march(origin, dirs, hint, pts, nrm, bi, rad, ds, tex, tex_cell, amp,
          far, eps, safety, max_steps, refine=3, fd=1e-3, max_refine=0.5):
    """Sphere-trace every ray; returns range (0 where no hit) and per-ray hint."""
    n_rays = dirs.shape[0]
    depth = np.zeros(n_rays)
    hints = np.empty(n_rays, dtype=np.int64)
    for i in range(n_rays):
        dx = dirs[i, 0]
        dy = dirs[i, 1]
        dz = dirs[i, 2]
        t = 0.0
        k = hint
        hit = False
        for _ in range(max_steps):
            sdf, k = tube_sdf(origin[0] + t * dx, origin[1] + t * dy, origin[2] + t * dz,
                              k, pts, nrm, bi, rad, ds, tex, tex_cell, amp)
            if sdf < eps:
                hit = True
                break
            t += safety * sdf
            if t > far:
                break
        if hit:
            # the march stops up to eps inside the wall, which is eps/cos(incidence)
            # along the ray; a few Newton steps on the SDF land on the zero crossing
            for _ in range(refine):
                s0, k = tube_sdf(origin[0] + t * dx, origin[1] + t * dy, origin[2] + t * dz,
                                 k, pts, nrm, bi, rad, ds, tex, tex_cell, amp)
                s1, _ = tube_sdf(origin[0] + (t + fd) * dx, origin[1] + (t + fd) * dy,
                                 origin[2] + (t + fd) * dz, k, pts, nrm, bi, rad, ds, tex, tex_cell, amp)
                slope = (s1 - s0) / fd
                if slope > -1e-3:
                    break
                step = -s0 / slope
                if step > max_refine:
                    step = max_refine
                elif step < -max_refine:
                    step = -max_refine
                t += step
        hints[i] = k
        if hit and t > 0.0 and t <= far:
            depth[i] = t
    return depth, hints


@njit(cache=True)
def shade(origin, dirs, depth, hints, pts, nrm, bi, rad, ds, tex, tex_cell, amp,
          albedo_tex, albedo_cell, albedo_amp, base_color, falloff_ref, specular, shininess):
    """Headlight Lambert + Phong radiance per ray, before exposure scaling."""
    n_rays = dirs.shape[0]
    out = np.zeros((n_rays, 3))
    h = 0.05
    for i in range(n_rays):
        t = depth[i]
        if t <= 0.0:
            continue
        px = origin[0] + t * dirs[i, 0]
        py = origin[1] + t * dirs[i, 1]
        pz = origin[2] + t * dirs[i, 2]
        k = hints[i]
        gx = (tube_sdf(px + h, py, pz, k, pts, nrm, bi, rad, ds, tex, tex_cell, amp)[0]
              - tube_sdf(px - h, py, pz, k, pts, nrm, bi, rad, ds, tex, tex_cell, amp)[0])
        gy = (tube_sdf(px, py + h, pz, k, pts, nrm, bi, rad, ds, tex, tex_cell, amp)[0]
              - tube_sdf(px, py - h, pz, k, pts, nrm, bi, rad, ds, tex, tex_cell, amp)[0])
        gz = (tube_sdf(px, py, pz + h, k, pts, nrm, bi, rad, ds, tex, tex_cell, amp)[0]
              - tube_sdf(px, py, pz - h, k, pts, nrm, bi, rad, ds, tex, tex_cell, amp)[0])
        gn = math.sqrt(gx * gx + gy * gy + gz * gz)
        if gn == 0.0:
            continue
        # gradient of the inside-positive SDF points away from the wall, toward the camera
        cos_i = -(gx * dirs[i, 0] + gy * dirs[i, 1] + gz * dirs[i, 2]) / gn
        if cos_i <= 0.0:
            continue
        # albedo modulation indexed by the nearest-sample arclength
        kk = hints[i]
        vx = px - pts[kk, 0]
        vy = py - pts[kk, 1]
        vz = pz - pts[kk, 2]
        theta = math.atan2(vx * bi[kk, 0] + vy * bi[kk, 1] + vz * bi[kk, 2],
                           vx * nrm[kk, 0] + vy * nrm[kk, 1] + vz * nrm[kk, 2])
        mod = 1.0 + albedo_amp * _noise(albedo_tex, albedo_cell, kk * ds, theta)
        fall = (falloff_ref / t) ** 2
        # headlight: reflection of the view ray makes angle 2*theta_i with it
        cos_r = 2.0 * cos_i * cos_i - 1.0
        spec = specular * cos_r ** shininess if cos_r > 0.0 else 0.0
        for c in range(3):
            out[i, c] = fall * (base_color[c] * mod * cos_i + spec)
    return out
