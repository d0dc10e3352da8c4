"""Independent reference implementations used to check the library."""
import math
from collections import deque

import numpy as np


def cylinder_range(radius, directions):
    """Range along unit rays from a point on the axis of an infinite cylinder (axis +z)."""
    d = np.asarray(directions, dtype=float)
    sin_t = np.hypot(d[..., 0], d[..., 1])
    with np.errstate(divide="ignore"):
        return np.where(sin_t > 0, radius / sin_t, np.inf)


def brute_force_target(depth, valid, level, n_levels=20, min_pixels=10, region="band"):
    """Sort, threshold, flood-fill (4-neighbour BFS) and average coordinates."""
    h, w = depth.shape
    vals = sorted(float(depth[r, c]) for r in range(h) for c in range(w) if valid[r, c])
    n = len(vals)
    if n == 0 or vals[0] == vals[-1]:
        return None

    def q(k):
        if k == 0:
            return -math.inf
        return vals[math.ceil(n * k / n_levels) - 1]

    lo, hi = q(level - 1), q(level)
    inside = [[valid[r, c] and depth[r, c] > lo and (region == "enclosed" or depth[r, c] <= hi)
               for c in range(w)] for r in range(h)]
    seen = [[False] * w for _ in range(h)]
    best = []
    for r0 in range(h):
        for c0 in range(w):
            if not inside[r0][c0] or seen[r0][c0]:
                continue
            comp = []
            queue = deque([(r0, c0)])
            seen[r0][c0] = True
            while queue:
                r, c = queue.popleft()
                comp.append((r, c))
                for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < h and 0 <= cc < w and inside[rr][cc] and not seen[rr][cc]:
                        seen[rr][cc] = True
                        queue.append((rr, cc))
            if len(comp) > len(best):
                best = comp
    if not best:
        return None
    tx = sum(c for _, c in best) / len(best) + 0.5
    ty = sum(r for r, _ in best) / len(best) + 0.5
    return tx, ty, len(best) >= min_pixels, len(best)


def gae_reference(rewards, values, dones, gamma, lam):
    """Advantages by explicit forward sums of discounted TD residuals."""
    n = len(rewards)
    deltas = [rewards[t] + gamma * values[t + 1] * (1 - dones[t]) - values[t] for t in range(n)]
    adv = []
    for t in range(n):
        total, coef = 0.0, 1.0
        for k in range(t, n):
            total += coef * deltas[k]
            if dones[k]:
                break
            coef *= gamma * lam
        adv.append(total)
    return np.array(adv), np.array(adv) + np.asarray(values[:-1])


def discounted_sums(rewards, gamma):
    return np.array([sum(gamma**(k - t) * rewards[k] for k in range(t, len(rewards)))
                     for t in range(len(rewards))])


def ray_cylinder_range(origin, directions, radius):
    """First positive intersection of rays from ``origin`` (inside) with the infinite cylinder x^2 + y^2 = r^2."""
    o = np.asarray(origin, dtype=float)
    d = np.asarray(directions, dtype=float)
    a = d[..., 0] ** 2 + d[..., 1] ** 2
    b = 2.0 * (o[0] * d[..., 0] + o[1] * d[..., 1])
    c = o[0] ** 2 + o[1] ** 2 - radius**2
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (-b + np.sqrt(b * b - 4.0 * a * c)) / (2.0 * a)
    return np.where(a > 0, t, np.inf)
