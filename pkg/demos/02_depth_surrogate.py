"""Fit the depth-degradation surrogate to the two (Abs.Rel, delta_1) targets
and look at what the noise does to the navigation target.

Run:  python demos/02_depth_surrogate.py   (about half a minute)
"""
import numpy as np

from lumennav.geometry import generate_environment
from lumennav.perception import (
    BASELINE_TARGETS,
    DEPTHCOLNET_TARGETS,
    abs_rel,
    calibrate_profile,
    degrade_depth,
    delta1,
    extract_navigation_point,
    render_frames,
)
from lumennav.render import CameraIntrinsics

cam = CameraIntrinsics(64, 64, 120.0, 300.0)
search_env = generate_environment("simple", 1)
holdout_env = generate_environment("simple", 1001)

profiles = {}
for name, (a, d) in (("fine-tuned", DEPTHCOLNET_TARGETS), ("foundation baseline", BASELINE_TARGETS)):
    res = calibrate_profile(search_env, cam, a, d, n_validate=200, validation_env=holdout_env)
    profiles[name] = res.profile
    p = res.profile
    print(f"{name:20s} target ({a}, {d}) -> held-out ({res.abs_rel:.3f}, {res.delta1:.3f}); "
          f"sigma {p.sigma_mult:.3f}, dropout {p.dropout_rate:.3f}")

# how far does the level-8 target move under each surrogate?
frames = render_frames(generate_environment("complex", 2), cam, 40, seed=9)
for name, prof in profiles.items():
    shifts, metric = [], []
    for i, gt in enumerate(frames):
        pred = degrade_depth(gt, prof, i)
        t0 = extract_navigation_point(gt, 8, 20, region="enclosed")
        t1 = extract_navigation_point(pred, 8, 20, region="enclosed")
        if t0.valid and t1.valid:
            shifts.append(np.hypot(t1.t_x - t0.t_x, t1.t_y - t0.t_y))
        metric.append((abs_rel(pred, gt), delta1(pred, gt)))
    m = np.mean(metric, axis=0)
    print(f"{name:20s} complex frames: AbsRel {m[0]:.3f} delta1 {m[1]:.3f}, "
          f"median target shift {np.median(shifts):.2f} px (90th pct {np.percentile(shifts, 90):.2f})")
