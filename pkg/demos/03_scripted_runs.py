"""Drive the privileged oracle and the deepest-point follower through one
held-out tube, score both and draw their paths.

Run:  python demos/03_scripted_runs.py [output_dir]
"""
import sys
from pathlib import Path

from lumennav.env import EpisodeConfig
from lumennav.geometry import generate_environment
from lumennav.metrics import evaluate, plot_trajectories, scripted_lumen_follower, scripted_oracle
from lumennav.perception import DegradationProfile

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_output")
out.mkdir(parents=True, exist_ok=True)

tube = generate_environment("complex", 900)
# a profile close to the calibrated fine-tuned surrogate
profile = DegradationProfile(sigma_mult=0.198, blur_radius=1.0, dropout_rate=0.078)
cfg = EpisodeConfig(forward_mode="constant")

logs = {
    "oracle (reads the centerline)": scripted_oracle(tube, cfg, profile, seed=0),
    "deepest-point follower": scripted_lumen_follower(tube, cfg, profile, seed=0),
}
print(f"{'controller':32s} {'steps':>6s} {'done':>6s} {'d_geo':>7s} {'s_nav':>7s} {'jerk':>8s} {'min gap':>7s}")
for name, log in logs.items():
    r = evaluate(log, tube)
    gap = min(tube.wall_distance(p) for p in log.positions)
    print(f"{name:32s} {r.n_steps:6d} {r.completion:6.2f} {r.d_geo:7.3f} {r.s_nav:7.3f} "
          f"{r.jerk_index:8.5f} {gap:6.1f}mm")

plot_trajectories(out / "scripted_runs.svg", tube, list(logs.values()), list(logs), "complex seed 900")
print(f"wrote {out / 'scripted_runs.svg'}")
