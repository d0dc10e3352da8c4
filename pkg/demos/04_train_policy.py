"""Train a small PPO navigation policy and compare it with the follower.

The default budget (20k steps, a few minutes) only shows the pipeline
working; the acceptance run uses 300k steps.

Run:  python demos/04_train_policy.py [steps]
"""
import sys

from lumennav.metrics import aggregate
from lumennav.perception import DegradationProfile
from lumennav.pipeline import RunConfig, collision_free_completions, run_episodes, train_policy

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 20_000
profile = DegradationProfile(sigma_mult=0.198, blur_radius=1.0, dropout_rate=0.078)
config = RunConfig(degradation=profile, eval_seeds=(900, 901, 902))


def show(row):
    print(f"  update {row['update']:3d}  steps {row['steps']:6d}  episode reward {row['mean_reward']:10.1f}  "
          f"goal rate {row['success_rate']:.2f}")


print(f"training on simple tubes for {steps} steps")
agent, curve = train_policy(config, profile, seed=0, total_steps=steps, progress=show)

print("evaluating on three held-out complex tubes")
for kind in ("policy", "lumen"):
    res = run_episodes(config, profile, kind, agent)
    agg = aggregate([r.report for r in res])
    print(f"  {kind:7s} completions {collision_free_completions(res)}/3  d_geo {agg['d_geo_mean']:.3f}  "
          f"s_nav {agg['s_nav_mean']:.3f}  jerk {agg['jerk_index_mean']:.5f}")
