"""Walk through one procedural tube: geometry, a rendered frame and the
navigation target the controller would steer toward.

Run:  python demos/01_tube_and_camera.py [output_dir]
"""
import sys
from pathlib import Path

import numpy as np

from lumennav.geometry import detect_bends, generate_environment
from lumennav.imageio import write_pfm, write_ppm
from lumennav.perception import extract_navigation_point, level_mask
from lumennav.render import CameraIntrinsics, Pose, render_depth, render_rgb

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_output")
out.mkdir(parents=True, exist_ok=True)

env = generate_environment("complex", 7)
sp = env.centerline
print(f"complex tube, seed 7: {env.length:.0f} mm long, radius {sp.radii.min():.1f}-{sp.radii.max():.1f} mm")
for a, b in detect_bends(sp):
    print(f"  bend from s = {a:.0f} to {b:.0f} mm")

# a camera sitting on the centerline a third of the way in, looking downstream
s = env.length / 3
pose = Pose.looking_along(sp.point_at(s), sp.tangent_at(s))
cam = CameraIntrinsics(128, 128, 120.0, 300.0)
depth = render_depth(env, pose, cam)
rgb = render_rgb(env, pose, cam, light_intensity=1.0)
write_pfm(out / "frame_depth.pfm", depth.depth.astype(np.float32))
write_ppm(out / "frame_rgb.ppm", rgb.pixels)
print(f"depth range {depth.depth[depth.valid].min():.1f}-{depth.depth[depth.valid].max():.1f} mm, "
      f"{(~depth.valid).sum()} pixels beyond the far clip")

# the 8th of 20 depth levels, as a thin band and as the region its contour encloses
for region in ("band", "enclosed"):
    t = extract_navigation_point(depth, 8, 20, region=region)
    n = level_mask(depth, 8, 20, region=region).sum()
    print(f"level 8 {region:8s}: {n:5d} pixels, target ({t.t_x:.1f}, {t.t_y:.1f}), "
          f"largest component {t.level_pixel_count} px")
deep = extract_navigation_point(depth, 20, 20)
print(f"deepest level centroid ({deep.t_x:.1f}, {deep.t_y:.1f}); image center is (64, 64)")
print(f"wrote {out / 'frame_depth.pfm'} and {out / 'frame_rgb.ppm'}")
