"""
Weak road labels from camera geometry
=====================================

A calibrated camera on a moving car already knows two things about the road
without looking at a single pixel: everything above the horizon is not road,
and the patch of ground a few metres in front of the bumper is. This script
builds that partial mask for a synthetic scene and draws it over the frame.

Run from the repository root::

    python3 demos/plot_weak_labels.py out_dir
"""

import sys
from pathlib import Path

import numpy as np
from PIL import Image

from geoseg.cli import overlay
from geoseg.geometry import horizon_line, road_quadrilateral
from geoseg.synthworld import SceneSpec, render_frame, to_uint8
from geoseg.weakmask import rasterize_partial_mask

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

# a 256x128 camera 1.5 m up, tilted slightly down
spec = SceneSpec()
rig = spec.rig
print("projection matrix:\n", np.round(rig.projection, 3))

# the horizon is the image of the ground plane's line at infinity
line = horizon_line(rig)
print(f"horizon at the image centre: v = {line.v_at(spec.u0):.2f}")

# the ground rectangle 2..5 m ahead of the bumper, car-width wide
quad = road_quadrilateral(rig, spec.vehicle)
print("road quadrilateral (u, v):\n", np.round(quad.vertices, 2))

mask = rasterize_partial_mask(rig, spec.vehicle, spec.width, spec.height)
c = mask.counts()
print(f"ROAD {c['road']}  NONROAD {c['nonroad']}  IGNORE {c['ignore']} pixels")

rgb, gt = render_frame(spec, 0)
frame = to_uint8(rgb)

# every weak label agrees with the exact mask; that is the premise of training
print("ROAD pixels that are really road:", bool(gt[mask.road].all()))
print("NONROAD pixels that are really not road:", bool((~gt[mask.nonroad]).all()))

Image.fromarray(frame).save(out / "frame.png")
Image.fromarray(overlay(frame, mask)).save(out / "weak_labels.png")
print("wrote", out / "weak_labels.png")
