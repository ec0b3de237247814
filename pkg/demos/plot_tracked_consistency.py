"""
Tracked points and temporal consistency
=======================================

Between two frames of the same drive, a point on the road stays on the road.
We detect corners, follow them with pyramidal Lucas-Kanade, keep the ones
that survive a forward-backward check, and then ask how often a half-trained
model gives the two ends of a track different labels. Those disagreeing pairs
are what the refinement phase trains on.

    python3 demos/plot_tracked_consistency.py out_dir
"""

import sys
from pathlib import Path

import numpy as np
from PIL import Image

from geoseg.cli import overlay
from geoseg.metrics import consistency_rate, inconsistent_flags, iou
from geoseg.net import SegNet
from geoseg.pipeline import Frame, TrainConfig, train_phase1
from geoseg.synthworld import SceneSpec, ground_flow, render_frame, to_uint8
from geoseg.tracker import Status, track_frames
from geoseg.weakmask import PartialMask, rasterize_partial_mask

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

spec = SceneSpec(n_frames=12)
a, gt = render_frame(spec, 0)
b, _ = render_frame(spec, 5)

tracks = track_frames(a, b)
for s in Status:
    print(f"{s.name:14s}{int(np.sum(tracks.status == s))}")
valid = tracks.valid()

# on the synthetic road we know where ground points must go; five frames apart the
# near road is also stretched by perspective, which LK's translation model ignores
road = gt[valid.p[:, 1].astype(int), valid.p[:, 0].astype(int)]
err = np.linalg.norm(valid.q[road] - ground_flow(spec, 0, 5, valid.p[road]), axis=1)
print(f"median error of {road.sum()} road tracks: {np.median(err):.3f} px")

# a short geometric warm-up: the model has found the road but is still unsure near its edges
mask = rasterize_partial_mask(spec.rig, spec.vehicle, spec.width, spec.height)
frames = [Frame(str(i), render_frame(spec, i)[0], spec.rig, mask, spec.speed) for i in range(spec.n_frames)]
model, _ = train_phase1(SegNet(seed=0), frames, TrainConfig(phase1_epochs=6, lr=1e-3))

print(f"road IoU on frame 0: {iou(model.predict(a), gt).iou_road:.3f}")
print(f"consistency rate: {consistency_rate(model, (a, b), valid):.3f}")
flags = inconsistent_flags(model(a), model(b), valid)

pred = model.predict(a)
labels = np.where(pred, 255, 0).astype(np.uint8)
img = overlay(to_uint8(a), PartialMask(labels), valid, flags)
Image.fromarray(img).save(out / "tracks.png")
print(f"{flags.sum()} of {len(valid)} pairs disagree (magenta); wrote", out / "tracks.png")
