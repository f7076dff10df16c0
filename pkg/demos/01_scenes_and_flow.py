"""A first look at the synthetic data: two frames, the tool mask and its optical flow.

    python3 demos/01_scenes_and_flow.py [out.png]
"""
import sys

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from motionseg.augment import flow_to_color
from motionseg.scenes import SceneConfig, gen_scene_pair, gen_shape_prior

cfg = SceneConfig(seed=0)
pair = gen_scene_pair(cfg, 3)

# frames are float RGB in [0, 1]; the flow is exact because the motion is analytic
print("frame", pair.frame_t.shape, pair.frame_t.dtype)
print("tools", len(pair.motions), "foreground pixels", int(pair.gt_mask.sum()))
for k, m in enumerate(pair.motions):
    print(f"  tool {k}: translation ({m.translation[0]:+.2f}, {m.translation[1]:+.2f}) px, rotation {m.rotation:+.3f} rad")
print("background shift", tuple(round(v, 2) for v in pair.bg_translation))

speed = np.linalg.norm(pair.flow, axis=-1)
print(f"mean speed: tools {speed[pair.gt_mask].mean():.2f}, background {speed[~pair.gt_mask].mean():.2f}")

# shape priors come from a separate stream and are never paired with a frame
prior = gen_shape_prior(cfg, 0)

fig, ax = plt.subplots(1, 5, figsize=(13, 2.8))
for a, img, title in zip(ax, [pair.frame_t, pair.frame_t1, pair.gt_mask, flow_to_color(pair.flow), prior],
                         ["frame t", "frame t+1", "mask", "flow", "a shape prior"]):
    a.imshow(img, cmap="gray")
    a.set_title(title)
    a.axis("off")
out = sys.argv[1] if len(sys.argv) > 1 else "scenes.png"
fig.savefig(out, dpi=90, bbox_inches="tight")
print("wrote", out)
