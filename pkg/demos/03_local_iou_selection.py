"""How the student decides which pixels of a pseudo-label to trust.

A proxy network is fitted to the same labels. Where the proxy and the label
disagree inside a window, that window is left out of the student's loss.

    python3 demos/03_local_iou_selection.py
"""
from motionseg.maskmetrics import connected_components, effective_iou, iou, local_iou
from motionseg.pipeline import selection_masks
from motionseg.scenes import SceneConfig, make_dataset

# first scene with two separate tools
for gt in make_dataset(SceneConfig(seed=4), 20).masks:
    comps, n = connected_components(gt)
    if n == 2:
        break

# the label misses the second tool; the proxy (here a stand-in) found both
label = comps == 1
proxy = gt.astype(float)
print(f"label IoU {iou(label, gt):.3f}, proxy IoU {iou(proxy > 0.5, gt):.3f}")

for w in (4, 16, 64):
    li = local_iou(proxy > 0.5, label, w, w)
    sel = selection_masks(proxy[None], label[None], w)[0]
    eff = effective_iou(gt, label, sel) if sel.any() else float("nan")
    print(f"window {w:2d}: mean local IoU {li.mean():.3f}, kept {sel.mean():5.1%} of pixels, "
          f"label IoU on kept pixels {eff:.3f}")
