"""An end-to-end run, small enough for a few minutes on one core.

Teacher (flow to mask, trained adversarially against shape priors), then
proxy and student on the teacher's pseudo-labels.

    python3 demos/04_train_small.py [run_dir]
"""
import json
import sys

from motionseg.pipeline import TrainConfig, run_training
from motionseg.scenes import SceneConfig, make_dataset, make_priors

sc = SceneConfig(seed=0)
train = make_dataset(sc, 128)
test = make_dataset(sc, 32, start=100000)
priors = make_priors(sc, 128, start=200000)

cfg = TrainConfig(seed=0, mode="3step", teacher_epochs=8, proxy_epochs=12, student_epochs=14)
res = run_training(cfg, train, priors, test, out_dir=sys.argv[1] if len(sys.argv) > 1 else None)

for row in res.history:
    if row["iou_gt"] not in ("", None):
        print(f"{row['stage']:8s} epoch {row['epoch']:2d}  test IoU {row['iou_gt']:.3f}")
keys = ("pseudo_label_iou", "teacher_test_iou", "proxy_test_iou", "student_test_iou")
print(json.dumps({k: round(res.report[k], 3) for k in keys}, indent=1))
