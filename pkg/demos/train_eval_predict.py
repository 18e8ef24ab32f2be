"""Short end-to-end run: train a narrow model, score it, write a prediction PLY."""
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from pcsod.data import PointView, generate_scene, random_recipe, save_ply
from pcsod.metrics import aggregate, evaluate
from pcsod.training import checkpoint_save, infer_full_view, parse_config, train

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)
model_cfg, train_cfg = parse_config(Path(__file__).parent.joinpath("../configs/desk.cfg").read_text())
train_cfg = replace(train_cfg, epochs=15)

rng = np.random.default_rng(0)
views = [generate_scene(random_recipe(rng), 8192) for _ in range(14)]
train_views, test_views = views[:10], views[10:]


def progress(step, loss, model):
    if step % 25 == 0:
        print(f"step {step:4d} loss {loss:.4f}", flush=True)
    return False


result = train(train_views, train_cfg, model_cfg, on_step=progress)
checkpoint_save(out / "demo.ckpt", result.model, result.optimizer, train_cfg)

reports = []
for i, view in enumerate(test_views):
    probs = infer_full_view(view, result.model, votes=3, rng=[0, i])
    reports.append(evaluate(probs, view.labels, name=f"test_{i}"))
total = aggregate(reports)
print(f"held-out: MAE {total.mae:.3f} maxF {total.max_f:.3f} IoU {total.iou:.3f}")

view = test_views[0]
probs = infer_full_view(view, result.model, votes=3, rng=0)
pred = PointView(view.positions, view.colors, (probs >= 0.5).astype(np.int8))
save_ply(pred, out / "prediction.ply", scalar=probs)
print("wrote", out / "prediction.ply")
