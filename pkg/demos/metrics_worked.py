"""The four saliency measures on small hand-made cases and a threshold sweep."""
import numpy as np

from pcsod.metrics import e_measure_at, evaluate, f_measure_at, iou, mae

# 4 hits, 1 false alarm, 4 misses
P = np.array([0.9] * 5 + [0.1] * 4 + [0.1])
G = np.array([1, 1, 1, 1, 0, 1, 1, 1, 1, 0])
print("F at 0.5", round(f_measure_at(P, G, 0.5), 4))
print("E at 0.5", round(e_measure_at(P, G, 0.5), 4))
print("IoU", round(iou(P, G), 4))
print("MAE", round(mae(np.array([0.2, 0.8, 0.5, 0.0]), np.array([0, 1, 1, 0])), 4))

rng = np.random.default_rng(0)
G = rng.random(1000) < 0.2
P = np.clip(G * 0.3 + rng.random(1000) * 0.7, 0, 1)
r = evaluate(P, G)
print(f"noisy map: MAE {r.mae:.3f} maxF {r.max_f:.3f} meanF {r.mean_f:.3f} maxE {r.max_e:.3f} IoU {r.iou:.3f}")
