"""Farthest point sampling, neighbor lookup and interpolation on one cloud."""
import numpy as np

from pcsod.data import generate_scene, random_recipe
from pcsod.geometry import farthest_point_sample, interpolation_weights, knn_indices

pts = generate_scene(random_recipe(1), 4096).positions

res = farthest_point_sample(pts, 64)
idx, gaps = res.selected_indices, res.farthest_distances
print("fps picks", idx[:8], "...")
print("seed offset from centroid", round(float(gaps[0]), 3))
print("farthest gap after each pick", np.round(gaps[1:6], 3), "->", round(float(gaps[-1]), 3))

nbr, dist = knn_indices(pts[idx], pts, 8)
print("nearest neighbour of each sample is itself:", bool((nbr[:, 0] == idx).all()))
print("mean 8-NN radius", round(float(dist[:, -1].mean()), 4))

w_idx, w = interpolation_weights(pts[idx], pts, k=3)
print("interpolation weights sum to one:", bool(np.allclose(w.sum(axis=1), 1)))
