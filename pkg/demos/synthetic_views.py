"""Generate a few labeled synthetic views, write them as PLY and read them back."""
import sys
from pathlib import Path

import numpy as np

from pcsod.data import encode_input, generate_scene, load_ply, random_recipe, save_ply

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "views"
out.mkdir(parents=True, exist_ok=True)

rng = np.random.default_rng(0)
for i in range(3):
    recipe = random_recipe(rng)
    view = generate_scene(recipe, n_points=8192)
    path = out / f"view_{i}.ply"
    save_ply(view, path)
    back = load_ply(path)
    assert np.array_equal(back.positions, view.positions)
    feats = encode_input(view).features
    print(f"{path.name}: {recipe.object_kind:7s} {len(view)} points, "
          f"{view.labels.mean():.1%} salient, features {feats.shape}")
