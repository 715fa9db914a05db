"""Desk-sized MNIST run: GM-DGM in the semi-unsupervised regime.

Digits 0-4 have 20% of their labels, digits 5-9 have none. Takes a few
minutes on one core. Expects IDX files under data/mnist.
"""
# %%
import sys
from pathlib import Path

import numpy as np

from susl import data, evaluation, experiments

root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("data/mnist")
cfg = experiments.load_config("mnist_desk", [f"data_dir = {root}", "seeds = 0", "epochs = 20"])
prepared = experiments.prepare_data(cfg)
print("train", prepared.train.features.shape, "test", prepared.test.features.shape)
print("pixels kept after the std filter:", len(prepared.preprocess.kept_dims))

# %%
out = experiments.run_seed(cfg, 0, Path("runs/demo_mnist"), prepared)
rep = out["reports"]["full"]
print(f"ACC {rep['acc']:.3f}  digits 0-4 {rep['acc_labelled_classes']:.3f}  "
      f"digits 5-9 {rep['acc_unlabelled_classes']:.3f}")

# %% cluster -> digit map, skipping empty clusters
conf = np.array(rep["confusion"])
for k in np.flatnonzero(conf.sum(axis=0)):
    print(f"cluster {k:2d}: digit {rep['assignment'][k]}  ({conf[:, k].sum()} test images)")

# %% the generation grid and confident exemplars are PGM files next to the run
print(sorted(p.name for p in (Path(out["dir"]) / "figures").iterdir()))

# %% first row of the grid as a mosaic, dropped pixels restored as zeros
grid = np.load(next((Path(out["dir"]) / "figures").glob("grid_*.npy")))
img = evaluation.grid_to_image(grid[:1], lambda x: data.restore_layout(x, prepared.preprocess), (28, 28))
print(img.shape)
