"""Convert the digits bundled in the npm ``mnist`` package into IDX files.

Fallback for machines that can reach a package registry but not the
official MNIST mirrors. The package holds 10,000 MNIST digits stored as
per-class JSON arrays of 784 grey values in [0, 1]. They are split
stratified into train/test and written with the standard file names::

    npm pack mnist && tar xzf mnist-*.tgz
    python tools/npm_mnist_to_idx.py package/src/digits data/mnist --test-fraction 0.2
"""
import argparse
import json
from pathlib import Path

import numpy as np

from susl.data import write_idx


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("digits_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--test-fraction", type=float, default=0.2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    train_x, train_y, test_x, test_y = [], [], [], []
    for d in range(10):
        flat = np.asarray(json.loads((args.digits_dir / f"{d}.json").read_text())["data"])
        imgs = np.rint(flat.reshape(-1, 28, 28) * 255).astype(np.uint8)
        perm = rng.permutation(len(imgs))
        n_test = int(round(args.test_fraction * len(imgs)))
        test_x.append(imgs[perm[:n_test]])
        train_x.append(imgs[perm[n_test:]])
        test_y += [d] * n_test
        train_y += [d] * (len(imgs) - n_test)

    args.out_dir.mkdir(parents=True, exist_ok=True)
    for split, xs, ys in (("train", train_x, train_y), ("t10k", test_x, test_y)):
        x = np.concatenate(xs)
        y = np.asarray(ys, dtype=np.uint8)
        order = rng.permutation(len(y))
        write_idx(args.out_dir / f"{split}-images-idx3-ubyte", x[order])
        write_idx(args.out_dir / f"{split}-labels-idx1-ubyte", y[order])
        print(split, x.shape)


if __name__ == "__main__":
    main()
