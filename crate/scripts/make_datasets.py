#!/usr/bin/env python3
"""Regenerate the bundled datasets under data/.

iris.csv        -- copied from scikit-learn's bundled copy of the UCI Iris data,
                   rewritten as `sepal_length,sepal_width,petal_length,petal_width,species`.
mnist-subset/   -- 3000 real MNIST digits (2000 train / 1000 test) taken from the
                   5000-sample MNIST extract shipped inside the `mlxtend` wheel,
                   shuffled with a fixed seed and written as standard IDX files.

Usage: pip download mlxtend --no-deps -d /tmp/mlx && python3 scripts/make_datasets.py /tmp/mlx/mlxtend-*.whl
"""
import gzip
import io
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parent.parent
SPECIES = ["setosa", "versicolor", "virginica"]


def write_iris():
    import sklearn

    src = Path(sklearn.__file__).parent / "datasets" / "data" / "iris.csv"
    rows = src.read_text().strip().splitlines()[1:]
    out = ["sepal_length,sepal_width,petal_length,petal_width,species"]
    for r in rows:
        *feats, label = r.split(",")
        out.append(",".join(feats + [SPECIES[int(label)]]))
    (ROOT / "data" / "iris.csv").write_text("\n".join(out) + "\n")


def write_idx_images(path, images):
    n = images.shape[0]
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, labels.shape[0]))
        f.write(labels.astype(np.uint8).tobytes())


def write_mnist(wheel):
    with zipfile.ZipFile(wheel) as z:
        raw = z.read("mlxtend/data/data/mnist_5k.csv.gz")
    table = np.genfromtxt(io.BytesIO(gzip.decompress(raw)), delimiter=",")
    perm = np.random.default_rng(20220527).permutation(table.shape[0])
    table = table[perm]
    x, y = table[:, :-1], table[:, -1].astype(int)
    out = ROOT / "data" / "mnist-subset"
    out.mkdir(parents=True, exist_ok=True)
    write_idx_images(out / "train-images-idx3-ubyte", x[:2000])
    write_idx_labels(out / "train-labels-idx1-ubyte", y[:2000])
    write_idx_images(out / "t10k-images-idx3-ubyte", x[2000:3000])
    write_idx_labels(out / "t10k-labels-idx1-ubyte", y[2000:3000])


if __name__ == "__main__":
    write_iris()
    write_mnist(sys.argv[1])
