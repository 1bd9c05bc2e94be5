"""Build the bundled desk-scale MNIST subset as gzipped IDX files.

Source: the 5000-sample MNIST excerpt shipped inside the mlxtend wheel
(``mlxtend/data/data/mnist_5k.csv.gz``, 500 images per digit). The split is
stratified, 400 train / 100 test images per class, shuffled with seed 0.

    pip download --no-deps mlxtend==0.24.0 -d /tmp/wheels
    python scripts/make_mnist_subset.py /tmp/wheels/mlxtend-0.24.0-py3-none-any.whl
"""
import argparse
import gzip
import io
import struct
import zipfile
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "isaac" / "data"


def write_idx(path, images, labels):
    with gzip.GzipFile(path.with_name(path.name + "-images-idx3-ubyte.gz"), "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
        f.write(images.astype(np.uint8).tobytes())
    with gzip.GzipFile(path.with_name(path.name + "-labels-idx1-ubyte.gz"), "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("wheel")
    args = parser.parse_args()
    raw = zipfile.ZipFile(args.wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    table = np.loadtxt(io.StringIO(gzip.decompress(raw).decode()), delimiter=",")
    pixels, labels = table[:, :-1], table[:, -1].astype(int)

    rng = np.random.default_rng(0)
    train_idx, test_idx = [], []
    for digit in range(10):
        idx = rng.permutation(np.flatnonzero(labels == digit))
        train_idx.append(idx[:400])
        test_idx.append(idx[400:])
    train_idx = rng.permutation(np.concatenate(train_idx))
    test_idx = rng.permutation(np.concatenate(test_idx))

    OUT.mkdir(parents=True, exist_ok=True)
    write_idx(OUT / "subset-train", pixels[train_idx], labels[train_idx])
    write_idx(OUT / "subset-test", pixels[test_idx], labels[test_idx])


if __name__ == "__main__":
    main()
