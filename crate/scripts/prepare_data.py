#!/usr/bin/env python3
"""Regenerate the bundled datasets under data/.

- data/breast_cancer.csv: the Wisconsin Diagnostic Breast Cancer table
  (569 rows, 30 numeric features, M/B diagnosis column), exported from
  scikit-learn's bundled copy.
- data/mnist/: desk-scale subsets of the official MNIST IDX files.
  The training subset keeps the first 2500 digit-0 images plus the first
  500 non-zero images (anomaly-detection runs filter to the normal class);
  the test subset keeps the first 1000 test images unchanged.

Usage:
  python3 scripts/prepare_data.py [--mnist-src DIR]

--mnist-src must point at a directory containing the official files
(train-images-idx3-ubyte, train-labels-idx1-ubyte, t10k-images-idx3-ubyte,
t10k-labels-idx1-ubyte). If omitted, only the CSV is written.
"""

import argparse
import pathlib
import struct

ROOT = pathlib.Path(__file__).resolve().parent.parent


def write_breast_cancer(out_path: pathlib.Path) -> None:
    from sklearn.datasets import load_breast_cancer

    bc = load_breast_cancer()
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w") as fh:
        cols = ["diagnosis"] + [n.replace(" ", "_") for n in bc.feature_names]
        fh.write(",".join(cols) + "\n")
        for row, target in zip(bc.data, bc.target):
            label = "M" if target == 0 else "B"
            fh.write(label + "," + ",".join(repr(float(v)) for v in row) + "\n")
    print(f"wrote {out_path} ({len(bc.data)} rows)")


def read_idx_images(path: pathlib.Path):
    with open(path, "rb") as fh:
        magic, n, rows, cols = struct.unpack(">IIII", fh.read(16))
        assert magic == 0x803, hex(magic)
        return n, rows, cols, fh.read(n * rows * cols)


def read_idx_labels(path: pathlib.Path):
    with open(path, "rb") as fh:
        magic, n = struct.unpack(">II", fh.read(8))
        assert magic == 0x801, hex(magic)
        return list(fh.read(n))


def write_idx_images(path: pathlib.Path, images, rows, cols):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x803, len(images), rows, cols))
        for img in images:
            fh.write(img)


def write_idx_labels(path: pathlib.Path, labels):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", 0x801, len(labels)))
        fh.write(bytes(labels))


def subset_mnist(src: pathlib.Path, out_dir: pathlib.Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)

    n, rows, cols, pix = read_idx_images(src / "train-images-idx3-ubyte")
    labels = read_idx_labels(src / "train-labels-idx1-ubyte")
    img_bytes = rows * cols
    keep, zeros, others = [], 0, 0
    for i in range(n):
        if labels[i] == 0 and zeros < 2500:
            keep.append(i)
            zeros += 1
        elif labels[i] != 0 and others < 500:
            keep.append(i)
            others += 1
        if zeros == 2500 and others == 500:
            break
    imgs = [pix[i * img_bytes : (i + 1) * img_bytes] for i in keep]
    write_idx_images(out_dir / "train-images-idx3-ubyte", imgs, rows, cols)
    write_idx_labels(out_dir / "train-labels-idx1-ubyte", [labels[i] for i in keep])
    print(f"wrote train subset: {len(keep)} images ({zeros} zeros, {others} others)")

    n, rows, cols, pix = read_idx_images(src / "t10k-images-idx3-ubyte")
    labels = read_idx_labels(src / "t10k-labels-idx1-ubyte")
    n_test = min(1000, n)
    imgs = [pix[i * img_bytes : (i + 1) * img_bytes] for i in range(n_test)]
    write_idx_images(out_dir / "t10k-images-idx3-ubyte", imgs, rows, cols)
    write_idx_labels(out_dir / "t10k-labels-idx1-ubyte", labels[:n_test])
    print(f"wrote test subset: {n_test} images")


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--mnist-src", type=pathlib.Path, default=None)
    args = ap.parse_args()

    write_breast_cancer(ROOT / "data" / "breast_cancer.csv")
    if args.mnist_src is not None:
        subset_mnist(args.mnist_src, ROOT / "data" / "mnist")


if __name__ == "__main__":
    main()
