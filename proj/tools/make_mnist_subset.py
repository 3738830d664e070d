#!/usr/bin/env python3
"""Build a small MNIST corpus in IDX format from the 5000-image subset that
ships inside the mlxtend wheel (BSD-3, data from yann.lecun.com/exdb/mnist).

Writes train-images-idx3-ubyte / train-labels-idx1-ubyte (4000 images) and
t10k-images-idx3-ubyte / t10k-labels-idx1-ubyte (1000 images), stratified
400/100 per class with a fixed shuffle.

usage: make_mnist_subset.py OUT_DIR [--wheel PATH]
"""
import argparse
import glob
import gzip
import os
import random
import struct
import subprocess
import sys
import tempfile
import zipfile


def fetch_wheel(tmp):
    subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps",
                    "mlxtend==0.24.0", "-d", tmp], check=True)
    return glob.glob(os.path.join(tmp, "mlxtend-*.whl"))[0]


def write_idx(path, magic, dims, payload):
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(payload)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out")
    ap.add_argument("--wheel")
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        wheel = args.wheel or fetch_wheel(tmp)
        raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    rows = gzip.decompress(raw).decode().strip().split("\n")

    by_class = {}
    for r in rows:
        vals = [int(float(v)) for v in r.split(",")]
        by_class.setdefault(vals[-1], []).append(bytes(vals[:-1]))

    rng = random.Random(20240101)
    train, test = [], []
    for label in sorted(by_class):
        imgs = by_class[label]
        rng.shuffle(imgs)
        train += [(label, im) for im in imgs[:400]]
        test += [(label, im) for im in imgs[400:500]]
    rng.shuffle(train)
    rng.shuffle(test)

    os.makedirs(args.out, exist_ok=True)
    for prefix, items in (("train", train), ("t10k", test)):
        write_idx(os.path.join(args.out, prefix + "-images-idx3-ubyte"), 0x803,
                  (len(items), 28, 28), b"".join(im for _, im in items))
        write_idx(os.path.join(args.out, prefix + "-labels-idx1-ubyte"), 0x801,
                  (len(items),), bytes(l for l, _ in items))
    print(f"wrote {len(train)} train / {len(test)} test images to {args.out}")


if __name__ == "__main__":
    main()
