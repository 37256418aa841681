#!/usr/bin/env python3
"""Convert the digits bundled in the `mnist` npm package into IDX files.

The npm package ships 10,000 MNIST digits as per-class JSON arrays of
pixel intensities in [0, 1]. This script interleaves them with a fixed
permutation and writes standard IDX containers:

    data/mnist/train-images-idx3-ubyte   (8000 images)
    data/mnist/train-labels-idx1-ubyte
    data/mnist/t10k-images-idx3-ubyte    (2000 images)
    data/mnist/t10k-labels-idx1-ubyte

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist
"""

import json
import os
import random
import struct
import sys

SIDE = 28
TRAIN = 8000


def write_images(path, images):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x00000803, len(images), SIDE, SIDE))
        for img in images:
            fh.write(bytes(img))


def write_labels(path, labels):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, len(labels)))
        fh.write(bytes(labels))


def main():
    if len(sys.argv) != 3:
        print(__doc__)
        sys.exit(2)
    src, dst = sys.argv[1], sys.argv[2]
    samples = []
    for digit in range(10):
        with open(os.path.join(src, f"{digit}.json")) as fh:
            raw = json.load(fh)["data"]
        n = len(raw) // (SIDE * SIDE)
        for k in range(n):
            px = raw[k * SIDE * SIDE:(k + 1) * SIDE * SIDE]
            samples.append(([int(round(v * 255)) for v in px], digit))
    random.Random(20240229).shuffle(samples)
    os.makedirs(dst, exist_ok=True)
    train, test = samples[:TRAIN], samples[TRAIN:]
    write_images(os.path.join(dst, "train-images-idx3-ubyte"), [s[0] for s in train])
    write_labels(os.path.join(dst, "train-labels-idx1-ubyte"), [s[1] for s in train])
    write_images(os.path.join(dst, "t10k-images-idx3-ubyte"), [s[0] for s in test])
    write_labels(os.path.join(dst, "t10k-labels-idx1-ubyte"), [s[1] for s in test])
    print(f"wrote {len(train)} train / {len(test)} test images to {dst}")


if __name__ == "__main__":
    main()
