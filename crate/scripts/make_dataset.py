#!/usr/bin/env python3
"""Build a small MNIST-format digit dataset from scikit-learn's bundled digits.

The 8x8 images are upscaled to 28x28 and written as IDX files (the MNIST
container format). The train split is augmented with one-pixel shifts so the
training set is large enough for group-size experiments. If you have the real
MNIST files, drop them into data/mnist/ with the same names instead.
"""

import os
import struct

import numpy as np
from scipy.ndimage import zoom
from sklearn.datasets import load_digits

OUT = os.path.join(os.path.dirname(__file__), "..", "data", "mnist")

NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "t10k": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def write_idx_images(path, images):
    n = len(images)
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        for img in images:
            f.write(img.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def upscale(img8):
    # 8x8 digits are 0..16; rescale to 0..255 and resize to 28x28
    img = zoom(img8.reshape(8, 8) * (255.0 / 16.0), 28 / 8, order=1)
    return np.clip(img, 0, 255)


def shift(img, dy, dx):
    out = np.zeros_like(img)
    ys = slice(max(dy, 0), 28 + min(dy, 0))
    yd = slice(max(-dy, 0), 28 + min(-dy, 0))
    xs = slice(max(dx, 0), 28 + min(dx, 0))
    xd = slice(max(-dx, 0), 28 + min(-dx, 0))
    out[yd, xd] = img[ys, xs]
    return out


def main():
    rng = np.random.default_rng(0)
    digits = load_digits()
    images = [upscale(x) for x in digits.data]
    labels = digits.target

    idx = rng.permutation(len(images))
    test_idx = idx[:297]
    train_idx = idx[297:]

    train_images, train_labels = [], []
    for i in train_idx:
        img = images[i]
        train_images.append(img)
        train_labels.append(labels[i])
        for dy, dx in [(1, 0), (-1, 0), (0, 1), (0, -1)]:
            train_images.append(shift(img, dy, dx))
            train_labels.append(labels[i])

    order = rng.permutation(len(train_images))
    train_images = [train_images[i] for i in order]
    train_labels = [train_labels[i] for i in order]

    os.makedirs(OUT, exist_ok=True)
    write_idx_images(os.path.join(OUT, NAMES["train"][0]), train_images)
    write_idx_labels(os.path.join(OUT, NAMES["train"][1]), train_labels)
    write_idx_images(os.path.join(OUT, NAMES["t10k"][0]), [images[i] for i in test_idx])
    write_idx_labels(os.path.join(OUT, NAMES["t10k"][1]), [labels[i] for i in test_idx])
    print(f"train: {len(train_images)}  test: {len(test_idx)}  -> {os.path.abspath(OUT)}")


if __name__ == "__main__":
    main()
