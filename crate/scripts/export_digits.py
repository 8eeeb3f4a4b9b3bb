"""Export scikit-learn's bundled 8x8 handwritten digits as MNIST-style IDX files.

The output directory receives the four canonical MNIST file names so that the
regular IDX loader reads it unchanged. The split is a fixed permutation
(numpy RandomState(0)) into 1297 training and 500 test images. Pixel values
(0..16 in the source) are rescaled to 0..255 and rounded.

Source data: UCI Optical Recognition of Handwritten Digits (CC BY 4.0).
"""

import struct
import sys
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits

N_TRAIN = 1297


def write_images(path, images):
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, h, w))
        f.write(images.astype(np.uint8).tobytes())


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main(out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digits = load_digits()
    images = np.rint(digits.images / 16.0 * 255.0)
    labels = digits.target
    perm = np.random.RandomState(0).permutation(len(labels))
    images, labels = images[perm], labels[perm]
    write_images(out / "train-images-idx3-ubyte", images[:N_TRAIN])
    write_labels(out / "train-labels-idx1-ubyte", labels[:N_TRAIN])
    write_images(out / "t10k-images-idx3-ubyte", images[N_TRAIN:])
    write_labels(out / "t10k-labels-idx1-ubyte", labels[N_TRAIN:])


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "crates/core/tests/data/digits")
