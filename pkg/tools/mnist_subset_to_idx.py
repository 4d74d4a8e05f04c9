"""Write the 5000-image MNIST sample bundled with mlxtend as IDX files.

Useful when the full MNIST distribution is not available locally:

    python tools/mnist_subset_to_idx.py data/mnist-subset
"""

import argparse
import gzip
from importlib import resources
from pathlib import Path

import numpy as np

from nesylab.data import write_idx

IMAGES = "images-idx3-ubyte"
LABELS = "labels-idx1-ubyte"


def export(out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    raw = resources.files("mlxtend.data").joinpath("data/mnist_5k.csv.gz").read_bytes()
    table = np.loadtxt(gzip.decompress(raw).decode().splitlines(), delimiter=",")
    images = table[:, :-1].reshape(-1, 28, 28).astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)
    write_idx(out / IMAGES, out / LABELS, images, labels)
    return out / IMAGES, out / LABELS


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out_dir")
    for path in export(parser.parse_args().out_dir):
        print(path)
