"""MNIST IDX ingestion and the traffic-light pair dataset."""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

CONFIG_NAMES = ("nn", "ng", "rn", "rg")  # red/green off-off, off-on, on-off, on-on


@dataclass(frozen=True, eq=False)
class MnistImage:
    pixels: np.ndarray  # (28, 28) in [0, 1]
    digit_label: int


class IdxFormatError(ValueError):
    pass


def _read_header(raw: bytes, path, magic: int, n_dims: int) -> tuple[int, ...]:
    size = 4 * (1 + n_dims)
    if len(raw) < size:
        raise IdxFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    found, *dims = struct.unpack(f">{1 + n_dims}I", raw[:size])
    if found != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{found:08X}, expected 0x{magic:08X}")
    return tuple(dims)


def load_idx_arrays(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Images as ``(n, 28, 28)`` float64 in [0, 1] and labels as ``(n,)`` int."""
    raw_img = Path(images_path).read_bytes()
    raw_lab = Path(labels_path).read_bytes()
    count, rows, cols = _read_header(raw_img, images_path, IMAGE_MAGIC, 3)
    (n_labels,) = _read_header(raw_lab, labels_path, LABEL_MAGIC, 1)
    if (rows, cols) != (28, 28):
        raise IdxFormatError(f"{images_path}: images are {rows}x{cols}, expected 28x28")
    if count != n_labels:
        raise IdxFormatError(f"{count} images but {n_labels} labels")
    pixels = raw_img[16:]
    if len(pixels) != count * rows * cols:
        raise IdxFormatError(f"{images_path}: expected {count * rows * cols} pixel bytes, found {len(pixels)}")
    labels = raw_lab[8:]
    if len(labels) != count:
        raise IdxFormatError(f"{labels_path}: expected {count} label bytes, found {len(labels)}")
    images = np.frombuffer(pixels, dtype=np.uint8).reshape(count, rows, cols) / 255.0
    return images, np.frombuffer(labels, dtype=np.uint8).astype(np.int64)


def load_idx(images_path, labels_path) -> list[MnistImage]:
    images, labels = load_idx_arrays(images_path, labels_path)
    return [MnistImage(img, int(lab)) for img, lab in zip(images, labels)]


def write_idx(images_path, labels_path, images: np.ndarray, labels: Sequence[int]) -> None:
    """Inverse of :func:`load_idx_arrays` for pixel arrays in [0, 1] or uint8."""
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = np.rint(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IMAGE_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(
        struct.pack(">2I", LABEL_MAGIC, n) + np.asarray(labels, dtype=np.uint8).tobytes()
    )


def digit_pools(images, labels=None) -> tuple[np.ndarray, np.ndarray]:
    """Split MNIST images into the "0" and "1" pools."""
    if labels is None:
        labels = np.array([im.digit_label for im in images])
        images = np.stack([im.pixels for im in images])
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    return images[labels == 0], images[labels == 1]


# ---------------------------------------------------------------------------
# Synthetic digits
# ---------------------------------------------------------------------------


def _templates() -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:28, 0:28].astype(np.float64)
    r = ((xx - 13.5) / 6.0) ** 2 + ((yy - 13.5) / 9.0) ** 2
    zero = (np.abs(r - 1.0) < 0.35).astype(np.float64)
    one = np.zeros((28, 28))
    one[4:24, 12:16] = 1.0
    return zero, one


def synth_digits(n: int, seed: int, noise: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """``n`` noisy "0" (ellipse ring) and ``n`` noisy "1" (vertical bar) images."""
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    zero, one = _templates()
    zeros = np.clip(zero + rng.uniform(-noise, noise, size=(n, 28, 28)), 0.0, 1.0)
    ones = np.clip(one + rng.uniform(-noise, noise, size=(n, 28, 28)), 0.0, 1.0)
    return zeros, ones


# ---------------------------------------------------------------------------
# Traffic-light dataset
# ---------------------------------------------------------------------------


def config_lights(config: int) -> tuple[int, int]:
    return (config >> 1) & 1, config & 1


def config_label(config: int) -> int:
    red, green = config_lights(config)
    return 0 if red and green else 1


@dataclass(frozen=True, eq=False)
class TrafficExample:
    x_r: MnistImage
    x_g: MnistImage
    y: int
    config: int


@dataclass(frozen=True, eq=False)
class TrafficSplit:
    x_r: np.ndarray  # (n, 1, 28, 28)
    x_g: np.ndarray
    y: np.ndarray
    config: np.ndarray
    src_r: np.ndarray  # index into the zeros or ones pool, per the light state
    src_g: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def examples(self) -> list[TrafficExample]:
        out = []
        for i in range(len(self)):
            red, green = config_lights(int(self.config[i]))
            out.append(TrafficExample(
                MnistImage(self.x_r[i, 0], red), MnistImage(self.x_g[i, 0], green),
                int(self.y[i]), int(self.config[i]),
            ))
        return out

    def partition(self, config: int) -> np.ndarray:
        return np.flatnonzero(self.config == config)


@dataclass(frozen=True, eq=False)
class TrafficDataset:
    train: TrafficSplit
    test: TrafficSplit
    seed: int


def _pool_array(images) -> np.ndarray:
    if len(images) and isinstance(images[0], MnistImage):
        images = [im.pixels for im in images]
    return np.asarray(images, dtype=np.float64).reshape(-1, 28, 28)


def _split_pool(n: int, test_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    n_test = min(max(1, math.ceil(test_fraction * n)), n - 1)
    return np.sort(order[n_test:]), np.sort(order[:n_test])


def _make_split(configs: np.ndarray, zeros, ones, pools, rng) -> TrafficSplit:
    n = len(configs)
    images = (zeros, ones)
    x = {}
    src = {}
    for light, shift in (("r", 1), ("g", 0)):
        state = (configs >> shift) & 1
        idx = np.empty(n, dtype=np.int64)
        pixels = np.empty((n, 1, 28, 28))
        for digit in (0, 1):
            where = np.flatnonzero(state == digit)
            idx[where] = rng.choice(pools[digit], size=len(where), replace=True)
            pixels[where, 0] = images[digit][idx[where]]
        src[light] = idx
        x[light] = pixels
    y = np.array([config_label(int(c)) for c in configs], dtype=np.int64)
    return TrafficSplit(x["r"], x["g"], y, configs.astype(np.int64), src["r"], src["g"])


def build_traffic_dataset(
    zeros,
    ones,
    seed: int,
    n_train: int = 3200,
    n_test_per_config: int = 50,
    test_fraction: float = 0.2,
) -> TrafficDataset:
    """Pairs of digit images labelled by whether at most one light is on.

    Source pools are split into disjoint train/test images. The train split
    has equal numbers of positives (spread evenly over the three satisfying
    configurations) and negatives (both lights on); images are drawn with
    replacement and the train order is shuffled. The test split holds
    ``n_test_per_config`` examples per configuration, ordered by configuration.
    """
    zeros, ones = _pool_array(zeros), _pool_array(ones)
    if len(zeros) < 2 or len(ones) < 2:
        raise ValueError(f"need at least two images per digit, got {len(zeros)} zeros and {len(ones)} ones")
    rng = np.random.default_rng(seed)
    train0, test0 = _split_pool(len(zeros), test_fraction, rng)
    train1, test1 = _split_pool(len(ones), test_fraction, rng)

    n_neg = n_train // 2
    n_pos = n_train - n_neg
    train_configs = np.concatenate([np.arange(n_pos) % 3, np.full(n_neg, 3)])
    train_configs = train_configs[rng.permutation(n_train)]
    train = _make_split(train_configs, zeros, ones, (train0, train1), rng)

    test_configs = np.repeat(np.arange(4), n_test_per_config)
    test = _make_split(test_configs, zeros, ones, (test0, test1), rng)
    return TrafficDataset(train, test, seed)


def manifest_csv(dataset: TrafficDataset) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["split", "config", "y", "src_r", "src_g"])
    for name, split in (("train", dataset.train), ("test", dataset.test)):
        for i in range(len(split)):
            writer.writerow([name, CONFIG_NAMES[split.config[i]], int(split.y[i]), int(split.src_r[i]), int(split.src_g[i])])
    return buf.getvalue()
