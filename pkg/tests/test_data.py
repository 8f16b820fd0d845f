import gzip
import struct

import numpy as np
import pytest
from conftest import MNIST_DIR, requires_mnist
from oracles import first_idx_label, write_idx

from mmrb.data import (CIFAR10_MEAN, CIFAR10_STD, MNIST_MEAN, MNIST_STD, Dataset, DatasetFormatError, batches,
                       denormalize, load_cifar10, load_mnist, normalize, parse_cifar10_batch, parse_idx_images,
                       parse_idx_labels, synthetic_dataset)


def test_idx_parsers_round_trip(rng):
    imgs = rng.integers(0, 256, size=(3, 4, 5), dtype=np.uint8)
    buf = struct.pack(">IIII", 2051, 3, 4, 5) + imgs.tobytes()
    assert np.array_equal(parse_idx_images(buf), imgs)
    assert parse_idx_labels(struct.pack(">II", 2049, 2) + bytes([7, 1])).tolist() == [7, 1]


@pytest.mark.parametrize("buf", [
    b"\0\0\x08",  # truncated header
    struct.pack(">IIII", 2049, 1, 2, 2) + bytes(4),  # label magic on image file
    struct.pack(">IIII", 2051, 2, 2, 2) + bytes(7),  # short payload
    struct.pack(">IIII", 2051, 1, 2, 2) + bytes(5),  # long payload
])
def test_idx_image_parser_rejects_corruption(buf):
    with pytest.raises(DatasetFormatError):
        parse_idx_images(buf)


def test_idx_label_parser_rejects_corruption():
    with pytest.raises(DatasetFormatError):
        parse_idx_labels(struct.pack(">II", 2051, 1) + b"\0")
    with pytest.raises(DatasetFormatError):
        parse_idx_labels(struct.pack(">II", 2049, 3) + b"\0")


def test_load_mnist_from_fixture(fake_mnist):
    train, test = load_mnist(fake_mnist)
    assert train.images.shape == (64, 1, 28, 28) and len(test) == 32
    assert train.images.dtype == np.float32 and 0 <= train.images.min() and train.images.max() <= 1
    assert (train.mean, train.std) == (MNIST_MEAN, MNIST_STD)


def test_load_mnist_accepts_gzip_and_dot_names(fake_mnist, tmp_path):
    alt = tmp_path / "alt"
    alt.mkdir()
    for f in fake_mnist.iterdir():
        name = f.name.replace("-idx", ".idx")
        (alt / (name + ".gz")).write_bytes(gzip.compress(f.read_bytes()))
    a, _ = load_mnist(fake_mnist)
    b, _ = load_mnist(alt)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)


def test_load_mnist_missing_directory(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_mnist(tmp_path / "nope")


def test_load_mnist_mismatched_counts(tmp_path, rng):
    write_idx(tmp_path, "train", rng.integers(0, 255, size=(4, 28, 28)), [1, 2, 3])
    write_idx(tmp_path, "t10k", rng.integers(0, 255, size=(2, 28, 28)), [1, 2])
    with pytest.raises(DatasetFormatError):
        load_mnist(tmp_path)


@requires_mnist
def test_canonical_mnist():
    train, test = load_mnist(MNIST_DIR)
    assert (len(train), len(test)) == (60000, 10000)
    ref = first_idx_label(next(MNIST_DIR.glob("train*labels*")))
    assert train.labels[0] == ref == 5
    assert train.mean == (0.1307,) and train.std == (0.3081,)
    assert abs(float(normalize(train.images, train).mean())) < 0.01


def test_cifar_batch_parser(tmp_path, rng):
    recs = []
    for label in range(10):
        recs.append(bytes([label]) + rng.integers(0, 256, size=3072, dtype=np.uint8).tobytes())
    buf = b"".join(recs)
    x, y = parse_cifar10_batch(buf)
    assert x.shape == (10, 3, 32, 32) and y.tolist() == list(range(10))
    assert x[3, 0, 0, 0] == recs[3][1] and x[3, 2, 31, 31] == recs[3][-1]
    with pytest.raises(DatasetFormatError):
        parse_cifar10_batch(buf[:-1])


def test_load_cifar10_layout(tmp_path, rng):
    d = tmp_path / "cifar-10-batches-bin"
    d.mkdir()

    def write(name, n):
        labels = np.arange(n) % 10
        pix = rng.integers(0, 256, size=(n, 3072), dtype=np.uint8)
        (d / name).write_bytes(np.concatenate([labels[:, None].astype(np.uint8), pix], axis=1).tobytes())

    for i in range(1, 6):
        write(f"data_batch_{i}.bin", 20)
    write("test_batch.bin", 10)
    train, test = load_cifar10(tmp_path)
    assert (len(train), len(test)) == (100, 10)
    assert np.bincount(train.labels).tolist() == [10] * 10
    assert (train.mean, train.std) == (CIFAR10_MEAN, CIFAR10_STD)


def test_normalize_centering_and_round_trip(rng):
    ds = synthetic_dataset(4, side=6)
    assert normalize(np.full((1, 1, 2, 2), 0.1307, dtype=np.float32), ds).max() == pytest.approx(0.0, abs=1e-7)
    batch = rng.uniform(size=(3, 1, 6, 6)).astype(np.float32)
    assert np.abs(denormalize(normalize(batch, ds), ds) - batch).max() < 1e-6
    with pytest.raises(ValueError):
        normalize(rng.uniform(size=(1, 3, 2, 2)), ds)


def _labels_only(n):
    return Dataset(np.zeros((n, 1, 1, 1), dtype=np.float32), np.arange(n) % 10, "train", (0.0,), (1.0,))


def test_full_batch_covers_in_order():
    it = batches(_labels_only(7), 7, shuffle=False)
    (xb, yb, idx), = list(it)
    assert idx.tolist() == list(range(7))


def test_batch_order_determinism():
    ds = _labels_only(1000)
    a = [i.copy() for _, _, i in batches(ds, 1000, seed=5)]
    b = [i.copy() for _, _, i in batches(ds, 1000, seed=5)]
    c = [i.copy() for _, _, i in batches(ds, 1000, seed=6)]
    assert np.array_equal(a[0], b[0]) and not np.array_equal(a[0], c[0])


def test_each_epoch_is_a_permutation():
    ds = _labels_only(103)
    it = batches(ds, 16, seed=1)
    orders = []
    for _ in range(3):
        seen = np.concatenate([idx for _, _, idx in it])
        assert np.array_equal(np.bincount(seen, minlength=103), np.ones(103, dtype=int))
        orders.append(seen)
    assert len(it) == 7
    assert not np.array_equal(orders[0], orders[1])


def test_subset_and_length_check():
    ds = synthetic_dataset(20, side=4)
    assert len(ds.subset(5)) == 5
    with pytest.raises(DatasetFormatError):
        Dataset(np.zeros((3, 1, 2, 2)), np.zeros(2, dtype=int), "x", (0.0,), (1.0,))
