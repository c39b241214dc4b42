import struct

import numpy as np
import pytest

from thinner import data as D
from thinner import tensor as T
from thinner.errors import DataFormatError


def write_raw_idx(tmp_path, pixels, labels, image_magic=D.IDX_IMAGES_MAGIC):
    n, h, w = pixels.shape
    ip, lp = tmp_path / "img.idx", tmp_path / "lbl.idx"
    ip.write_bytes(struct.pack(">IIII", image_magic, n, h, w) + pixels.astype(np.uint8).tobytes())
    lp.write_bytes(struct.pack(">II", D.IDX_LABELS_MAGIC, len(labels)) + bytes(labels))
    return ip, lp


def test_load_well_formed(tmp_path):
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, (10, 4, 5))
    pixels[0, 0, 0] = 255
    labels = list(rng.integers(0, 3, 10))
    ds = D.load_idx_images(*write_raw_idx(tmp_path, pixels, labels))
    assert len(ds) == 10
    assert ds.images.shape == (10, 1, 4, 5)
    assert ds.images.min() >= 0 and ds.images.max() <= 1
    assert ds.images[0, 0, 0, 0] == 1.0
    np.testing.assert_array_equal(ds.images[:, 0], pixels / 255.0)
    np.testing.assert_array_equal(ds.labels, labels)


def test_bad_magic(tmp_path):
    paths = write_raw_idx(tmp_path, np.zeros((2, 2, 2)), [0, 1], image_magic=0)
    with pytest.raises(DataFormatError, match="magic"):
        D.load_idx_images(*paths)


def test_count_mismatch(tmp_path):
    paths = write_raw_idx(tmp_path, np.zeros((3, 2, 2)), [0, 1])
    with pytest.raises(DataFormatError, match="count mismatch"):
        D.load_idx_images(*paths)


def test_truncated(tmp_path):
    ip, lp = write_raw_idx(tmp_path, np.zeros((3, 2, 2)), [0, 1, 1])
    ip.write_bytes(ip.read_bytes()[:-1])
    with pytest.raises(DataFormatError, match="truncated"):
        D.load_idx_images(ip, lp)


def test_idx_round_trip(tmp_path):
    ds = D.generate_synthetic("bars", 40, seed=3)
    quantized = D.Dataset(np.rint(ds.images * 255) / 255, ds.labels, 2)
    D.write_idx(quantized, tmp_path / "i", tmp_path / "l")
    back = D.load_idx_images(tmp_path / "i", tmp_path / "l")
    np.testing.assert_array_equal(back.images, quantized.images)
    np.testing.assert_array_equal(back.labels, quantized.labels)


@pytest.mark.parametrize("task", ["bars", "blobs", {"name": "blobs", "classes": 3, "channels": 2}])
def test_synthetic_deterministic(task):
    a, b = D.generate_synthetic(task, 60, seed=9), D.generate_synthetic(task, 60, seed=9)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    c = D.generate_synthetic(task, 60, seed=10)
    assert not np.array_equal(a.images, c.images)


def test_synthetic_balance():
    ds = D.generate_synthetic("bars", 100, seed=0)
    assert np.bincount(ds.labels).tolist() == [50, 50]
    ds = D.generate_synthetic({"name": "blobs", "classes": 7}, 101, seed=0)
    counts = np.bincount(ds.labels)
    assert counts.max() - counts.min() <= 1


def test_unknown_task():
    with pytest.raises(DataFormatError, match="unknown synthetic task"):
        D.generate_synthetic("spirals", 10)


def test_bars_separable_by_one_edge_filter():
    # vertical-gradient filter: strong on horizontal bars, near zero on vertical
    # ones. Threshold 0.4 was fit on seed 0 and holds on unseen seeds.
    sobel_y = np.array([[1.0, 2.0, 1.0], [0.0, 0.0, 0.0], [-1.0, -2.0, -1.0]])[None, None]
    for seed in (5, 6):
        ds = D.generate_synthetic("bars", 1000, seed=seed)
        energy = np.abs(T.conv2d_forward(ds.images, sobel_y)).mean(axis=(1, 2, 3))
        predicted = np.where(energy > 0.4, 0, 1)
        assert np.mean(predicted == ds.labels) >= 0.95


def test_split_sizes_and_determinism():
    ds = D.generate_synthetic("bars", 10, seed=0)
    a, b = D.split(ds, 0.5, seed=1)
    assert (len(a), len(b)) == (5, 5)
    a2, _ = D.split(ds, 0.5, seed=1)
    np.testing.assert_array_equal(a.images, a2.images)
    together = np.concatenate([a.images, b.images])
    assert sorted(map(bytes, together)) == sorted(map(bytes, ds.images))


def test_split_degenerate():
    ds = D.generate_synthetic("bars", 4, seed=0)
    with pytest.raises(ValueError, match="empty"):
        D.split(ds, 0.1)
    with pytest.raises(ValueError):
        D.split(ds, 1.0)


def test_batches_partition():
    ds = D.generate_synthetic("bars", 23, seed=0)
    seen = np.concatenate(list(D.batch_indices(23, 5, seed=2)))
    assert sorted(seen.tolist()) == list(range(23))
    sizes = [len(y) for _, y in D.batches(ds, 5, seed=2)]
    assert sizes == [5, 5, 5, 5, 3]


def test_dataset_invariants():
    with pytest.raises(DataFormatError):
        D.Dataset(np.zeros((2, 1, 2, 2)), [0], 2)
    with pytest.raises(DataFormatError):
        D.Dataset(np.zeros((1, 1, 2, 2)), [2], 2)
    with pytest.raises(DataFormatError):
        D.Dataset(np.full((1, 1, 2, 2), 1.5), [0], 2)
