import math
import struct
from pathlib import Path

import numpy as np
import pytest

from goldilocks.autodiff import NetworkArchitecture, loss_and_gradient
from goldilocks.datasets import (Dataset, batch_iterator, load_cache, load_mnist_idx, save_cache,
                                 synthetic_blobs, write_idx)
from goldilocks.errors import ConsistencyError, FormatError, InputError, TruncatedFileError

DATA = Path(__file__).parent / "data"
IMAGES = DATA / "tiny-images-idx3-ubyte"
LABELS = DATA / "tiny-labels-idx1-ubyte"


class TestIdx:
    def test_fixture_exact_values(self):
        ds = load_mnist_idx(IMAGES, LABELS)
        assert ds.images.shape == (2, 784)
        np.testing.assert_array_equal(ds.labels, [7, 3])
        np.testing.assert_array_equal(ds.images[0], (np.arange(784) % 256) / 255.0)
        expected = np.ones((28, 28))
        np.fill_diagonal(expected, 0.0)
        np.testing.assert_array_equal(ds.images[1], expected.ravel())
        assert ds.provenance == "mnist_idx"
        np.testing.assert_array_equal(ds.train_idx, [0, 1])

    def test_gzip(self):
        ds = load_mnist_idx(IMAGES, DATA / "tiny-labels-idx1-ubyte.gz")
        np.testing.assert_array_equal(ds.labels, [7, 3])

    def test_writer_roundtrip(self, tmp_path):
        images = np.random.default_rng(0).integers(0, 256, (3, 4, 5), dtype=np.uint8)
        write_idx(tmp_path / "i", images)
        write_idx(tmp_path / "l", np.array([0, 1, 2], dtype=np.uint8))
        ds = load_mnist_idx(tmp_path / "i", tmp_path / "l")
        np.testing.assert_array_equal(ds.images * 255.0, images.reshape(3, 20))

    def test_wrong_magic(self, tmp_path):
        bad = tmp_path / "bad"
        bad.write_bytes(struct.pack(">IIII", 2049, 0, 28, 28))
        with pytest.raises(FormatError, match="magic"):
            load_mnist_idx(bad, LABELS)

    def test_empty_file(self, tmp_path):
        empty = tmp_path / "empty"
        empty.write_bytes(b"")
        with pytest.raises(TruncatedFileError) as info:
            load_mnist_idx(empty, LABELS)
        assert info.value.offset == 0

    def test_truncated_payload(self, tmp_path):
        cut = tmp_path / "cut"
        cut.write_bytes(IMAGES.read_bytes()[:100])
        with pytest.raises(TruncatedFileError) as info:
            load_mnist_idx(cut, LABELS)
        assert info.value.offset == 100

    def test_length_mismatch(self, tmp_path):
        one = tmp_path / "one"
        one.write_bytes(struct.pack(">II", 2049, 1) + b"\x01")
        with pytest.raises(ConsistencyError):
            load_mnist_idx(IMAGES, one)


class TestDataset:
    def test_split_disjoint(self, mnist):
        assert mnist.train_idx.size == 4000 and mnist.eval_idx.size == 1000
        assert np.intersect1d(mnist.train_idx, mnist.eval_idx).size == 0
        assert mnist.images.min() >= 0.0 and mnist.images.max() <= 1.0

    def test_split_too_large(self, mnist):
        with pytest.raises(InputError):
            mnist.split(5000, 1)

    def test_overlapping_split_rejected(self):
        with pytest.raises(ConsistencyError):
            Dataset(np.zeros((3, 2)), np.zeros(3, dtype=int), np.array([0, 1]), np.array([1]), "mnist_idx")

    def test_shuffled_labels_preserve_counts(self, mnist):
        sh = mnist.with_shuffled_labels(3)
        np.testing.assert_array_equal(np.bincount(sh.labels), np.bincount(mnist.labels))
        assert np.mean(sh.labels != mnist.labels) > 0.5

    def test_cache_roundtrip(self, tmp_path):
        ds = synthetic_blobs(n_classes=3, input_dim=7, n_per_class=5, seed=1)
        save_cache(ds, tmp_path / "c.bin")
        back = load_cache(tmp_path / "c.bin")
        for name in ("images", "labels", "train_idx", "eval_idx"):
            np.testing.assert_array_equal(getattr(back, name), getattr(ds, name))
        assert (back.provenance, back.n_classes) == (ds.provenance, ds.n_classes)

    def test_cache_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOPE" + bytes(28))
        with pytest.raises(FormatError):
            load_cache(tmp_path / "x")


class TestSynthetic:
    def test_deterministic(self):
        a = synthetic_blobs(seed=4, n_per_class=10)
        b = synthetic_blobs(seed=4, n_per_class=10)
        np.testing.assert_array_equal(a.images, b.images)
        assert not np.array_equal(a.images, synthetic_blobs(seed=5, n_per_class=10).images)

    def test_small_spread_separable(self):
        ds = synthetic_blobs(n_classes=5, input_dim=50, n_per_class=20, spread=0.01, seed=0)
        centers = np.stack([ds.images[ds.labels == k].mean(0) for k in range(5)])
        nearest = np.argmin(((ds.images[:, None, :] - centers) ** 2).sum(-1), axis=1)
        np.testing.assert_array_equal(nearest, ds.labels)

    def test_balanced(self):
        ds = synthetic_blobs(n_classes=4, n_per_class=9)
        np.testing.assert_array_equal(np.bincount(ds.labels), [9, 9, 9, 9])

    def test_uniform_prediction_loss(self):
        ds = synthetic_blobs(n_classes=10, input_dim=30, n_per_class=10)
        arch = NetworkArchitecture((30, 8, 10))
        lg = loss_and_gradient(arch, np.zeros(arch.n_params), ds.train_batch())
        assert lg.loss == pytest.approx(math.log(10), abs=1e-12)

    def test_bad_arguments(self):
        with pytest.raises(InputError):
            synthetic_blobs(n_classes=1)
        with pytest.raises(InputError):
            synthetic_blobs(spread=0.0)


class TestBatches:
    def test_deterministic_and_covering(self):
        it1, it2 = batch_iterator(np.arange(10), 3, 7), batch_iterator(np.arange(10), 3, 7)
        first = [next(it1) for _ in range(3)]
        np.testing.assert_array_equal(first, [next(it2) for _ in range(3)])
        assert len(np.unique(np.concatenate(first))) == 9

    def test_reshuffles_each_pass(self):
        it = batch_iterator(np.arange(8), 8, 0)
        assert not np.array_equal(next(it), next(it))

    def test_small_index_set(self):
        it = batch_iterator(np.arange(2), 5, 0)
        assert sorted(next(it)) == [0, 1]

    def test_invalid(self):
        with pytest.raises(InputError):
            next(batch_iterator(np.arange(0), 3, 0))
