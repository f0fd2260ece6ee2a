"""Dataset file parsing, standardization, augmentation, and splitting."""

import gzip
import struct

import numpy as np
import pytest

from conftest import write_cifar_batch, write_idx_images, write_idx_labels
from cscd import data
from cscd.data import (BadMagicError, CountMismatchError, Dataset, FormatError,
                       TruncatedFileError, augment, destandardize, load_cifar_binary,
                       load_idx, load_named_dataset, split, standardize)


@pytest.fixture
def idx_pair(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(7, 5, 4), dtype=np.uint8)
    labels = rng.integers(0, 3, size=7, dtype=np.uint8)
    write_idx_images(tmp_path / "imgs", images)
    write_idx_labels(tmp_path / "labs", labels)
    return tmp_path, images, labels


# --- IDX loading -------------------------------------------------------------

def test_idx_round_trip_bit_exact(idx_pair):
    tmp, images, labels = idx_pair
    ds = load_idx(tmp / "imgs", tmp / "labs", name="t", split="train")
    assert ds.images.shape == (7, 1, 5, 4)
    assert ds.images.dtype == np.float32
    np.testing.assert_array_equal(ds.images[:, 0].astype(np.uint8), images)
    np.testing.assert_array_equal(ds.images, images[:, None].astype(np.float32))
    np.testing.assert_array_equal(ds.labels, labels.astype(np.int64))
    assert ds.n_c == int(labels.max()) + 1
    assert ds.images.min() >= 0 and ds.images.max() <= 255


def test_idx_gzip_transparent(tmp_path, idx_pair):
    src, images, labels = idx_pair
    write_idx_images(tmp_path / "imgs.gz", images, compress=True)
    write_idx_labels(tmp_path / "labs.gz", labels, compress=True)
    plain = load_idx(src / "imgs", src / "labs")
    zipped = load_idx(tmp_path / "imgs.gz", tmp_path / "labs.gz")
    np.testing.assert_array_equal(plain.images, zipped.images)
    np.testing.assert_array_equal(plain.labels, zipped.labels)


def test_idx_explicit_class_count(idx_pair):
    tmp, _, _ = idx_pair
    ds = load_idx(tmp / "imgs", tmp / "labs", n_c=10)
    assert ds.n_c == 10


def test_bad_magic(tmp_path, idx_pair):
    src, _, labels = idx_pair
    bad = tmp_path / "bad"
    bad.write_bytes(struct.pack(">IIII", 0x0805, 2, 2, 2) + bytes(8))
    with pytest.raises(BadMagicError, match="0x00000805"):
        load_idx(bad, src / "labs")


def test_truncated_names_expected_and_actual(tmp_path):
    path = tmp_path / "short"
    # header promises 3 images of 2x2 = 12 payload bytes; deliver 7
    path.write_bytes(struct.pack(">IIII", 0x803, 3, 2, 2) + bytes(7))
    with pytest.raises(TruncatedFileError, match=r"expected 28 bytes.*got 23"):
        data._idx_payload(path, 0x803, 3)


def test_truncated_header(tmp_path):
    path = tmp_path / "stub"
    path.write_bytes(b"\x00\x00")
    with pytest.raises(TruncatedFileError, match="header"):
        data._idx_payload(path, 0x803, 3)


def test_count_mismatch(tmp_path, idx_pair):
    src, images, _ = idx_pair
    write_idx_labels(tmp_path / "labs5", np.zeros(5, dtype=np.uint8))
    with pytest.raises(CountMismatchError, match="7 images.*5 labels"):
        load_idx(src / "imgs", tmp_path / "labs5")


# --- CIFAR binary ------------------------------------------------------------

def test_cifar_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    images = rng.integers(0, 256, size=(2, 3, 32, 32), dtype=np.uint8)
    labels = np.array([3, 9], dtype=np.uint8)
    write_cifar_batch(tmp_path / "batch.bin", images, labels)
    ds = load_cifar_binary(tmp_path / "batch.bin")
    assert ds.images.shape == (2, 3, 32, 32)
    np.testing.assert_array_equal(ds.images.astype(np.uint8), images)
    np.testing.assert_array_equal(ds.labels, [3, 9])
    assert ds.n_c == 10


def test_cifar_multiple_files_concatenate(tmp_path):
    rng = np.random.default_rng(2)
    imgs = rng.integers(0, 256, size=(3, 3, 32, 32), dtype=np.uint8)
    write_cifar_batch(tmp_path / "a.bin", imgs[:2], np.array([1, 2], np.uint8))
    write_cifar_batch(tmp_path / "b.bin", imgs[2:], np.array([5], np.uint8))
    ds = load_cifar_binary([tmp_path / "a.bin", tmp_path / "b.bin"])
    assert ds.n == 3
    np.testing.assert_array_equal(ds.labels, [1, 2, 5])


def test_cifar_partial_record(tmp_path):
    path = tmp_path / "torn.bin"
    path.write_bytes(bytes(3073 + 100))
    with pytest.raises(TruncatedFileError, match="not a multiple of 3073"):
        load_cifar_binary(path)


def test_cifar_label_out_of_range(tmp_path):
    path = tmp_path / "bad.bin"
    record = bytes([11]) + bytes(3072)
    path.write_bytes(record)
    with pytest.raises(FormatError, match="label byte 11"):
        load_cifar_binary(path)


# --- standardization ---------------------------------------------------------

def make_dataset(images, labels, n_c=2, split="train"):
    return Dataset(images=np.asarray(images, np.float32),
                   labels=np.asarray(labels, np.int64),
                   n_c=n_c, name="t", split=split)


def test_standardize_train_statistics():
    rng = np.random.default_rng(3)
    train = make_dataset(rng.uniform(0, 255, (50, 1, 3, 3)), np.zeros(50))
    (out,) = standardize(train)
    assert out.images.dtype == np.float32
    np.testing.assert_allclose(out.images.mean(axis=0), 0, atol=1e-5)
    np.testing.assert_allclose(out.images.std(axis=0), 1, atol=1e-4)


def test_standardize_applies_train_stats_to_test():
    rng = np.random.default_rng(4)
    train = make_dataset(rng.uniform(0, 255, (40, 1, 2, 2)), np.zeros(40))
    test = make_dataset(rng.uniform(0, 255, (10, 1, 2, 2)), np.zeros(10), split="test")
    train_s, test_s = standardize(train, test)
    np.testing.assert_array_equal(train_s.mean, test_s.mean)
    np.testing.assert_array_equal(train_s.std, test_s.std)
    # test images transformed with TRAIN statistics, not their own
    expect = (test.images - train_s.mean) / train_s.std
    np.testing.assert_allclose(test_s.images, expect.astype(np.float32))
    assert abs(float(test_s.images.mean())) > 1e-4  # not centered on itself


def test_constant_pixel_maps_to_zero():
    images = np.full((20, 1, 2, 2), 7.0, np.float32)
    images[:, 0, 0, 0] = np.linspace(0, 255, 20)  # one varying pixel
    (out,) = standardize(make_dataset(images, np.zeros(20)))
    assert np.all(out.images[:, 0, 1, 1] == 0.0)
    assert out.std[0, 0, 0] > 1.0  # the varying pixel keeps its real std


def test_standardize_round_trip():
    rng = np.random.default_rng(5)
    train = make_dataset(rng.uniform(0, 255, (30, 1, 4, 4)), np.zeros(30))
    (out,) = standardize(train)
    back = destandardize(out.images, out.mean, out.std)
    np.testing.assert_allclose(back, train.images, atol=1e-4)


def test_standardize_shape_mismatch():
    train = make_dataset(np.zeros((5, 1, 2, 2)), np.zeros(5))
    other = make_dataset(np.zeros((5, 1, 3, 3)), np.zeros(5))
    with pytest.raises(FormatError, match="does not match"):
        standardize(train, other)


# --- augmentation ------------------------------------------------------------

class StubRng:
    """Fixed offsets/flips standing in for a Generator."""

    def __init__(self, oy, ox, flip):
        self.oy, self.ox, self.flip = oy, ox, flip

    def integers(self, lo, hi, size):
        val = self.oy if self.oy is not None else self.ox
        out = np.full(size, val)
        self.oy = None  # first call returns oy, second ox
        return out

    def random(self, n):
        return np.zeros(n) if not self.flip else np.ones(n) * 0.0


def test_identity_offset_reproduces_input():
    rng = np.random.default_rng(6)
    images = rng.normal(size=(3, 2, 6, 6)).astype(np.float32)
    stub = StubRng(oy=4, ox=4, flip=False)
    # flip draw < 0.5 flips; force no flip with draws of 0.9
    stub.random = lambda n: np.full(n, 0.9)
    out = augment(images, stub, pad=4)
    np.testing.assert_array_equal(out, images)


def test_flip_mirrors_width():
    images = np.arange(12, dtype=np.float32).reshape(1, 1, 3, 4)
    stub = StubRng(oy=2, ox=2, flip=True)
    stub.random = lambda n: np.zeros(n)  # 0 < 0.5: flip every image
    out = augment(images, stub, pad=2)
    np.testing.assert_array_equal(out, images[:, :, :, ::-1])


def test_augment_deterministic_and_shape_preserving():
    rng = np.random.default_rng(7)
    images = rng.normal(size=(10, 1, 8, 8)).astype(np.float32)
    a = augment(images, np.random.default_rng(99))
    b = augment(images, np.random.default_rng(99))
    np.testing.assert_array_equal(a, b)
    assert a.shape == images.shape and a.dtype == images.dtype
    c = augment(images, np.random.default_rng(100))
    assert not np.array_equal(a, c)


def test_augment_crops_come_from_padded_plane():
    # every output pixel is either 0 (padding) or present in the input
    images = np.full((5, 1, 4, 4), 3.5, np.float32)
    out = augment(images, np.random.default_rng(8), pad=2)
    assert set(np.unique(out)) <= {0.0, 3.5}


# --- splitting ---------------------------------------------------------------

def stratified_source(n_per_class=40, n_c=4):
    labels = np.repeat(np.arange(n_c), n_per_class)
    images = np.zeros((len(labels), 1, 2, 2), np.float32)
    images[:, 0, 0, 0] = np.arange(len(labels))  # unique id per sample
    return make_dataset(images, labels, n_c=n_c)


def test_split_stratification_within_one():
    ds = stratified_source()
    a, b = split(ds, [0.7, 0.3], seed=0)
    for cls in range(4):
        n_a = int((a.labels == cls).sum())
        assert abs(n_a - 28) <= 1
        assert n_a + int((b.labels == cls).sum()) == 40


def test_split_disjoint_and_complete():
    ds = stratified_source()
    a, b = split(ds, [0.5, 0.5], seed=1)
    ids_a = set(a.images[:, 0, 0, 0].tolist())
    ids_b = set(b.images[:, 0, 0, 0].tolist())
    assert not ids_a & ids_b
    assert len(ids_a | ids_b) == ds.n


def test_split_seed_reproducible():
    ds = stratified_source()
    a1, _ = split(ds, [0.6, 0.4], seed=7)
    a2, _ = split(ds, [0.6, 0.4], seed=7)
    np.testing.assert_array_equal(a1.images, a2.images)
    a3, _ = split(ds, [0.6, 0.4], seed=8)
    assert not np.array_equal(a1.images, a3.images)


def test_split_names_and_remainder():
    ds = stratified_source()
    (a,) = split(ds, [0.25], seed=0, split_names=["calib"])
    assert a.split == "calib"
    assert a.n == 40  # quarter of 160, remainder discarded


def test_split_empty_fraction_rejected():
    ds = stratified_source(n_per_class=2, n_c=2)
    with pytest.raises(ValueError, match="empty split"):
        split(ds, [0.01, 0.99], seed=0)
    with pytest.raises(ValueError, match="positive"):
        split(ds, [0.5, -0.1], seed=0)
    with pytest.raises(ValueError, match="> 1"):
        split(ds, [0.8, 0.4], seed=0)


# --- dataset container -------------------------------------------------------

def test_dataset_validation():
    with pytest.raises(FormatError, match="N, C, H, W"):
        Dataset(images=np.zeros((2, 2, 2), np.float32),  # missing channel dim
                labels=np.zeros(2, np.int64), n_c=2, name="x", split="t")
    with pytest.raises(CountMismatchError):
        Dataset(images=np.zeros((2, 1, 2, 2), np.float32),
                labels=np.zeros(3, np.int64), n_c=2, name="x", split="t")
    with pytest.raises(FormatError, match="labels outside"):
        Dataset(images=np.zeros((2, 1, 2, 2), np.float32),
                labels=np.array([0, 5], np.int64), n_c=2, name="x", split="t")


def test_dataset_subset():
    ds = stratified_source()
    sub = ds.subset(np.array([0, 5, 9]))
    assert sub.n == 3
    np.testing.assert_array_equal(sub.labels, ds.labels[[0, 5, 9]])


def test_load_named_dataset_roundtrip(digits_data_dir):
    train, test = load_named_dataset("mnist", digits_data_dir)
    assert train.split == "train" and test.split == "test"
    assert train.n == 1500 and test.n == 297
    assert train.n_c == 10
    with pytest.raises(FileNotFoundError):
        load_named_dataset("fashion", digits_data_dir)
