"""Shared fixtures: a real handwritten-digit dataset served through the
production IDX loading path, and small trained models reused across suites.

The scikit-learn digits set (1797 grayscale 8x8 images) is written into
standard IDX containers by an independent writer, so every test that uses it
also exercises the package's file ingestion.
"""

import gzip
import os
import struct
from pathlib import Path

import numpy as np
import pytest
from sklearn.datasets import load_digits

import cscd
from cscd import training


# ---------------------------------------------------------------------------
# Independent IDX/CIFAR writers (format per the published container layout)
# ---------------------------------------------------------------------------

def write_idx_images(path, images_u8, compress=False):
    n, rows, cols = images_u8.shape
    blob = struct.pack(">IIII", 0x00000803, n, rows, cols) + images_u8.tobytes()
    data = gzip.compress(blob) if compress else blob
    Path(path).write_bytes(data)


def write_idx_labels(path, labels_u8, compress=False):
    blob = struct.pack(">II", 0x00000801, len(labels_u8)) + bytes(labels_u8)
    data = gzip.compress(blob) if compress else blob
    Path(path).write_bytes(data)


def write_cifar_batch(path, images_u8, labels):
    """images_u8: (N, 3, 32, 32) uint8 (R, G, B planes)."""
    out = bytearray()
    for img, lab in zip(images_u8, labels):
        out.append(int(lab))
        out.extend(img.tobytes())
    Path(path).write_bytes(bytes(out))


# ---------------------------------------------------------------------------
# Digits-as-IDX data tree
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def digits_data_dir(tmp_path_factory):
    """A data directory holding the digits set under the mnist file names."""
    root = tmp_path_factory.mktemp("digits-data")
    d = load_digits()
    images = d.images.astype(np.uint8)          # pixel values 0..16
    labels = d.target.astype(np.uint8)
    order = np.random.default_rng(20240901).permutation(len(labels))
    images, labels = images[order], labels[order]
    n_train = 1500
    ds_dir = root / "mnist"
    ds_dir.mkdir()
    write_idx_images(ds_dir / "train-images-idx3-ubyte", images[:n_train])
    write_idx_labels(ds_dir / "train-labels-idx1-ubyte", labels[:n_train])
    write_idx_images(ds_dir / "t10k-images-idx3-ubyte", images[n_train:])
    write_idx_labels(ds_dir / "t10k-labels-idx1-ubyte", labels[n_train:])
    return root


@pytest.fixture(scope="session")
def digits_sets(digits_data_dir):
    """(train, test) digits datasets, standardized on the training split."""
    train_raw, test_raw = cscd.load_named_dataset("mnist", digits_data_dir)
    return cscd.standardize(train_raw, test_raw)


@pytest.fixture(scope="session")
def digits_model(digits_sets):
    """A mini cascade backtrack-trained on the digits training split."""
    train, test = digits_sets
    spec = cscd.preset_spec("mini", train.images.shape[1:], 10)
    model = cscd.build_cascade(spec, seed=7)
    # n_e=6 leaves every branch classifier genuinely trained; weaker budgets
    # give component 0 confidences too uninformative for the curve checks
    cfg = training.TrainConfig(n_e=6, batch_size=32, learning_rate=0.1, seed=7)
    model, report = training.ci_bt_train(model, train, cfg, eval_set=test)
    assert report.eval_accuracy[-1] > 0.8, (
        f"digits training collapsed: {report.eval_accuracy}")
    return model


@pytest.fixture(scope="session")
def digits_report(digits_sets):
    train, test = digits_sets
    spec = cscd.preset_spec("mini", train.images.shape[1:], 10)
    model = cscd.build_cascade(spec, seed=11)
    cfg = training.TrainConfig(n_e=1, batch_size=32, learning_rate=0.1, seed=11)
    return training.ci_bt_train(model, train, cfg, eval_set=test)


# ---------------------------------------------------------------------------
# Real FashionMNIST/MNIST discovery (desk-scale experiment inputs)
# ---------------------------------------------------------------------------

def find_real_dataset():
    """Locate FashionMNIST or MNIST IDX files, if the user provided them.

    Looks under $CSCD_DATA_DIR, ./data and the repository data/ directory.
    Returns (dataset_name, data_dir) or None.
    """
    roots = []
    if os.environ.get("CSCD_DATA_DIR"):
        roots.append(Path(os.environ["CSCD_DATA_DIR"]))
    roots.append(Path("data"))
    roots.append(Path(__file__).resolve().parent.parent / "data")
    for root in roots:
        for name in ("fashion", "mnist"):
            try:
                cscd.load_named_dataset(name, root)
            except FileNotFoundError:
                continue
            return name, root
    return None


@pytest.fixture(scope="session")
def real_data():
    return find_real_dataset()
