import gzip

import numpy as np
import pytest

from veribnb.data import (Dataset, DatasetError, ingest, load_csv, load_idx, read_idx, save_csv, two_moons,
                          write_idx)


def test_two_moons_shape_range_and_balance():
    ds = two_moons(101, 0.1, seed=3)
    assert ds.inputs.shape == (101, 2)
    assert ds.n_classes == 2
    assert np.all((ds.inputs >= 0) & (ds.inputs <= 1))
    assert np.sum(ds.labels == 0) == 51


def test_two_moons_reproducible_and_seed_sensitive():
    a, b, c = two_moons(200, seed=5), two_moons(200, seed=5), two_moons(200, seed=6)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert not np.array_equal(a.inputs, c.inputs)


def test_two_moons_nuisance_features():
    ds = two_moons(50, seed=1, dim=7)
    assert ds.dim == 7
    np.testing.assert_array_equal(ds.inputs[:, :2], two_moons(50, seed=1).inputs)


def test_train_test_split_partitions():
    ds = two_moons(100, seed=2)
    tr, te = ds.train_test_split(0.25, seed=0)
    assert len(tr) == 75 and len(te) == 25
    assert tr.split == "train" and te.split == "test"
    rows = {tuple(r) for r in np.concatenate([tr.inputs, te.inputs])}
    assert rows == {tuple(r) for r in ds.inputs}


def test_dataset_validation():
    with pytest.raises(DatasetError):
        Dataset(np.zeros((0, 2)), np.zeros(0, np.int64))
    with pytest.raises(DatasetError):
        Dataset(np.full((2, 2), 1.5), np.zeros(2, np.int64))
    with pytest.raises(DatasetError):
        Dataset(np.zeros((2, 2)), np.array([0, 3]), n_classes=2)


def test_csv_round_trip(tmp_path):
    ds = two_moons(30, seed=4)
    save_csv(ds, tmp_path / "d.csv")
    back = load_csv(tmp_path / "d.csv")
    np.testing.assert_array_equal(back.inputs, ds.inputs)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert ingest(str(tmp_path / "d.csv")).inputs.shape == (30, 2)


@pytest.mark.parametrize("body,fragment", [
    ("label,f0,f1\n0,0.1,0.2\n1,0.3,abc\n", "row 3, column 'f1'"),
    ("label,f0,f1\nx,0.1,0.2\n", "row 2, column 'label'"),
    ("label,f0,f1\n0,0.1\n", "row 2 has 2 columns"),
    ("lab,f0\n0,0.1\n", "header"),
    ("label,f0\n", "no data rows"),
    ("", "empty"),
])
def test_csv_errors_name_the_location(tmp_path, body, fragment):
    p = tmp_path / "bad.csv"
    p.write_text(body)
    with pytest.raises(DatasetError, match=fragment):
        load_csv(p)


def test_csv_out_of_range_rejected(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("label,f0\n0,1.5\n")
    with pytest.raises(DatasetError, match="range"):
        load_csv(p)


def _mnist_like(tmp_path, rng, n=1000, gz=False):
    imgs = rng.integers(0, 256, size=(n, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, size=n, dtype=np.uint8)
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_idx(imgs, ip)
    write_idx(labels, lp)
    if gz:
        for p in (ip, lp):
            p.with_suffix(".gz").write_bytes(gzip.compress(p.read_bytes()))
        ip, lp = ip.with_suffix(".gz"), lp.with_suffix(".gz")
    return imgs, labels, ip, lp


@pytest.mark.parametrize("gz", [False, True])
def test_idx_round_trip(tmp_path, rng, gz):
    imgs, labels, ip, lp = _mnist_like(tmp_path, rng, gz=gz)
    np.testing.assert_array_equal(read_idx(ip), imgs)
    ds = load_idx(ip, lp)
    assert ds.inputs.shape == (1000, 784)
    assert ds.labels.min() >= 0 and ds.labels.max() < 10
    np.testing.assert_allclose(ds.inputs, imgs.reshape(1000, -1) / 255.0)


def test_idx_bad_magic_and_truncation(tmp_path):
    p = tmp_path / "bad.idx"
    p.write_bytes(b"\x00\x00\x0d\x01" + b"\x00\x00\x00\x01" + b"\x00")
    with pytest.raises(DatasetError, match="magic"):
        read_idx(p)
    p.write_bytes(b"\x00\x00")
    with pytest.raises(DatasetError, match="truncated"):
        read_idx(p)
    p.write_bytes(b"\x00\x00\x08\x01" + b"\x00\x00\x00\x05" + b"\x00\x01")
    with pytest.raises(DatasetError, match="payload"):
        read_idx(p)


def test_idx_class_filter_and_subsample(tmp_path, rng):
    imgs, labels, ip, lp = _mnist_like(tmp_path, rng)
    ds = load_idx(ip, lp, classes=[7, 3])
    assert ds.n_classes == 2
    assert len(ds) == int(np.sum((labels == 7) | (labels == 3)))
    np.testing.assert_array_equal(ds.labels == 0, labels[np.isin(labels, [7, 3])] == 7)
    sub = load_idx(ip, lp, n=100, seed=1)
    assert len(sub) == 100
    np.testing.assert_array_equal(sub.inputs, load_idx(ip, lp, n=100, seed=1).inputs)
    via = ingest({"kind": "idx", "images": str(ip), "labels": str(lp), "n": 100, "seed": 1})
    np.testing.assert_array_equal(via.inputs, sub.inputs)


def test_ingest_dict_sources(tmp_path):
    ds = ingest({"kind": "two_moons", "n": 40, "seed": 2, "dim": 3})
    assert ds.inputs.shape == (40, 3)
    with pytest.raises(DatasetError):
        ingest({"kind": "parquet"})
