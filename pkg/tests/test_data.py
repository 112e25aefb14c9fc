import hashlib
import io
import os
import pickle
import tarfile

import numpy as np
import pytest

from dssl.data import DatasetError, ingest_dataset, make_synthetic_tiny


def test_synthetic_is_deterministic_and_balanced():
    a = make_synthetic_tiny(seed=1, n_train=50, n_test=30)
    b = make_synthetic_tiny(seed=1, n_train=50, n_test=30)
    c = make_synthetic_tiny(seed=2, n_train=50, n_test=30)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(a[0], c[0])
    assert a[0].shape == (50, 3, 32, 32) and a[0].dtype == np.uint8
    assert np.bincount(a[1]).tolist() == [5] * 10


def test_ingest_caches_and_verifies(tmp_path):
    ds = ingest_dataset("synthetic-tiny", cache_dir=str(tmp_path))
    cache = tmp_path / "synthetic-tiny-seed0.npz"
    assert cache.exists() and len(ds.train_labels) == 1000 and len(ds.test_labels) == 1000
    again = ingest_dataset("synthetic-tiny", cache_dir=str(tmp_path))
    assert again.checksum == ds.checksum
    # tamper with the cached pixels
    with np.load(cache) as z:
        arrays = {k: z[k] for k in z.files}
    arrays["arr_0"] = arrays["arr_0"].copy()
    arrays["arr_0"][0, 0, 0, 0] ^= 1
    np.savez(cache, **arrays)
    with pytest.raises(DatasetError, match="checksum"):
        ingest_dataset("synthetic-tiny", cache_dir=str(tmp_path))


def _fake_cifar(path, n=4):
    rng = np.random.default_rng(0)
    with tarfile.open(path, "w:gz") as tf:
        for name in [f"data_batch_{i}" for i in range(1, 6)] + ["test_batch"]:
            blob = pickle.dumps({"data": rng.integers(0, 256, (n, 3072), dtype=np.uint8),
                                 "labels": list(rng.integers(0, 10, n))})
            info = tarfile.TarInfo(f"cifar-10-batches-py/{name}")
            info.size = len(blob)
            tf.addfile(info, io.BytesIO(blob))


def _md5(path):
    return hashlib.md5(open(path, "rb").read()).hexdigest()


def test_cifar_archive_reads(tmp_path):
    arc = tmp_path / "a.tar.gz"
    _fake_cifar(arc)
    ds = ingest_dataset("cifar10", cache_dir=str(tmp_path / "c"), archive=str(arc),
                        expected_md5=_md5(arc))
    assert ds.train_images.shape == (20, 3, 32, 32) and ds.test_images.shape == (4, 3, 32, 32)


def test_checksum_mismatch_leaves_no_cache(tmp_path):
    arc = tmp_path / "a.tar.gz"
    _fake_cifar(arc)
    with pytest.raises(DatasetError, match="checksum mismatch"):
        ingest_dataset("cifar10", cache_dir=str(tmp_path / "c"), archive=str(arc))
    assert not os.path.exists(tmp_path / "c" / "cifar10.npz")


def test_corrupt_archive_leaves_no_cache(tmp_path):
    arc = tmp_path / "a.tar.gz"
    arc.write_bytes(b"not a tarball at all")
    with pytest.raises(DatasetError, match="corrupt"):
        ingest_dataset("cifar10", cache_dir=str(tmp_path / "c"), archive=str(arc),
                       expected_md5=_md5(arc))
    assert not os.path.exists(tmp_path / "c" / "cifar10.npz")


def test_missing_archive_without_download(tmp_path):
    with pytest.raises(DatasetError, match="not found"):
        ingest_dataset("cifar10", cache_dir=str(tmp_path), download=False)


def test_unknown_dataset():
    with pytest.raises(DatasetError, match="unknown"):
        ingest_dataset("imagenet")


def test_subset_is_stratified(tiny_dataset):
    sub = tiny_dataset.subset(20, 10)
    assert np.bincount(sub.train_labels).tolist() == [2] * 10
    assert len(sub.test_labels) == 10
