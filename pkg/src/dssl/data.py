"""Dataset ingestion with verified on-disk caches.

``synthetic-tiny`` is generated locally and deterministically: ten shape
classes drawn at random position, scale, colour and noise on 32x32
canvases. ``cifar10`` is read from the official python archive, which is
downloaded (or copied in by hand) and checked against its published MD5.
"""
from __future__ import annotations

import hashlib
import io
import os
import pickle
import shutil
import tarfile
import tempfile
import urllib.request
from dataclasses import dataclass
from typing import Optional

import numpy as np

DATASETS = ("synthetic-tiny", "cifar10")

CIFAR10_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-python.tar.gz"
CIFAR10_ARCHIVE = "cifar-10-python.tar.gz"
CIFAR10_MD5 = "c58f30108f718f92721af3b95e74349a"

SYNTHETIC_CLASSES = ("disc", "square", "triangle", "cross", "ring",
                     "h_stripes", "v_stripes", "checker", "diagonal", "dots")
SYNTHETIC_TRAIN = 1000
SYNTHETIC_TEST = 1000


class DatasetError(RuntimeError):
    pass


@dataclass
class Dataset:
    name: str
    train_images: np.ndarray   # uint8 (N, 3, H, W)
    train_labels: np.ndarray   # int64 (N,)
    test_images: np.ndarray
    test_labels: np.ndarray
    checksum: str
    num_classes: int = 10

    def images(self, split="train", indices=None):
        """float32 images in [0, 1] for ``split``."""
        arr = self.train_images if split == "train" else self.test_images
        if indices is not None:
            arr = arr[indices]
        return arr.astype(np.float32) / 255.0

    def labels(self, split="train"):
        return self.train_labels if split == "train" else self.test_labels

    def subset(self, n_train=None, n_test=None):
        """Class-stratified prefix subsets (deterministic)."""
        def pick(labels, n):
            if n is None or n >= len(labels):
                return np.arange(len(labels))
            per = n // self.num_classes
            idx = np.concatenate([np.flatnonzero(labels == c)[:per]
                                  for c in range(self.num_classes)])
            return np.sort(idx)
        tr, te = pick(self.train_labels, n_train), pick(self.test_labels, n_test)
        return Dataset(self.name, self.train_images[tr], self.train_labels[tr],
                       self.test_images[te], self.test_labels[te], self.checksum,
                       self.num_classes)


def _md5(path, chunk=1 << 20):
    h = hashlib.md5()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(chunk), b""):
            h.update(block)
    return h.hexdigest()


def _array_digest(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# synthetic-tiny


def _shape_mask(kind, size, rng):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    scale = rng.uniform(0.55, 0.9) * size / 2
    cx = size / 2 + rng.uniform(-0.15, 0.15) * size
    cy = size / 2 + rng.uniform(-0.15, 0.15) * size
    dx, dy = (xx - cx) / scale, (yy - cy) / scale
    inside = (np.abs(dx) <= 1) & (np.abs(dy) <= 1)
    period = rng.uniform(5.0, 7.0)
    phase = rng.uniform(0, period)
    if kind == "disc":
        return dx ** 2 + dy ** 2 <= 0.8
    if kind == "square":
        return (np.abs(dx) <= 0.75) & (np.abs(dy) <= 0.75)
    if kind == "triangle":
        return (dy <= 0.8) & (dy >= -0.8) & (np.abs(dx) <= (dy + 0.8) / 1.6 * 0.9)
    if kind == "cross":
        return inside & ((np.abs(dx) <= 0.25) | (np.abs(dy) <= 0.25))
    if kind == "ring":
        r2 = dx ** 2 + dy ** 2
        return (r2 <= 0.9) & (r2 >= 0.35)
    if kind == "h_stripes":
        return inside & (((yy + phase) % period) < period / 2)
    if kind == "v_stripes":
        return inside & (((xx + phase) % period) < period / 2)
    if kind == "checker":
        return inside & ((((xx + phase) // (period / 1.5)) + ((yy + phase) // (period / 1.5))) % 2 == 0)
    if kind == "diagonal":
        return inside & (((xx + yy + phase) % period) < period / 2)
    # dots
    return inside & ((((xx + phase) % period) - period / 2) ** 2
                     + (((yy + phase) % period) - period / 2) ** 2 <= (period / 4) ** 2)


def _render(label, size, rng):
    # one dark and one light level with a small per-channel tint; fully random
    # colours swamp the shape signal at this scale
    dark = rng.uniform(0.0, 0.35) + rng.uniform(-0.1, 0.1, size=3)
    light = rng.uniform(0.6, 1.0) + rng.uniform(-0.1, 0.1, size=3)
    fg, bg = (light, dark) if rng.random() < 0.5 else (dark, light)
    mask = _shape_mask(SYNTHETIC_CLASSES[label], size, rng)
    img = np.where(mask[None], fg[:, None, None], bg[:, None, None])
    img = img + rng.normal(0.0, 0.06, size=img.shape)
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def make_synthetic_tiny(seed=0, n_train=SYNTHETIC_TRAIN, n_test=SYNTHETIC_TEST, size=32):
    """Balanced 10-class set; identical bytes for identical ``seed``."""
    ss = np.random.SeedSequence(seed)
    out = []
    for split_seed, n in zip(ss.spawn(2), (n_train, n_test)):
        rng = np.random.default_rng(split_seed)
        labels = np.arange(n) % len(SYNTHETIC_CLASSES)
        labels = labels[rng.permutation(n)]
        images = np.stack([_render(int(c), size, rng) for c in labels])
        out += [images, labels.astype(np.int64)]
    return out


# ---------------------------------------------------------------------------
# cifar10


def _read_cifar_archive(path):
    def batches(tf, names):
        xs, ys = [], []
        for name in names:
            member = tf.extractfile(f"cifar-10-batches-py/{name}")
            if member is None:
                raise DatasetError(f"archive is missing {name}")
            d = pickle.load(io.BytesIO(member.read()), encoding="latin1")
            xs.append(np.asarray(d["data"], dtype=np.uint8).reshape(-1, 3, 32, 32))
            ys.append(np.asarray(d["labels"], dtype=np.int64))
        return np.concatenate(xs), np.concatenate(ys)

    with tarfile.open(path, "r:gz") as tf:
        xtr, ytr = batches(tf, [f"data_batch_{i}" for i in range(1, 6)])
        xte, yte = batches(tf, ["test_batch"])
    return xtr, ytr, xte, yte


def _fetch(url, dest):
    tmp = dest + ".part"
    try:
        with urllib.request.urlopen(url, timeout=60) as r, open(tmp, "wb") as fh:
            shutil.copyfileobj(r, fh)
    except OSError as exc:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise DatasetError(f"could not download {url}: {exc}") from exc
    os.replace(tmp, dest)


# ---------------------------------------------------------------------------


def default_cache_dir():
    return os.environ.get("DSSL_CACHE_DIR", os.path.join(os.path.expanduser("~"), ".cache", "dssl"))


def _save_cache(cache_file, arrays, checksum):
    os.makedirs(os.path.dirname(cache_file), exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(cache_file), suffix=".npz")
    os.close(fd)
    try:
        np.savez(tmp, *arrays, checksum=np.array(checksum))
        os.replace(tmp, cache_file)
    except OSError as exc:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise DatasetError(f"failed to write dataset cache {cache_file}: {exc}") from exc


def _load_cache(cache_file):
    with np.load(cache_file) as z:
        arrays = [z[f"arr_{i}"] for i in range(4)]
        checksum = str(z["checksum"])
    if _array_digest(*arrays) != checksum:
        raise DatasetError(f"cache {cache_file} failed its checksum; delete it and re-ingest")
    return arrays, checksum


def ingest_dataset(name: str, cache_dir: Optional[str] = None, seed: int = 0,
                   archive: Optional[str] = None, expected_md5: str = CIFAR10_MD5,
                   download: bool = True) -> Dataset:
    """Materialize (or reuse) a verified cache and return the dataset."""
    if name not in DATASETS:
        raise DatasetError(f"unknown dataset {name!r} (expected one of {DATASETS})")
    cache_dir = cache_dir or default_cache_dir()
    tag = f"{name}-seed{seed}" if name == "synthetic-tiny" else name
    cache_file = os.path.join(cache_dir, f"{tag}.npz")
    if os.path.exists(cache_file):
        arrays, checksum = _load_cache(cache_file)
        return Dataset(name, *arrays, checksum=checksum)

    if name == "synthetic-tiny":
        arrays = make_synthetic_tiny(seed)
    else:
        archive = archive or os.path.join(cache_dir, CIFAR10_ARCHIVE)
        if not os.path.exists(archive):
            if not download:
                raise DatasetError(f"cifar10 archive not found at {archive}")
            os.makedirs(os.path.dirname(archive) or ".", exist_ok=True)
            _fetch(CIFAR10_URL, archive)
        digest = _md5(archive)
        if digest != expected_md5:
            raise DatasetError(
                f"checksum mismatch for {archive}: md5 {digest}, expected {expected_md5}")
        try:
            arrays = list(_read_cifar_archive(archive))
        except (tarfile.TarError, pickle.UnpicklingError, EOFError, KeyError) as exc:
            raise DatasetError(f"corrupt cifar10 archive {archive}: {exc}") from exc
    checksum = _array_digest(*arrays)
    _save_cache(cache_file, arrays, checksum)
    return Dataset(name, *arrays, checksum=checksum)
