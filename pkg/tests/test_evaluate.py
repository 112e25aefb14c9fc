import json

import numpy as np
import pytest
import torch

from dssl.evaluate import (EvaluationError, evaluate_checkpoint, extract_features, knn_eval,
                           linear_eval)
from dssl.frameworks import ModelConfig, build_model, checkpoint_hash, save_checkpoint, state_hash


def gaussians(n_per, dim, sep, seed):
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((10, dim)) * sep
    x = np.concatenate([c + rng.standard_normal((n_per, dim)) for c in centers])
    y = np.repeat(np.arange(10), n_per)
    return x.astype(np.float32), y


def test_linear_separable_gaussians():
    xtr, ytr = gaussians(50, 32, 10.0, 0)
    xte, yte = gaussians(20, 32, 10.0, 0)
    rep = linear_eval(xtr, ytr, xte, yte, epochs=30)
    assert rep.top1 == 1.0
    assert np.asarray(rep.confusion).trace() == len(yte)


def test_constant_features_are_chance():
    y = np.arange(1000) % 10
    x = np.ones((1000, 16), dtype=np.float32)
    rep = linear_eval(x, y, x, y, epochs=5)
    assert abs(rep.top1 - 0.1) <= 0.02


def test_linear_rotation_invariant():
    xtr, ytr = gaussians(40, 16, 1.2, 1)
    xte, yte = gaussians(40, 16, 1.2, 2)
    q, _ = np.linalg.qr(np.random.default_rng(3).standard_normal((16, 16)))
    q = q.astype(np.float32)
    a = linear_eval(xtr, ytr, xte, yte, epochs=30).top1
    b = linear_eval(xtr @ q, ytr, xte @ q, yte, epochs=30).top1
    assert abs(a - b) <= 0.005 + 1e-9


def test_knn_eval_errors():
    x = np.random.default_rng(0).standard_normal((5, 4))
    with pytest.raises(EvaluationError, match="exceeds"):
        knn_eval(x, np.zeros(5, int), x, np.zeros(5, int), k=6)
    with pytest.raises(EvaluationError, match="counts"):
        knn_eval(x, np.zeros(4, int), x, np.zeros(5, int), k=2)
    with pytest.raises(EvaluationError, match="dimension"):
        knn_eval(x, np.zeros(5, int), x[:, :3], np.zeros(5, int), k=2)


def test_checkpoint_eval_keeps_encoder_frozen(tmp_path, tiny_dataset):
    model = build_model(ModelConfig(width=4, proj_hidden=16, proj_dim=16, pred_hidden=8), seed=0)
    ckpt = save_checkpoint(str(tmp_path / "ckpt"), model)
    before = checkpoint_hash(ckpt)
    enc_before = state_hash(model.encoder)
    cache = tmp_path / "cache"
    rep = evaluate_checkpoint(ckpt, tiny_dataset, "linear", out_path=str(tmp_path / "r.json"),
                              feature_cache=str(cache), epochs=3)
    assert checkpoint_hash(ckpt) == before and state_hash(model.encoder) == enc_before
    assert rep.checkpoint_hash == before
    assert json.load(open(tmp_path / "r.json"))["protocol"] == "linear"
    files = sorted(cache.iterdir())
    assert len(files) == 2
    first = [f.read_bytes() for f in files]
    rep2 = evaluate_checkpoint(ckpt, tiny_dataset, "knn", feature_cache=str(cache), k=5)
    assert [f.read_bytes() for f in sorted(cache.iterdir())] == first
    assert 0.0 <= rep2.top1 <= 1.0


def test_feature_extraction_is_deterministic(tiny_dataset, tmp_path):
    model = build_model(ModelConfig(width=4, proj_hidden=16, proj_dim=16, pred_hidden=8), seed=0)
    imgs = tiny_dataset.images("train")
    a = extract_features(model.encoder, imgs, cache_path=str(tmp_path / "f.npy"))
    b = extract_features(model.encoder, imgs)
    c = extract_features(model.encoder, imgs, cache_path=str(tmp_path / "f.npy"))
    assert torch.equal(a, b) and torch.equal(a, c)
