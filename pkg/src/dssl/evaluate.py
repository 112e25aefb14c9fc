"""Frozen-encoder evaluation: linear probe and weighted kNN."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .frameworks import checkpoint_hash, load_checkpoint
from .trainer import cosine_lr, embed, knn_predict


class EvaluationError(ValueError):
    pass


@dataclass
class EvalReport:
    protocol: str
    top1: float
    per_class: list
    confusion: list
    num_train: int
    num_test: int
    checkpoint: Optional[str] = None
    checkpoint_hash: Optional[str] = None
    params: dict = field(default_factory=dict)

    def save(self, path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2)
        return path


def extract_features(encoder, images, batch_size=256, cache_path=None):
    """Frozen pooled features for float images; optionally cached as .npy."""
    if cache_path and os.path.exists(cache_path):
        return torch.from_numpy(np.load(cache_path))
    feats = embed(encoder, images, batch_size)
    if cache_path:
        os.makedirs(os.path.dirname(os.path.abspath(cache_path)), exist_ok=True)
        np.save(cache_path, feats.numpy())
    return feats


def _confusion(pred, labels, num_classes):
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (np.asarray(labels), np.asarray(pred)), 1)
    return m


def _summarize(protocol, pred, labels, num_classes, n_train, params):
    pred, labels = np.asarray(pred), np.asarray(labels)
    conf = _confusion(pred, labels, num_classes)
    support = conf.sum(axis=1)
    per_class = [float(conf[c, c] / support[c]) if support[c] else float("nan")
                 for c in range(num_classes)]
    return EvalReport(protocol, float((pred == labels).mean()), per_class, conf.tolist(),
                      n_train, len(labels), params=params)


def _check(train_feats, train_labels, test_feats, test_labels):
    if len(train_labels) == 0 or len(test_labels) == 0:
        raise EvaluationError("evaluation needs non-empty train and test splits")
    if len(train_feats) != len(train_labels) or len(test_feats) != len(test_labels):
        raise EvaluationError("feature and label counts differ")
    if train_feats.shape[1] != test_feats.shape[1]:
        raise EvaluationError(
            f"feature dimension mismatch: {train_feats.shape[1]} vs {test_feats.shape[1]}")


def linear_eval(train_feats, train_labels, test_feats, test_labels, num_classes=10,
                epochs=50, batch_size=256, base_lr=0.3, momentum=0.9, weight_decay=0.0,
                seed=0) -> EvalReport:
    """Train a linear classifier on frozen features (SGD, cosine decay).

    The learning rate is ``base_lr * batch_size / 256``.
    """
    train_feats = torch.as_tensor(train_feats, dtype=torch.float32)
    test_feats = torch.as_tensor(test_feats, dtype=torch.float32)
    _check(train_feats, train_labels, test_feats, test_labels)
    y = torch.as_tensor(np.asarray(train_labels), dtype=torch.long)
    if int(y.max()) >= num_classes:
        raise EvaluationError(f"label {int(y.max())} outside {num_classes} classes")
    # center and rescale by one global scalar (train statistics) so one lr fits
    # every encoder; a per-dimension scale would break rotation invariance
    mu = train_feats.mean(0)
    scale = (train_feats - mu).pow(2).sum(1).mean().sqrt() + 1e-8
    xtr, xte = (train_feats - mu) / scale, (test_feats - mu) / scale

    g = torch.Generator().manual_seed(seed)
    head = torch.nn.Linear(xtr.shape[1], num_classes)
    with torch.no_grad():
        head.weight.normal_(0, 0.01, generator=g)
        head.bias.zero_()
    lr0 = base_lr * batch_size / 256
    opt = torch.optim.SGD(head.parameters(), lr=lr0, momentum=momentum, weight_decay=weight_decay)
    n = len(xtr)
    steps_per = -(-n // batch_size)
    total = epochs * steps_per
    step = 0
    for _ in range(epochs):
        perm = torch.randperm(n, generator=g)
        for i in range(0, n, batch_size):
            idx = perm[i:i + batch_size]
            for pg in opt.param_groups:
                pg["lr"] = cosine_lr(step, total, lr0)
            loss = F.cross_entropy(head(xtr[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
    with torch.no_grad():
        pred = head(xte).argmax(1).numpy()
    params = {"epochs": epochs, "batch_size": batch_size, "lr": lr0, "seed": seed}
    return _summarize("linear", pred, test_labels, num_classes, n, params)


def knn_eval(train_feats, train_labels, test_feats, test_labels, num_classes=10,
             k=200, t=0.1) -> EvalReport:
    train_feats = torch.as_tensor(train_feats, dtype=torch.float32)
    test_feats = torch.as_tensor(test_feats, dtype=torch.float32)
    _check(train_feats, train_labels, test_feats, test_labels)
    if k > len(train_feats):
        raise EvaluationError(f"k={k} exceeds the memory bank size {len(train_feats)}")
    pred = knn_predict(test_feats, train_feats, train_labels, k, t, num_classes).numpy()
    return _summarize("knn", pred, test_labels, num_classes, len(train_feats), {"k": k, "t": t})


def evaluate_checkpoint(checkpoint, dataset, protocol="linear", out_path=None,
                        feature_cache=None, **kwargs) -> EvalReport:
    """Load an encoder from ``checkpoint`` and evaluate it on ``dataset``."""
    if protocol not in ("linear", "knn"):
        raise EvaluationError(f"unknown protocol {protocol!r}")
    model, _, _ = load_checkpoint(checkpoint)
    digest = checkpoint_hash(checkpoint)
    feats = {}
    for split in ("train", "test"):
        cache = (os.path.join(feature_cache, f"{digest[:16]}-{dataset.checksum[:12]}-{split}.npy")
                 if feature_cache else None)
        feats[split] = extract_features(model.encoder, dataset.images(split), cache_path=cache)
    fn = linear_eval if protocol == "linear" else knn_eval
    report = fn(feats["train"], dataset.labels("train"), feats["test"], dataset.labels("test"),
                num_classes=dataset.num_classes, **kwargs)
    report.checkpoint = os.path.abspath(checkpoint)
    report.checkpoint_hash = digest
    if out_path:
        report.save(out_path)
    return report
