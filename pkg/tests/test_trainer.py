import csv
import json
import math
import os
from dataclasses import replace

import numpy as np
import pytest
import torch

from dssl import trainer as T
from dssl.data import Dataset
from dssl.frameworks import ModelConfig, build_model, state_hash
from dssl.objectives import LossWeights
from dssl.trainer import (CollapseMonitor, EvalSchedule, RunConfig, collapse_detector,
                          cosine_lr, knn_accuracy, knn_predict, pretrain)

SMALL = ModelConfig(width=4, proj_hidden=16, proj_dim=16, pred_hidden=8)


def tiny_cfg(**kw):
    base = dict(epochs=2, batch_size=8, model=SMALL, eval=EvalSchedule(every=1, knn_k=5),
                optim=T.OptimConfig(base_lr=0.05))
    base.update(kw)
    return RunConfig(**base)


def test_cosine_lr_examples():
    assert cosine_lr(0, 100, 0.03) == 0.03
    assert cosine_lr(100, 100, 0.03) == pytest.approx(0.0, abs=1e-15)
    assert cosine_lr(50, 100, 0.03) == pytest.approx(0.015)
    with pytest.raises(ValueError):
        cosine_lr(101, 100, 0.03)


def test_warmup_then_cosine():
    assert T.lr_at(0, 100, 1.0, warmup_steps=10) == pytest.approx(0.1)
    assert T.lr_at(9, 100, 1.0, warmup_steps=10) == pytest.approx(1.0)
    assert T.lr_at(10, 100, 1.0, warmup_steps=10) == pytest.approx(1.0)


def test_knn_self_retrieval():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(50, 8, generator=g)
    y = torch.arange(50) % 10
    assert knn_accuracy(x, y, x, y, k=1) == 1.0


def test_knn_errors():
    with pytest.raises(ValueError, match="exceeds"):
        knn_predict(torch.randn(3, 4), torch.randn(5, 4), torch.zeros(5), k=6)
    with pytest.raises(ValueError, match="empty"):
        knn_predict(torch.randn(3, 4), torch.zeros(0, 4), torch.zeros(0), k=1)


def test_knn_random_and_collapsed_features_are_chance():
    # Monte Carlo: random unit vectors / identical vectors, 10 balanced classes
    rng = np.random.default_rng(0)
    accs_rand, accs_coll = [], []
    for _ in range(20):
        mem = rng.standard_normal((500, 32))
        qry = rng.standard_normal((500, 32))
        ym = np.arange(500) % 10
        yq = rng.permutation(ym)
        accs_rand.append(knn_accuracy(mem, ym, qry, yq, k=20))
        const = np.ones((500, 32))
        accs_coll.append(knn_accuracy(const, ym, const, yq, k=20))
    assert abs(np.mean(accs_rand) - 0.1) < 0.05
    assert abs(np.mean(accs_coll) - 0.1) < 0.05


def test_collapse_detector_examples():
    same = np.tile(np.random.default_rng(0).standard_normal(16), (32, 1))
    flag, std = collapse_detector(same)
    assert flag and std == pytest.approx(0.0, abs=1e-12)
    iso = np.random.default_rng(1).standard_normal((256, 64))
    flag, std = collapse_detector(iso)
    assert not flag and abs(std - 1 / 8) < 0.01
    with pytest.raises(ValueError):
        collapse_detector(np.ones((1, 4)))


def test_collapse_threshold_is_strict():
    emb = np.random.default_rng(2).standard_normal((64, 4))
    _, std = collapse_detector(emb)
    # d = 4 so sqrt(d) = 2 exactly: threshold equals std
    flag, _ = collapse_detector(emb, threshold_scale=2 * std)
    assert not flag
    flag, _ = collapse_detector(emb, threshold_scale=2 * std * (1 + 1e-9))
    assert flag


def test_collapse_monitor_patience():
    same = np.ones((8, 4))
    healthy = np.random.default_rng(0).standard_normal((64, 4))
    mon = CollapseMonitor(patience=2)
    assert mon.update(same, 0)[0] is False
    assert mon.update(healthy, 1)[0] is False
    assert mon.update(same, 2)[0] is False
    assert mon.update(same, 3)[0] is True and mon.fired_at == 3


def test_run_config_validation():
    with pytest.raises(ValueError, match="batch_size"):
        tiny_cfg(batch_size=1).validate()
    with pytest.raises(ValueError, match="epochs"):
        tiny_cfg(epochs=0).validate()
    with pytest.raises(ValueError, match="view_mode"):
        tiny_cfg(view_mode="nope").validate()
    with pytest.raises(ValueError, match="no heavy views"):
        tiny_cfg(view_mode="baseline_1pair", loss=LossWeights(1, 0, 1, 0)).validate()
    assert tiny_cfg(view_mode="dssl").resolved().loss == LossWeights(1, 0, 1, 0)
    assert tiny_cfg(view_mode="baseline_2pairs").resolved().loss == LossWeights(1, 0, 0, 0)


def test_one_step_changes_parameters(tiny_dataset):
    ds = Dataset("four", tiny_dataset.train_images[:4], tiny_dataset.train_labels[:4],
                 tiny_dataset.test_images[:4], tiny_dataset.test_labels[:4], "x")
    cfg = tiny_cfg(epochs=1, batch_size=4)
    before = state_hash(build_model(SMALL, seed=cfg.seed).encoder)
    res = pretrain(cfg, dataset=ds)
    assert res.steps == 1
    assert state_hash(res.model.encoder) != before


def test_metrics_stream(tmp_path, tiny_dataset):
    res = pretrain(tiny_cfg(), run_dir=str(tmp_path), dataset=tiny_dataset)
    lines = [json.loads(l) for l in open(tmp_path / "metrics.jsonl")]
    steps = [l for l in lines if l["kind"] == "step"]
    epochs = [l for l in lines if l["kind"] == "epoch"]
    assert len(steps) == res.steps == 2 * math.ceil(40 / 8)
    assert len(epochs) == 2
    for e in epochs:
        assert 0 <= e["feature_std"] <= 1 and 0 <= e["knn_acc"] <= 1
    with open(tmp_path / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(lines)
    assert {"loss", "lr", "knn_acc", "feature_std", "sym_standard"} <= set(rows[0])
    assert os.path.exists(tmp_path / "checkpoint-final" / "manifest.json")


def _losses(res):
    return [m.loss for m in res.metrics if m.kind == "step"]


def test_determinism_and_worker_count(tiny_dataset):
    a = pretrain(tiny_cfg(), dataset=tiny_dataset)
    b = pretrain(tiny_cfg(), dataset=tiny_dataset)
    c = pretrain(tiny_cfg(workers=3), dataset=tiny_dataset)
    assert _losses(a) == _losses(b) == _losses(c)
    assert state_hash(a.model) == state_hash(c.model)


@pytest.mark.parametrize("mode", ["dssl", "baseline_2pairs", "baseline_joint", "baseline_1pair"])
def test_step_count_independent_of_mode(mode, tiny_dataset):
    res = pretrain(tiny_cfg(view_mode=mode, epochs=1, batch_size=16), dataset=tiny_dataset)
    assert res.steps == math.ceil(40 / 16)


def test_resume_matches_uninterrupted(tmp_path, tiny_dataset):
    full = pretrain(tiny_cfg(epochs=2), dataset=tiny_dataset)
    first = pretrain(tiny_cfg(epochs=2, checkpoint_every=1), run_dir=str(tmp_path),
                     dataset=tiny_dataset, max_steps=5)
    assert first.steps == 5
    resumed = pretrain(tiny_cfg(epochs=2), dataset=tiny_dataset,
                       resume_from=str(tmp_path / "checkpoint-ep0001"))
    assert _losses(resumed) == _losses(full)[5:]
    assert state_hash(resumed.model) == state_hash(full.model)


@pytest.mark.parametrize("fw", ["byol", "simclr"])
def test_other_frameworks_train(fw, tiny_dataset):
    cfg = tiny_cfg(model=replace(SMALL, framework=fw), epochs=1)
    res = pretrain(cfg, dataset=tiny_dataset)
    assert all(math.isfinite(l) for l in _losses(res))


def test_nan_loss_aborts_with_diagnostics(tmp_path, tiny_dataset, monkeypatch):
    real = T.general_loss

    def poisoned(*a, **kw):
        out = real(*a, **kw)
        out.total = out.total * float("nan")
        return out

    monkeypatch.setattr(T, "general_loss", poisoned)
    with pytest.raises(T.TrainingDiverged):
        pretrain(tiny_cfg(), run_dir=str(tmp_path), dataset=tiny_dataset)
    diag = json.load(open(tmp_path / "diagnostics.json"))
    assert diag["step"] == 0 and len(diag["source_ids"]) == 8
