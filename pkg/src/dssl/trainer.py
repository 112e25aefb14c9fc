"""Pretraining loop with kNN monitoring, collapse detection and checkpoints."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .augment import ImageSample
from .data import DATASETS, Dataset, ingest_dataset
from .frameworks import (ModelConfig, build_model, ema_update, forward_views,
                         load_checkpoint, momentum_at, save_checkpoint)
from .objectives import (DSSL_WEIGHTS, FRAMEWORK_SIMILARITY, LossWeights,
                         SimilarityObjective, general_loss, required_slots)
from .views import VIEW_MODES, ViewConfig, build_training_views

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class DataConfig:
    name: str = "synthetic-tiny"
    seed: int = 0
    train_size: int = 0   # 0 = full split
    test_size: int = 0

    def validate(self):
        if self.name not in DATASETS:
            raise ValueError(f"name: unknown dataset {self.name!r} (expected one of {DATASETS})")
        if self.train_size < 0 or self.test_size < 0:
            raise ValueError("train_size/test_size: must be >= 0")
        return self


@dataclass(frozen=True)
class OptimConfig:
    base_lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4
    warmup_epochs: int = 0

    def validate(self):
        if self.base_lr <= 0:
            raise ValueError(f"base_lr: must be > 0, got {self.base_lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum: must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0 or self.warmup_epochs < 0:
            raise ValueError("weight_decay/warmup_epochs: must be >= 0")
        return self


@dataclass(frozen=True)
class EvalSchedule:
    every: int = 1
    knn_k: int = 200
    knn_t: float = 0.1

    def validate(self):
        if self.every < 1 or self.knn_k < 1 or self.knn_t <= 0:
            raise ValueError("eval: every and knn_k must be >= 1, knn_t > 0")
        return self


@dataclass(frozen=True)
class CollapseConfig:
    threshold_scale: float = 0.2
    patience: int = 2

    def validate(self):
        if self.threshold_scale <= 0 or self.patience < 1:
            raise ValueError("collapse: threshold_scale must be > 0 and patience >= 1")
        return self


@dataclass(frozen=True)
class RunConfig:
    name: str = "run"
    seed: int = 0
    epochs: int = 800
    batch_size: int = 512
    view_mode: str = "dssl"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    views: ViewConfig = field(default_factory=ViewConfig)
    loss: Optional[LossWeights] = None
    temperature: float = 0.5
    simclr_asym_form: str = "cosine"
    optim: OptimConfig = field(default_factory=OptimConfig)
    eval: EvalSchedule = field(default_factory=EvalSchedule)
    collapse: CollapseConfig = field(default_factory=CollapseConfig)
    deterministic: bool = True
    workers: int = 1
    checkpoint_every: int = 0

    def resolved(self) -> "RunConfig":
        """Fill the mode-dependent default loss weights."""
        if self.loss is not None:
            return self
        weights = DSSL_WEIGHTS if self.view_mode == "dssl" else LossWeights(1.0, 0.0, 0.0, 0.0)
        return replace(self, loss=weights)

    def validate(self):
        if self.batch_size < 2:
            raise ValueError(f"batch_size: must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs: must be >= 1, got {self.epochs}")
        if self.view_mode not in VIEW_MODES:
            raise ValueError(f"view_mode: unknown mode {self.view_mode!r} "
                             f"(expected one of {VIEW_MODES})")
        if self.workers < 1 or self.checkpoint_every < 0:
            raise ValueError("workers must be >= 1 and checkpoint_every >= 0")
        if self.simclr_asym_form not in ("cosine", "softmax"):
            raise ValueError("simclr_asym_form: expected cosine|softmax")
        for section in (self.data, self.model, self.views, self.optim, self.eval, self.collapse):
            section.validate()
        weights = self.resolved().loss
        weights.validate()
        if self.view_mode != "dssl" and (weights.beta or weights.gamma or weights.delta):
            raise ValueError(f"loss: view mode {self.view_mode!r} has no heavy views; "
                             "only alpha may be non-zero")
        return self


@dataclass
class MetricsRecord:
    kind: str
    epoch: int
    step: int
    loss: float
    terms: dict
    lr: float
    wall_time: float
    feature_std: Optional[float] = None
    knn_acc: Optional[float] = None
    collapsed: Optional[bool] = None

    def flat(self):
        d = {k: v for k, v in asdict(self).items() if k != "terms"}
        d.update(self.terms)
        return d


# ---------------------------------------------------------------------------
# schedules and monitors


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def lr_at(step, total_steps, base_lr, warmup_steps=0):
    if warmup_steps and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    return cosine_lr(step - warmup_steps, total_steps - warmup_steps, base_lr)


@torch.no_grad()
def knn_predict(query, memory, memory_labels, k, t=0.1, num_classes=None):
    """Cosine-similarity weighted vote among the ``k`` nearest memory rows."""
    memory = torch.as_tensor(memory, dtype=torch.float32)
    query = torch.as_tensor(query, dtype=torch.float32)
    memory_labels = torch.as_tensor(memory_labels, dtype=torch.long)
    if memory.shape[0] == 0:
        raise ValueError("knn memory set is empty")
    if k > memory.shape[0]:
        raise ValueError(f"k={k} exceeds memory size {memory.shape[0]}")
    num_classes = num_classes or int(memory_labels.max()) + 1
    memory = F.normalize(memory, dim=1)
    preds = []
    for chunk in F.normalize(query, dim=1).split(512):
        sim = chunk @ memory.T
        w, idx = sim.topk(k, dim=1)
        votes = torch.zeros(chunk.shape[0], num_classes)
        votes.scatter_add_(1, memory_labels[idx], (w / t).exp())
        preds.append(votes.argmax(dim=1))
    return torch.cat(preds)


def knn_accuracy(memory, memory_labels, query, query_labels, k=200, t=0.1):
    pred = knn_predict(query, memory, memory_labels, k, t)
    return float((pred == torch.as_tensor(query_labels)).float().mean())


@torch.no_grad()
def embed(module, images, batch_size=256):
    """Run ``module`` in eval mode over float images ``(N, 3, H, W)``."""
    was_training = module.training
    module.eval()
    device = next(module.parameters()).device
    out = [module(torch.as_tensor(np.ascontiguousarray(images[i:i + batch_size])).to(device)).cpu()
           for i in range(0, len(images), batch_size)]
    module.train(was_training)
    return torch.cat(out)


def knn_monitor(encoder, memory_images, memory_labels, query_images, query_labels,
                k=200, t=0.1):
    mem = embed(encoder, memory_images)
    qry = embed(encoder, query_images)
    return knn_accuracy(mem, memory_labels, qry, query_labels, k, t)


def feature_std(embeddings) -> float:
    """Mean over dimensions of the per-dimension std of l2-normalized rows."""
    z = F.normalize(torch.as_tensor(embeddings, dtype=torch.float64), dim=1)
    return float(z.std(dim=0, unbiased=False).mean())


def collapse_detector(embeddings, threshold_scale=0.2):
    """Return ``(flag, std)``; ``flag`` is ``std < threshold_scale / sqrt(d)`` (strict)."""
    emb = torch.as_tensor(embeddings)
    if emb.ndim != 2 or emb.shape[0] < 2:
        raise ValueError("collapse_detector needs a batch of at least 2 embeddings")
    std = feature_std(emb)
    return std < threshold_scale / math.sqrt(emb.shape[1]), std


class CollapseMonitor:
    """Fires once the detector has flagged ``patience`` consecutive evaluations."""

    def __init__(self, threshold_scale=0.2, patience=2):
        self.threshold_scale = threshold_scale
        self.patience = patience
        self.streak = 0
        self.fired = False
        self.fired_at = None

    def update(self, embeddings, epoch=None):
        flag, std = collapse_detector(embeddings, self.threshold_scale)
        self.streak = self.streak + 1 if flag else 0
        if self.streak >= self.patience and not self.fired:
            self.fired = True
            self.fired_at = epoch
            log.warning("collapse detected at epoch %s (feature std %.4g)", epoch, std)
        return self.fired, std


# ---------------------------------------------------------------------------
# data preparation


def sample_rng(seed, epoch, index):
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index]))


def epoch_order(seed, epoch, n):
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, 2**31 - 1])).permutation(n)


def steps_per_epoch(n, batch_size):
    return math.ceil(n / batch_size)


def build_batch(images, indices, config: RunConfig, epoch, pool=None):
    """View sets for one mini-batch, collated into ``{slot: tensor}``."""
    def one(i):
        img = ImageSample(images[i], int(i))
        return build_training_views(img, config.view_mode, config.views,
                                    sample_rng(config.seed, epoch, int(i))).check()

    sets = list(pool.map(one, indices)) if pool is not None else [one(i) for i in indices]
    slots = sets[0].slots
    batch = {s: torch.from_numpy(np.stack([vs.views[s].pixels for vs in sets])) for s in slots}
    return batch, sets[0].edges, sets


# ---------------------------------------------------------------------------


@dataclass
class PretrainResult:
    model: object
    metrics: list
    steps: int
    collapsed: bool
    collapsed_at: Optional[int]
    checkpoint: Optional[str]
    final_knn: Optional[float]


class MetricsWriter:
    """metrics.jsonl plus a CSV mirror with a fixed column set."""

    COLUMNS = ("kind", "epoch", "step", "loss", "sym_standard", "sym_heavy",
               "asym_heavy_to_standard", "asym_standard_to_heavy", "lr",
               "feature_std", "knn_acc", "collapsed", "wall_time")

    def __init__(self, run_dir):
        self.run_dir = run_dir
        self._jsonl = self._csv = None
        if run_dir:
            os.makedirs(run_dir, exist_ok=True)
            self._jsonl = open(os.path.join(run_dir, "metrics.jsonl"), "a")
            path = os.path.join(run_dir, "metrics.csv")
            fresh = not os.path.exists(path) or os.path.getsize(path) == 0
            self._csv_fh = open(path, "a", newline="")
            self._csv = csv.DictWriter(self._csv_fh, fieldnames=self.COLUMNS, extrasaction="ignore")
            if fresh:
                self._csv.writeheader()

    def write(self, rec: MetricsRecord):
        if self._jsonl is None:
            return
        flat = rec.flat()
        self._jsonl.write(json.dumps(flat) + "\n")
        self._csv.writerow(flat)
        if rec.kind == "epoch":
            self._jsonl.flush()
            self._csv_fh.flush()

    def close(self):
        if self._jsonl is not None:
            self._jsonl.close()
            self._csv_fh.close()


def _dump_diagnostics(run_dir, config, epoch, step, breakdown, sets):
    if not run_dir:
        return
    payload = {
        "epoch": epoch, "step": step,
        "terms": {k: float(v.detach()) for k, v in breakdown.terms.items()},
        "source_ids": [vs.source_id for vs in sets],
        "policy_trace": [{k: {kk: vv for kk, vv in rec.items() if kk in ("seed", "policy", "parent")}
                          for k, rec in vs.policy_trace.items()} for vs in sets],
        "config_name": config.name,
    }
    with open(os.path.join(run_dir, "diagnostics.json"), "w") as fh:
        json.dump(payload, fh, indent=2)


def _evaluate(model, dataset: Dataset, config: RunConfig, monitor: CollapseMonitor, epoch):
    mem_x, qry_x = dataset.images("train"), dataset.images("test")
    mem = embed(model.encoder, mem_x)
    qry = embed(model.encoder, qry_x)
    k = min(config.eval.knn_k, len(mem))
    acc = knn_accuracy(mem, dataset.labels("train"), qry, dataset.labels("test"), k, config.eval.knn_t)
    proj = embed(model.projector, mem)
    collapsed, std = monitor.update(proj, epoch)
    return acc, std, collapsed


def pretrain(config: RunConfig, run_dir: Optional[str] = None, dataset: Optional[Dataset] = None,
             resume_from: Optional[str] = None, max_steps: Optional[int] = None,
             device: str = "cpu") -> PretrainResult:
    """Run ``epochs x ceil(N / batch)`` optimizer steps and return the trained model.

    ``max_steps`` stops early (used by tests); ``resume_from`` continues from
    a checkpoint directory written by a previous call.
    """
    config = config.resolved().validate()
    if config.deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
    if dataset is None:
        dataset = ingest_dataset(config.data.name, seed=config.data.seed)
    dataset = dataset.subset(config.data.train_size or None, config.data.test_size or None)
    images = dataset.images("train")
    n = len(images)

    model = build_model(config.model, seed=config.seed)
    opt_state = None
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=config.optim.base_lr, momentum=config.optim.momentum,
                          weight_decay=config.optim.weight_decay)
    start_epoch = 0
    step = 0
    if resume_from:
        model, opt_state, manifest = load_checkpoint(resume_from)
        params = [p for p in model.parameters() if p.requires_grad]
        opt = torch.optim.SGD(params, lr=config.optim.base_lr, momentum=config.optim.momentum,
                              weight_decay=config.optim.weight_decay)
        start_epoch, step = manifest["epoch"], manifest["step"]

    model.to(device)
    if resume_from and opt_state is not None:
        opt.load_state_dict(opt_state)
    spe = steps_per_epoch(n, config.batch_size)
    total_steps = config.epochs * spe
    warmup = config.optim.warmup_epochs * spe
    weights = config.loss
    similarity = SimilarityObjective(FRAMEWORK_SIMILARITY[config.model.framework],
                                     config.temperature)
    z_slots, y_slots = required_slots(weights, config.view_mode)
    monitor = CollapseMonitor(config.collapse.threshold_scale, config.collapse.patience)
    writer = MetricsWriter(run_dir)
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    metrics, final_knn, checkpoint = [], None, None
    t0 = time.time()
    model.train()
    try:
        for epoch in range(start_epoch, config.epochs):
            order = epoch_order(config.seed, epoch, n)
            epoch_terms = {}
            for b in range(spe):
                if max_steps is not None and step >= max_steps:
                    break
                idx = order[b * config.batch_size:(b + 1) * config.batch_size]
                batch, edges, sets = build_batch(images, idx, config, epoch, pool)
                batch = {k: v.to(device) for k, v in batch.items()}
                lr = lr_at(step, total_steps, config.optim.base_lr, warmup)
                for g in opt.param_groups:
                    g["lr"] = lr
                feats = forward_views(model, batch, edges, target_slots=y_slots, slots=z_slots)
                out = general_loss(feats, weights, similarity)
                if not torch.isfinite(out.total):
                    _dump_diagnostics(run_dir, config, epoch, step, out, sets)
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}")
                opt.zero_grad(set_to_none=True)
                out.total.backward()
                opt.step()
                if config.model.framework == "byol":
                    ema_update(model, momentum_at(step, total_steps, config.model.momentum_tau,
                                                  config.model.tau_schedule))
                values = out.as_floats()
                rec = MetricsRecord("step", epoch, step, values.pop("loss"), values, lr,
                                    time.time() - t0)
                writer.write(rec)
                metrics.append(rec)
                for k, v in values.items():
                    epoch_terms.setdefault(k, []).append(v)
                epoch_terms.setdefault("loss", []).append(rec.loss)
                step += 1
            if max_steps is not None and step >= max_steps and not epoch_terms:
                break
            last = epoch == config.epochs - 1
            knn = std = None
            if (epoch + 1) % config.eval.every == 0 or last:
                knn, std, _ = _evaluate(model, dataset, config, monitor, epoch)
                final_knn = knn
                log.info("epoch %d loss %.4f knn %.4f std %.4f", epoch,
                         float(np.mean(epoch_terms["loss"])), knn, std)
            means = {k: float(np.mean(v)) for k, v in epoch_terms.items()}
            rec = MetricsRecord("epoch", epoch, step, means.pop("loss"), means,
                                opt.param_groups[0]["lr"], time.time() - t0, std, knn,
                                monitor.fired)
            writer.write(rec)
            metrics.append(rec)
            if run_dir and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                checkpoint = save_checkpoint(os.path.join(run_dir, f"checkpoint-ep{epoch + 1:04d}"),
                                             model, opt, epoch=epoch + 1, step=step,
                                             seed=config.seed)
            if max_steps is not None and step >= max_steps:
                break
    finally:
        writer.close()
        if pool is not None:
            pool.shutdown()
    if run_dir:
        checkpoint = save_checkpoint(os.path.join(run_dir, "checkpoint-final"), model, opt,
                                     epoch=epoch + 1, step=step, seed=config.seed)
    return PretrainResult(model, metrics, step, monitor.fired, monitor.fired_at, checkpoint, final_knn)
