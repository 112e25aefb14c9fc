"""Encoder / projector / predictor stacks and the per-framework target rule.

* simsiam: target = projector(encoder(v)) with the gradient path severed
* byol:    target = momentum copy of (encoder, projector), EMA-updated
* simclr:  target = projector(encoder(v)), gradients flow
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass
from typing import Optional

import torch
from torch import nn

FRAMEWORKS = ("simsiam", "byol", "simclr")
ENCODERS = ("small_cnn", "resnet18")


@dataclass(frozen=True)
class ModelConfig:
    framework: str = "simsiam"
    encoder: str = "small_cnn"
    width: int = 32
    proj_hidden: int = 512
    proj_dim: int = 512
    proj_layers: int = 2
    pred_hidden: int = 128
    momentum_tau: float = 0.99
    tau_schedule: str = "constant"

    def validate(self):
        if self.framework not in FRAMEWORKS:
            raise ValueError(f"framework: unknown framework {self.framework!r} "
                             f"(expected one of {FRAMEWORKS})")
        if self.encoder not in ENCODERS:
            raise ValueError(f"encoder: unknown encoder {self.encoder!r} "
                             f"(expected one of {ENCODERS})")
        if self.proj_layers not in (2, 3):
            raise ValueError(f"proj_layers: must be 2 or 3, got {self.proj_layers}")
        if not 0.0 <= self.momentum_tau <= 1.0:
            raise ValueError(f"momentum_tau: must lie in [0, 1], got {self.momentum_tau}")
        if self.tau_schedule not in ("constant", "cosine"):
            raise ValueError(f"tau_schedule: expected constant|cosine, got {self.tau_schedule!r}")
        for name in ("width", "proj_hidden", "proj_dim", "pred_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name}: must be positive")
        return self


def _conv_bn(cin, cout, stride):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class SmallConvNet(nn.Module):
    """Four conv stages with global average pooling; desk-scale backbone."""

    def __init__(self, width=32):
        super().__init__()
        self.features = nn.Sequential(
            _conv_bn(3, width, 1),
            _conv_bn(width, 2 * width, 2),
            _conv_bn(2 * width, 4 * width, 2),
            _conv_bn(4 * width, 8 * width, 2),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )
        self.out_dim = 8 * width

    def forward(self, x):
        return self.features(x)


def resnet18_cifar():
    """ResNet-18 with a 3x3 stem and no max-pool, for 32x32 inputs."""
    try:
        from torchvision.models import resnet18
    except ImportError as exc:
        raise ImportError("the resnet18 encoder needs torchvision "
                          "(pip install 'artifact[resnet]')") from exc

    net = resnet18(num_classes=10)
    net.conv1 = nn.Conv2d(3, 64, 3, stride=1, padding=1, bias=False)
    net.maxpool = nn.Identity()
    net.fc = nn.Identity()
    net.out_dim = 512
    return net


def build_encoder(cfg: ModelConfig):
    if cfg.encoder == "resnet18":
        return resnet18_cifar()
    return SmallConvNet(cfg.width)


def build_projector(cfg: ModelConfig, in_dim):
    h, d = cfg.proj_hidden, cfg.proj_dim
    layers = [nn.Linear(in_dim, h, bias=False), nn.BatchNorm1d(h), nn.ReLU(inplace=True)]
    if cfg.proj_layers == 3:
        layers += [nn.Linear(h, h, bias=False), nn.BatchNorm1d(h), nn.ReLU(inplace=True)]
    if cfg.framework == "simsiam":
        layers += [nn.Linear(h, d, bias=False), nn.BatchNorm1d(d)]
    else:
        layers += [nn.Linear(h, d)]
    return nn.Sequential(*layers)


def build_predictor(cfg: ModelConfig):
    d, h = cfg.proj_dim, cfg.pred_hidden
    return nn.Sequential(
        nn.Linear(d, h, bias=False), nn.BatchNorm1d(h), nn.ReLU(inplace=True), nn.Linear(h, d))


class ModelBundle(nn.Module):
    def __init__(self, encoder, projector, predictor=None, momentum=None,
                 framework="simsiam", cfg: Optional[ModelConfig] = None):
        super().__init__()
        self.encoder = encoder
        self.projector = projector
        self.predictor = predictor
        self.momentum = momentum
        self.framework = framework
        self.cfg = cfg

    def online(self, x):
        return self.projector(self.encoder(x))


def build_model(cfg: ModelConfig, seed: Optional[int] = None) -> ModelBundle:
    cfg.validate()
    if seed is not None:
        torch.manual_seed(seed)
    encoder = build_encoder(cfg)
    projector = build_projector(cfg, encoder.out_dim)
    predictor = build_predictor(cfg) if cfg.framework in ("simsiam", "byol") else None
    momentum = None
    if cfg.framework == "byol":
        momentum = nn.ModuleDict({
            "encoder": copy.deepcopy(encoder),
            "projector": copy.deepcopy(projector),
        })
        for p in momentum.parameters():
            p.requires_grad_(False)
    return ModelBundle(encoder, projector, predictor, momentum, cfg.framework, cfg)


def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    return x.detach()


def target(model: ModelBundle, view: torch.Tensor) -> torch.Tensor:
    """Framework-appropriate target embedding for a batch of views."""
    if model.framework == "simsiam":
        return stop_gradient(model.online(view))
    if model.framework == "byol":
        if model.momentum is None:
            raise RuntimeError("byol target requested before the momentum encoder exists")
        with torch.no_grad():
            return model.momentum["projector"](model.momentum["encoder"](view))
    return model.online(view)


@dataclass
class ViewFeatures:
    """Per-slot embeddings: ``z`` is the prediction side, ``y`` the target side."""

    z: dict
    y: dict
    edges: list
    framework: str


def forward_views(model: ModelBundle, views: dict, edges: list,
                  target_slots=None, slots=None) -> ViewFeatures:
    """Embed every slot in ``slots``; compute targets only for ``target_slots``.

    Defaults: all slots on the z-side and the standard (non-heavy) slots on
    the y-side. Each slot is a separate batched forward pass so that batch
    norm statistics never mix standard and heavy views.
    """
    slots = tuple(views) if slots is None else tuple(slots)
    if target_slots is None:
        target_slots = tuple(s for s in slots if "hat" not in s)
    shapes = {tuple(views[s].shape[1:]) for s in slots}
    if len(shapes) > 1:
        raise ValueError(f"views disagree in shape: {sorted(shapes)}")
    z, y = {}, {}
    for s in slots:
        p = model.online(views[s])
        z[s] = model.predictor(p) if model.predictor is not None else p
        if s in target_slots:
            if model.framework == "simsiam":
                y[s] = stop_gradient(p)
            elif model.framework == "simclr":
                y[s] = p
            else:
                y[s] = target(model, views[s])
    for s in target_slots:
        if s not in y:
            y[s] = target(model, views[s])
    return ViewFeatures(z, y, list(edges), model.framework)


@torch.no_grad()
def ema_update(model: ModelBundle, tau: float) -> None:
    """xi <- tau * xi + (1 - tau) * theta over the momentum copy."""
    if model.framework != "byol" or model.momentum is None:
        raise RuntimeError("ema_update requires a byol model with a momentum encoder")
    pairs = [(model.momentum["encoder"], model.encoder),
             (model.momentum["projector"], model.projector)]
    for shadow, online in pairs:
        sp, op = list(shadow.parameters()), list(online.parameters())
        if len(sp) != len(op) or any(a.shape != b.shape for a, b in zip(sp, op)):
            raise ValueError("momentum and online networks differ in architecture")
        for xi, theta in zip(sp, op):
            xi.mul_(tau).add_(theta * (1.0 - tau))
        for bs, bo in zip(shadow.buffers(), online.buffers()):
            bs.copy_(bo)


def momentum_at(step: int, total_steps: int, base_tau: float, schedule: str) -> float:
    if schedule == "constant" or total_steps <= 0:
        return base_tau
    return 1.0 - (1.0 - base_tau) * (math.cos(math.pi * step / total_steps) + 1.0) / 2.0


# ---------------------------------------------------------------------------
# checkpoints: one blob per component plus a JSON manifest

_COMPONENTS = ("encoder", "projector", "predictor", "momentum")


def save_checkpoint(path, model: ModelBundle, optimizer=None, **manifest) -> str:
    os.makedirs(path, exist_ok=True)
    for name in _COMPONENTS:
        module = getattr(model, name)
        if module is not None:
            torch.save(module.state_dict(), os.path.join(path, f"{name}.pt"))
    if optimizer is not None:
        torch.save(optimizer.state_dict(), os.path.join(path, "optimizer.pt"))
    manifest = {"framework": model.framework, "model": asdict(model.cfg), **manifest}
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def load_checkpoint(path):
    """Return ``(model, optimizer_state_or_None, manifest)``."""
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    model = build_model(ModelConfig(**manifest["model"]))
    for name in _COMPONENTS:
        blob = os.path.join(path, f"{name}.pt")
        module = getattr(model, name)
        if module is not None and os.path.exists(blob):
            module.load_state_dict(torch.load(blob, weights_only=True))
    opt_path = os.path.join(path, "optimizer.pt")
    opt_state = torch.load(opt_path, weights_only=True) if os.path.exists(opt_path) else None
    return model, opt_state, manifest


def state_hash(module: nn.Module) -> str:
    """Digest of every tensor in ``module.state_dict()`` (names and bytes)."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def checkpoint_hash(path) -> str:
    model, _, _ = load_checkpoint(path)
    return state_hash(model)
