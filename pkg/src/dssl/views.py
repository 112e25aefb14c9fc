"""Partially-ordered view sets for one training image.

Standard views are linked by symmetric edges; each heavy view is derived
from one standard parent and linked to it by a directed edge that points
heavy -> standard (the heavy embedding is pulled toward the parent's
target, never the other way round).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .augment import (HeavyAugmentConfig, ImageSample, StandardAugmentConfig,
                      apply_heavy, apply_standard, resize)

VIEW_MODES = ("dssl", "baseline_2pairs", "baseline_joint", "baseline_1pair")
HEAVY_SOURCES = ("standard", "raw", "independent")
STANDARD_SLOTS = ("v", "v_prime", "v2", "v2_prime")
HEAVY_SLOTS = ("v_hat", "v_hat_prime")
HEAVY_PARENT = {"v_hat": "v", "v_hat_prime": "v_prime"}

SYMMETRIC = "symmetric"
DIRECTED = "directed"


class ViewSetError(ValueError):
    pass


@dataclass(frozen=True)
class Edge:
    """``src`` and ``dst`` are slot names; directed edges run heavy -> standard."""

    src: str
    dst: str
    kind: str


@dataclass(frozen=True)
class ViewConfig:
    standard: StandardAugmentConfig = field(default_factory=StandardAugmentConfig)
    heavy: HeavyAugmentConfig = field(default_factory=HeavyAugmentConfig)
    heavy_source: str = "standard"

    def validate(self):
        if self.heavy_source not in HEAVY_SOURCES:
            raise ViewSetError(
                f"heavy_source: expected one of {HEAVY_SOURCES}, got {self.heavy_source!r}")
        self.standard.validate()
        self.heavy.validate()
        return self


@dataclass
class ViewSet:
    views: dict
    edges: list
    source_id: int
    mode: str
    policy_trace: dict = field(default_factory=dict)

    @property
    def v(self):
        return self.views["v"]

    @property
    def v_prime(self):
        return self.views["v_prime"]

    @property
    def v_hat(self):
        return self.views.get("v_hat")

    @property
    def v_hat_prime(self):
        return self.views.get("v_hat_prime")

    @property
    def slots(self):
        return tuple(self.views)

    def parent(self, slot):
        for e in self.edges:
            if e.kind == DIRECTED and e.src == slot:
                return e.dst
        return None

    def check(self):
        """Raise ``ViewSetError`` if the edge discipline is violated."""
        heavy = [s for s in self.views if s in HEAVY_SLOTS]
        for e in self.edges:
            if e.src not in self.views or e.dst not in self.views:
                raise ViewSetError(f"edge {e} references a missing view")
            if e.kind == SYMMETRIC and (e.src in HEAVY_SLOTS or e.dst in HEAVY_SLOTS):
                raise ViewSetError(f"symmetric edge {e} touches a heavy view")
            if e.kind == DIRECTED and not (e.src in HEAVY_SLOTS and e.dst in STANDARD_SLOTS):
                raise ViewSetError(f"directed edge {e} must point heavy -> standard")
        for s in heavy:
            parents = [e.dst for e in self.edges if e.kind == DIRECTED and e.src == s]
            if len(parents) != 1:
                raise ViewSetError(f"heavy view {s} has {len(parents)} parents, expected 1")
        if self.mode == "dssl" and len(heavy) != 2:
            raise ViewSetError("dssl view sets carry exactly two heavy views")
        return self


def _child(rng):
    seed = int(rng.integers(0, 2**63 - 1))
    return seed, np.random.default_rng(seed)


def _standard_view(image, cfg, rng):
    seed, child = _child(rng)
    ops = []
    view = apply_standard(image, cfg, child, trace=ops)
    return view, {"stage": "standard", "seed": seed, "ops": ops}


def make_standard_pair(image: ImageSample, std_cfg: StandardAugmentConfig, rng):
    """Two independent draws of the standard pipeline on the same image."""
    v, _ = _standard_view(image, std_cfg, rng)
    v_prime, _ = _standard_view(image, std_cfg, rng)
    return v, v_prime


def derive_heavy(v: ImageSample, heavy_cfg: HeavyAugmentConfig, rng):
    """Apply a heavy policy to the standard view ``v``.

    Returns the heavy view and its provenance record; replaying
    ``apply_heavy(v, heavy_cfg, default_rng(record["seed"]))`` reproduces it.
    """
    seed, child = _child(rng)
    ops = []
    v_hat, policy = apply_heavy(v, heavy_cfg, child, trace=ops)
    return v_hat, {"stage": "heavy", "seed": seed, "policy": policy, "ops": ops}


def _heavy_from(image, parent_slot, views, cfg, rng):
    parent = views[parent_slot]
    if cfg.heavy_source == "standard":
        base, source = parent, "standard"
    elif cfg.heavy_source == "raw":
        size = cfg.standard.crop_size
        base = image.with_pixels(resize(image.pixels, size, size))
        source = "raw"
    else:
        base, _ = _standard_view(image, cfg.standard, rng)
        source = "independent"
    v_hat, rec = derive_heavy(base, cfg.heavy, rng)
    rec["parent"] = parent_slot
    rec["source"] = source
    return v_hat, rec


def build_training_views(image: ImageSample, mode: str, cfg: ViewConfig, rng) -> ViewSet:
    if mode not in VIEW_MODES:
        raise ViewSetError(f"unknown view mode {mode!r} (expected one of {VIEW_MODES})")
    views, traces, edges = {}, {}, []

    def standard(slot):
        views[slot], traces[slot] = _standard_view(image, cfg.standard, rng)

    standard("v")
    standard("v_prime")
    edges.append(Edge("v", "v_prime", SYMMETRIC))
    if mode == "baseline_2pairs":
        standard("v2")
        standard("v2_prime")
        edges.append(Edge("v2", "v2_prime", SYMMETRIC))
    elif mode == "dssl":
        for slot, parent in HEAVY_PARENT.items():
            views[slot], traces[slot] = _heavy_from(image, parent, views, cfg, rng)
            edges.append(Edge(slot, parent, DIRECTED))
    elif mode == "baseline_joint":
        # views come from the composition heavy(standard(I)); both stay
        # symmetric partners, so no partial order is recorded
        for slot in ("v", "v_prime"):
            views[slot], heavy_rec = derive_heavy(views[slot], cfg.heavy, rng)
            traces[slot] = {**traces[slot], "heavy": heavy_rec}
    return ViewSet(views, edges, image.id, mode, traces)


def replay_heavy(vs: ViewSet, slot: str, heavy_cfg: HeavyAugmentConfig) -> ImageSample:
    """Recompute a heavy view from its recorded parent and seed."""
    rec = vs.policy_trace[slot]
    parent = vs.views[rec["parent"]]
    out, _ = apply_heavy(parent, heavy_cfg, np.random.default_rng(rec["seed"]))
    return out
