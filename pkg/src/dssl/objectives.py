"""Symmetric, directional and generalized four-weight objectives.

Conventions
-----------
``sym_loss`` and ``asym_loss`` return *unnormalized* sums of their two
terms. ``dssl_loss`` and ``general_loss`` divide by the number of active
terms, so the DSSL point (1, 0, 1, 0) averages its four terms:

    (D(z, y') + D(z', y) + D(z_hat, y) + D(z_hat', y')) / 4
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

from .frameworks import ViewFeatures
from .views import DIRECTED, HEAVY_SLOTS, SYMMETRIC

SIMILARITY_KINDS = ("neg_cosine", "nt_xent", "normalized_mse")
FRAMEWORK_SIMILARITY = {"simsiam": "neg_cosine", "byol": "normalized_mse", "simclr": "nt_xent"}


class ZeroNormError(ValueError):
    """An embedding with zero l2 norm reached a cosine similarity."""


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.0
    gamma: float = 1.0
    delta: float = 0.0

    def validate(self):
        for name in ("alpha", "beta", "gamma", "delta"):
            w = getattr(self, name)
            if not math.isfinite(w) or w < 0:
                raise ValueError(f"{name}: weight must be finite and >= 0, got {w}")
        if not any((self.alpha, self.beta, self.gamma, self.delta)):
            raise ValueError("loss weights: at least one weight must be positive")
        return self

    def as_tuple(self):
        return (self.alpha, self.beta, self.gamma, self.delta)


DSSL_WEIGHTS = LossWeights(1.0, 0.0, 1.0, 0.0)
FAIR_WEIGHTS = LossWeights(1.0, 1.0, 1.0, 1.0)


@dataclass(frozen=True)
class SimilarityObjective:
    kind: str = "neg_cosine"
    temperature: float = 0.5

    def validate(self):
        if self.kind not in SIMILARITY_KINDS:
            raise ValueError(f"similarity: unknown kind {self.kind!r}")
        if self.kind == "nt_xent" and not self.temperature > 0:
            raise ValueError("temperature: must be > 0 for nt_xent")
        return self


def neg_cosine(z: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """-<z, y> / (|z| |y|), averaged over rows for batched input."""
    if z.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(z.shape)} vs {tuple(y.shape)}")
    nz = z.norm(dim=-1, keepdim=True)
    ny = y.norm(dim=-1, keepdim=True)
    if bool((nz == 0).any()) or bool((ny == 0).any()):
        raise ZeroNormError("zero-norm embedding in cosine similarity (collapse symptom)")
    return -((z / nz) * (y / ny)).sum(dim=-1).mean()


def normalized_mse(z, y):
    """Mean squared error between l2-normalized vectors, i.e. 2 + 2 * cos term."""
    return 2.0 + 2.0 * neg_cosine(z, y)


def _nt_xent_halves(za, zb, temperature, stats=None):
    """Directional NT-Xent halves (anchors in ``za``, anchors in ``zb``).

    Each anchor is scored against the n candidates of the other view set
    (one positive) and the n - 1 other members of its own set.
    """
    n = za.shape[0]
    if n < 2:
        raise ValueError("nt_xent needs a batch of at least 2 instances (no negatives)")
    a = F.normalize(za, dim=1)
    b = F.normalize(zb, dim=1)
    self_mask = torch.eye(n, dtype=torch.bool, device=za.device)
    logits_ab = a @ b.T / temperature
    logits_ba = b @ a.T / temperature
    logits_aa = (a @ a.T / temperature).masked_fill(self_mask, float("-inf"))
    logits_bb = (b @ b.T / temperature).masked_fill(self_mask, float("-inf"))
    labels = torch.arange(n, device=za.device)
    half_a = F.cross_entropy(torch.cat([logits_ab, logits_aa], dim=1), labels)
    half_b = F.cross_entropy(torch.cat([logits_ba, logits_bb], dim=1), labels)
    if stats is not None:
        stats["cross_view_terms"] = stats.get("cross_view_terms", 0) + logits_ab.numel() + logits_ba.numel()
    return half_a, half_b


def nt_xent(za: torch.Tensor, zb: torch.Tensor, temperature: float = 0.5,
            heavy: Optional[tuple] = None, asym_form: str = "cosine",
            stats: Optional[dict] = None) -> torch.Tensor:
    """NT-Xent over 2n standard views, with an optional directional extension.

    ``heavy = (h_a, h_b)`` holds one heavy embedding per standard view; row i
    of ``h_a`` was derived from row i of ``za``. Each heavy embedding is
    pulled toward its parent only; heavy views are never negatives or targets.
    ``stats`` (if given) accumulates ``cross_view_terms`` (2n^2) and
    ``heavy_terms`` (2n with the extension).
    """
    half_a, half_b = _nt_xent_halves(za, zb, temperature, stats)
    loss = (half_a + half_b) / 2
    if heavy is None:
        return loss
    h_a, h_b = heavy
    if asym_form == "cosine":
        asym = (neg_cosine(h_a, za) + neg_cosine(h_b, zb)) / 2
    elif asym_form == "softmax":
        asym = (_parent_softmax(h_a, za, zb, temperature, 0)
                + _parent_softmax(h_b, za, zb, temperature, 1)) / 2
    else:
        raise ValueError(f"asym_form: expected cosine|softmax, got {asym_form!r}")
    if stats is not None:
        stats["heavy_terms"] = stats.get("heavy_terms", 0) + h_a.shape[0] + h_b.shape[0]
    return loss + asym


def _parent_softmax(h, za, zb, temperature, side):
    n = h.shape[0]
    q = F.normalize(h, dim=1)
    cands = F.normalize(torch.cat([za, zb]), dim=1)
    logits = q @ cands.T / temperature
    labels = torch.arange(n, device=h.device) + side * n
    return F.cross_entropy(logits, labels)


def nt_xent_similarity_count(n: int, heavy_extension: bool) -> int:
    """Similarity terms per mini-batch: 2n^2 cross-view, plus 2n parent terms."""
    return 2 * n * n + (2 * n if heavy_extension else 0)


# ---------------------------------------------------------------------------
# view-set objectives


def _pair_terms(features: ViewFeatures, a: str, b: str, S: SimilarityObjective):
    z, y = features.z, features.y
    for slot in (a, b):
        if slot not in z or slot not in y:
            raise KeyError(f"view {slot!r} missing from features")
    if S.kind == "nt_xent":
        return _nt_xent_halves(z[a], z[b], S.temperature)
    if S.kind == "normalized_mse":
        return normalized_mse(z[a], y[b]), normalized_mse(z[b], y[a])
    return neg_cosine(z[a], y[b]), neg_cosine(z[b], y[a])


def sym_loss(features: ViewFeatures, S: SimilarityObjective = SimilarityObjective(),
             pair=("v", "v_prime")) -> torch.Tensor:
    """S(z, y(v')) + S(z', y(v)) for one symmetric pair."""
    t1, t2 = _pair_terms(features, pair[0], pair[1], S)
    return t1 + t2


def directed_edges(features: ViewFeatures):
    edges = [(e.src, e.dst) for e in features.edges if e.kind == DIRECTED]
    linked = {src for src, _ in edges}
    orphans = [s for s in features.z if s in HEAVY_SLOTS and s not in linked]
    if orphans:
        raise ValueError(f"heavy views without a parent edge: {orphans}")
    return edges


def asym_loss(features: ViewFeatures) -> torch.Tensor:
    """D(z_hat, y(v)) + D(z_hat', y(v')): each heavy view toward its own parent."""
    edges = directed_edges(features)
    if not edges:
        raise ValueError("asym_loss needs heavy views with recorded parents")
    return sum(neg_cosine(features.z[h], features.y[p]) for h, p in edges)


def dssl_loss(features: ViewFeatures, S: SimilarityObjective = SimilarityObjective()) -> torch.Tensor:
    return (sym_loss(features, S) + asym_loss(features)) / 4


@dataclass
class LossBreakdown:
    total: torch.Tensor
    terms: dict
    n_terms: int

    def as_floats(self):
        out = {"loss": float(self.total.detach())}
        out.update({k: float(v.detach()) for k, v in self.terms.items()})
        return out


TERM_NAMES = ("sym_standard", "sym_heavy", "asym_heavy_to_standard", "asym_standard_to_heavy")


def general_loss(features: ViewFeatures, weights: LossWeights,
                 S: SimilarityObjective = SimilarityObjective()) -> LossBreakdown:
    """alpha*sum L_S(V_T) + beta*sum L_S(V_That) + gamma*sum L_A(T<-That) + delta*sum L_A(That<-T).

    Normalized by the number of active terms. Heavy-heavy symmetric pairs
    are the two heavy views of one view set; the reverse directional terms
    pull each standard embedding toward its heavy child's target.
    """
    weights.validate()
    std_pairs = [(e.src, e.dst) for e in features.edges
                 if e.kind == SYMMETRIC and e.src not in HEAVY_SLOTS]
    heavy_slots = [s for s in HEAVY_SLOTS if s in features.z]
    heavy_pairs = [tuple(heavy_slots)] if len(heavy_slots) == 2 else []
    w = weights.as_tuple()
    edges = directed_edges(features) if (w[2] or w[3]) else []

    terms, counts = {}, {}
    if w[0]:
        if not std_pairs:
            raise ValueError("alpha > 0 but no standard view pairs are present")
        terms["sym_standard"] = sum(sym_loss(features, S, p) for p in std_pairs)
        counts["sym_standard"] = 2 * len(std_pairs)
    if w[1]:
        if not heavy_pairs:
            raise ValueError("beta > 0 but the view set has no heavy pair")
        terms["sym_heavy"] = sum(sym_loss(features, S, p) for p in heavy_pairs)
        counts["sym_heavy"] = 2 * len(heavy_pairs)
    if w[2]:
        if not edges:
            raise ValueError("gamma > 0 but no directed heavy->standard pairs exist")
        terms["asym_heavy_to_standard"] = sum(
            neg_cosine(features.z[h], features.y[p]) for h, p in edges)
        counts["asym_heavy_to_standard"] = len(edges)
    if w[3]:
        if not edges:
            raise ValueError("delta > 0 but no directed pairs exist")
        terms["asym_standard_to_heavy"] = sum(
            neg_cosine(features.z[p], features.y[h]) for h, p in edges)
        counts["asym_standard_to_heavy"] = len(edges)

    weight_of = dict(zip(TERM_NAMES, w))
    total = sum(weight_of[k] * v for k, v in terms.items())
    n_terms = sum(counts.values())
    return LossBreakdown(total / n_terms, terms, n_terms)


def required_slots(weights: LossWeights, mode: str):
    """(z-side slots, y-side slots) a training step needs for these weights."""
    from .views import HEAVY_PARENT

    if mode == "baseline_2pairs":
        return ("v", "v_prime", "v2", "v2_prime"), ("v", "v_prime", "v2", "v2_prime")
    if mode != "dssl":
        return ("v", "v_prime"), ("v", "v_prime")
    z, y = set(), set()
    if weights.alpha:
        z |= {"v", "v_prime"}
        y |= {"v", "v_prime"}
    if weights.beta:
        z |= set(HEAVY_PARENT)
        y |= set(HEAVY_PARENT)
    if weights.gamma:
        z |= set(HEAVY_PARENT)
        y |= set(HEAVY_PARENT.values())
    if weights.delta:
        z |= set(HEAVY_PARENT.values())
        y |= set(HEAVY_PARENT)
    order = ("v", "v_prime", "v_hat", "v_hat_prime")
    return tuple(s for s in order if s in z), tuple(s for s in order if s in y)
