import itertools
import math

import pytest
import torch
import torch.nn.functional as F

from dssl.frameworks import ViewFeatures
from dssl.objectives import (DSSL_WEIGHTS, FAIR_WEIGHTS, LossWeights, SimilarityObjective,
                             ZeroNormError, asym_loss, dssl_loss, general_loss, neg_cosine,
                             normalized_mse, nt_xent, nt_xent_similarity_count, required_slots,
                             sym_loss)
from dssl.views import DIRECTED, SYMMETRIC, Edge

DSSL_EDGES = [Edge("v", "v_prime", SYMMETRIC), Edge("v_hat", "v", DIRECTED),
              Edge("v_hat_prime", "v_prime", DIRECTED)]
SLOTS = ("v", "v_prime", "v_hat", "v_hat_prime")


def features(seed=0, n=6, d=5, edges=DSSL_EDGES):
    g = torch.Generator().manual_seed(seed)
    z = {s: torch.randn(n, d, generator=g, dtype=torch.float64) for s in SLOTS}
    y = {s: torch.randn(n, d, generator=g, dtype=torch.float64) for s in SLOTS}
    return ViewFeatures(z, y, edges, "simsiam")


def test_neg_cosine_values():
    a = torch.tensor([[1.0, 0.0], [0.0, 2.0]])
    assert float(neg_cosine(a, a)) == -1.0
    assert float(neg_cosine(a, -a)) == 1.0
    assert abs(float(neg_cosine(a, torch.tensor([[0.0, 1.0], [3.0, 0.0]])))) < 1e-7


def test_neg_cosine_errors():
    with pytest.raises(ZeroNormError):
        neg_cosine(torch.zeros(2, 3), torch.ones(2, 3))
    with pytest.raises(ValueError, match="shape"):
        neg_cosine(torch.ones(2, 3), torch.ones(2, 4))


def test_normalized_mse_matches_definition():
    f = features(1)
    z, y = f.z["v"], f.y["v"]
    direct = ((F.normalize(z, dim=1) - F.normalize(y, dim=1)) ** 2).sum(1).mean()
    assert torch.allclose(normalized_mse(z, y), direct, atol=1e-12)


def test_dssl_loss_is_four_term_average():
    f = features(2)
    D = neg_cosine
    ref = (D(f.z["v"], f.y["v_prime"]) + D(f.z["v_prime"], f.y["v"])
           + D(f.z["v_hat"], f.y["v"]) + D(f.z["v_hat_prime"], f.y["v_prime"])) / 4
    assert torch.allclose(dssl_loss(f), ref, atol=1e-12)
    assert torch.allclose(general_loss(f, DSSL_WEIGHTS).total, ref, atol=1e-12)
    assert general_loss(f, DSSL_WEIGHTS).n_terms == 4


def test_sym_and_asym_are_unnormalized():
    f = features(3)
    D = neg_cosine
    assert torch.allclose(sym_loss(f), D(f.z["v"], f.y["v_prime"]) + D(f.z["v_prime"], f.y["v"]))
    assert torch.allclose(asym_loss(f), D(f.z["v_hat"], f.y["v"]) + D(f.z["v_hat_prime"], f.y["v_prime"]))


def test_general_loss_all_terms():
    f = features(4)
    D = neg_cosine
    sym_s = D(f.z["v"], f.y["v_prime"]) + D(f.z["v_prime"], f.y["v"])
    sym_h = D(f.z["v_hat"], f.y["v_hat_prime"]) + D(f.z["v_hat_prime"], f.y["v_hat"])
    a_ht = D(f.z["v_hat"], f.y["v"]) + D(f.z["v_hat_prime"], f.y["v_prime"])
    a_th = D(f.z["v"], f.y["v_hat"]) + D(f.z["v_prime"], f.y["v_hat_prime"])
    w = LossWeights(0.5, 2.0, 1.5, 0.25)
    out = general_loss(f, w)
    ref = (0.5 * sym_s + 2.0 * sym_h + 1.5 * a_ht + 0.25 * a_th) / 8
    assert out.n_terms == 8
    assert torch.allclose(out.total, ref, atol=1e-12)
    assert set(out.terms) == {"sym_standard", "sym_heavy", "asym_heavy_to_standard",
                              "asym_standard_to_heavy"}
    assert general_loss(f, FAIR_WEIGHTS).n_terms == 8


def test_general_loss_missing_collections():
    one_pair = [Edge("v", "v_prime", SYMMETRIC)]
    g = torch.Generator().manual_seed(0)
    z = {s: torch.randn(4, 3, generator=g) for s in ("v", "v_prime")}
    f = ViewFeatures(z, dict(z), one_pair, "simsiam")
    with pytest.raises(ValueError, match="gamma"):
        general_loss(f, DSSL_WEIGHTS)
    with pytest.raises(ValueError, match="beta"):
        general_loss(f, LossWeights(1, 1, 0, 0))
    assert general_loss(f, LossWeights(1, 0, 0, 0)).n_terms == 2


def test_orphan_heavy_view_rejected():
    f = features(5, edges=[Edge("v", "v_prime", SYMMETRIC), Edge("v_hat", "v", DIRECTED)])
    with pytest.raises(ValueError, match="parent"):
        general_loss(f, DSSL_WEIGHTS)


@pytest.mark.parametrize("w", [(-1, 0, 1, 0), (0, 0, 0, 0), (1, math.nan, 0, 0)])
def test_weight_validation(w):
    with pytest.raises(ValueError):
        LossWeights(*w).validate()


def test_required_slots():
    assert required_slots(DSSL_WEIGHTS, "dssl") == (SLOTS, ("v", "v_prime"))
    assert required_slots(LossWeights(0, 1, 0, 0), "dssl") == (
        ("v_hat", "v_hat_prime"), ("v_hat", "v_hat_prime"))
    assert required_slots(LossWeights(1, 0, 0, 0), "baseline_1pair") == (
        ("v", "v_prime"), ("v", "v_prime"))


# ---------------------------------------------------------------------------
# NT-Xent


def brute_nt_xent(a, b, t):
    """Enumerate every anchor's softmax over its 2n - 1 candidates."""
    n = a.shape[0]
    allz = F.normalize(torch.cat([a, b]), dim=1)
    total = 0.0
    for i in range(2 * n):
        pos = (i + n) % (2 * n)
        num = math.exp(float(allz[i] @ allz[pos]) / t)
        den = sum(math.exp(float(allz[i] @ allz[j]) / t) for j in range(2 * n) if j != i)
        total += -math.log(num / den)
    return total / (2 * n)


@pytest.mark.parametrize("n,t", [(2, 0.5), (5, 0.2)])
def test_nt_xent_brute_force(n, t):
    g = torch.Generator().manual_seed(n)
    a, b = torch.randn(n, 7, generator=g, dtype=torch.float64), torch.randn(n, 7, generator=g, dtype=torch.float64)
    assert abs(float(nt_xent(a, b, t)) - brute_nt_xent(a, b, t)) < 1e-9


def test_nt_xent_heavy_extension_and_counts():
    n = 4
    g = torch.Generator().manual_seed(0)
    a, b, ha, hb = (torch.randn(n, 6, generator=g, dtype=torch.float64) for _ in range(4))
    stats = {}
    with_heavy = nt_xent(a, b, 0.5, heavy=(ha, hb), stats=stats)
    base = nt_xent(a, b, 0.5)
    assert torch.allclose(with_heavy - base, (neg_cosine(ha, a) + neg_cosine(hb, b)) / 2)
    assert stats["cross_view_terms"] + stats["heavy_terms"] == nt_xent_similarity_count(n, True)
    assert nt_xent_similarity_count(n, False) == 2 * n * n
    soft = nt_xent(a, b, 0.5, heavy=(ha, hb), asym_form="softmax")
    assert torch.isfinite(soft)
    with pytest.raises(ValueError):
        nt_xent(a, b, 0.5, heavy=(ha, hb), asym_form="hinge")


def test_nt_xent_needs_negatives():
    with pytest.raises(ValueError, match="at least 2"):
        nt_xent(torch.randn(1, 3), torch.randn(1, 3))


def test_nt_xent_in_general_loss():
    f = features(6)
    S = SimilarityObjective("nt_xent", 0.5)
    out = general_loss(f, LossWeights(1, 0, 0, 0), S)
    ref = nt_xent(f.z["v"], f.z["v_prime"], 0.5)
    assert torch.allclose(out.total, ref, atol=1e-12)
