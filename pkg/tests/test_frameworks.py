import copy

import pytest
import torch

from dssl.frameworks import (ModelConfig, build_model, checkpoint_hash, ema_update,
                             forward_views, load_checkpoint, momentum_at, save_checkpoint,
                             state_hash, stop_gradient, target)

SMALL = dict(width=4, proj_hidden=16, proj_dim=8, pred_hidden=4)


@pytest.mark.parametrize("fw", ["simsiam", "byol", "simclr"])
def test_build_and_forward(fw):
    m = build_model(ModelConfig(framework=fw, **SMALL), seed=0)
    x = torch.rand(4, 3, 16, 16)
    assert m.encoder(x).shape == (4, 32)
    assert m.online(x).shape == (4, 8)
    assert (m.predictor is None) == (fw == "simclr")
    assert (m.momentum is not None) == (fw == "byol")
    views = {"v": x, "v_prime": torch.rand(4, 3, 16, 16)}
    f = forward_views(m, views, [])
    assert set(f.z) == set(f.y) == {"v", "v_prime"}
    if fw in ("simsiam", "byol"):
        assert not f.y["v"].requires_grad
    else:
        assert f.y["v"].requires_grad


def test_invalid_model_config():
    with pytest.raises(ValueError, match="framework"):
        ModelConfig(framework="moco").validate()
    with pytest.raises(ValueError, match="momentum_tau"):
        ModelConfig(momentum_tau=1.5).validate()


def test_byol_target_without_momentum():
    m = build_model(ModelConfig(framework="byol", **SMALL), seed=0)
    m.momentum = None
    with pytest.raises(RuntimeError):
        target(m, torch.rand(2, 3, 8, 8))


def test_forward_views_rejects_mismatched_shapes():
    m = build_model(ModelConfig(**SMALL), seed=0)
    with pytest.raises(ValueError, match="shape"):
        forward_views(m, {"v": torch.rand(2, 3, 8, 8), "v_prime": torch.rand(2, 3, 9, 9)}, [])


def test_stop_gradient_blocks():
    w = torch.randn(3, requires_grad=True)
    (stop_gradient(w * 2).sum() + 0 * w.sum()).backward()
    assert torch.equal(w.grad, torch.zeros(3))


def test_ema_update_formula():
    m = build_model(ModelConfig(framework="byol", **SMALL), seed=0)
    with torch.no_grad():
        for p in m.encoder.parameters():
            p.add_(1.0)
    before = [p.clone() for p in m.momentum["encoder"].parameters()]
    ema_update(m, 0.9)
    for xi0, xi, th in zip(before, m.momentum["encoder"].parameters(), m.encoder.parameters()):
        assert torch.allclose(xi, 0.9 * xi0 + 0.1 * th, atol=1e-6)


def test_ema_update_rejects_wrong_models():
    with pytest.raises(RuntimeError):
        ema_update(build_model(ModelConfig(**SMALL)), 0.9)
    m = build_model(ModelConfig(framework="byol", **SMALL))
    m.momentum["encoder"] = copy.deepcopy(build_model(ModelConfig(framework="byol", **{**SMALL, "width": 5})).encoder)
    with pytest.raises(ValueError, match="architecture"):
        ema_update(m, 0.5)


def test_momentum_schedule():
    assert momentum_at(5, 10, 0.99, "constant") == 0.99
    assert momentum_at(0, 10, 0.99, "cosine") == pytest.approx(0.99)
    assert momentum_at(10, 10, 0.99, "cosine") == pytest.approx(1.0)


@pytest.mark.parametrize("fw", ["simsiam", "byol"])
def test_checkpoint_round_trip(tmp_path, fw):
    m = build_model(ModelConfig(framework=fw, **SMALL), seed=1)
    opt = torch.optim.SGD(m.parameters(), lr=0.1, momentum=0.9)
    path = save_checkpoint(str(tmp_path / "ck"), m, opt, epoch=3)
    m2, opt_state, manifest = load_checkpoint(path)
    assert manifest["epoch"] == 3 and manifest["framework"] == fw
    assert state_hash(m2) == state_hash(m) == checkpoint_hash(path)
    assert opt_state is not None
