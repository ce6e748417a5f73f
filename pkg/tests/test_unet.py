import numpy as np
import pytest
import torch
from torch import nn
from torch.nn import functional as F

from bwseg import unet
from bwseg.losses import LossConfig, composite_loss_logits
from bwseg.unet import (SegmentResult, TrainConfig, UNetConfig, build, largest_component, load_checkpoint,
                        param_count, save_checkpoint)
from bwseg.volgrid import LabelMap, Volume
from oracles import central_fd, max_rel_err

TINY = UNetConfig(levels=2, base_channels=2)


def _count(net):
    return sum(p.numel() for p in net.parameters())


@pytest.mark.parametrize("cfg", [TINY, UNetConfig(levels=3, base_channels=8), UNetConfig()])
def test_param_count_formula(cfg):
    assert param_count(cfg) == _count(unet.UNet(cfg))


def test_default_architecture_size():
    # five levels (four poolings), 16 base channels
    # frozen from an independent count of the torch module's parameters
    assert param_count(UNetConfig()) == 5_646_385
    assert param_count(UNetConfig(levels=3, base_channels=8)) == 85_177


def test_skip_shapes_and_dims():
    assert UNetConfig(levels=3).skip_shapes((16, 8, 24)) == [(16, 8, 24), (8, 4, 12), (4, 2, 6)]
    with pytest.raises(ValueError, match="divisible"):
        UNetConfig(levels=3).check_dims((10, 8, 8))
    with pytest.raises(ValueError):
        UNetConfig(levels=1)


def test_output_shape_and_probabilities():
    net = build(TINY, 0)
    p = unet.forward(net, np.random.default_rng(0).random((2, 4, 6, 8)))
    assert p.shape == (2, 4, 6, 8) and np.all((p > 0) & (p < 1))


def test_init_is_seeded_and_head_prior():
    a, b, c = build(TINY, 1), build(TINY, 1), build(TINY, 2)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert not all(torch.equal(sa[k], sc[k]) for k in sa)
    net = build(TINY, 0, head_prior=0.05)
    assert net.head.bias.item() == pytest.approx(np.log(0.05 / 0.95), rel=1e-6)
    z = build(TINY, 0, zero_head=True)
    assert np.all(unet.forward(z, np.ones((1, 4, 4, 4))) == 0.5)


def test_bn_momentum_convention():
    net = build(TINY, 0)
    bn = net.down[0][1]
    assert bn.momentum == pytest.approx(0.1)


# -- gradient checks in float64 ------------------------------------------------------

def _check_module(mod, x, n_checks=None):
    """Compare autograd input/parameter gradients of sum(w * mod(x)) with central differences."""
    mod = mod.double()
    rng = np.random.default_rng(0)
    with torch.no_grad():
        out_shape = mod(torch.from_numpy(x)).shape
    w = torch.from_numpy(rng.normal(size=out_shape))

    def f_np(xv):
        with torch.no_grad():
            return float((mod(torch.from_numpy(xv)) * w).sum())

    xt = torch.from_numpy(x.copy()).requires_grad_(True)
    (mod(xt) * w).sum().backward()
    assert max_rel_err(xt.grad.numpy(), central_fd(f_np, x.copy())) < 1e-3
    for name, prm in mod.named_parameters():
        analytic = prm.grad.numpy().copy()
        base = prm.detach().numpy().copy()

        def f_p(pv):
            with torch.no_grad():
                prm.copy_(torch.from_numpy(pv))
                val = float((mod(torch.from_numpy(x)) * w).sum())
                prm.copy_(torch.from_numpy(base))
                return val

        assert max_rel_err(analytic, central_fd(f_p, base.copy())) < 1e-3, name


class _Lambda(nn.Module):
    def __init__(self, fn):
        super().__init__()
        self.fn = fn

    def forward(self, x):
        return self.fn(x)


LAYERS = {
    "conv3d": lambda: nn.Conv3d(2, 3, 3, padding=1, bias=False),
    "batchnorm3d": lambda: nn.BatchNorm3d(2).train(),
    "relu": lambda: nn.ReLU(),
    "maxpool": lambda: _Lambda(lambda x: F.max_pool3d(x, 2)),
    "convtranspose3d": lambda: nn.ConvTranspose3d(2, 3, 2, stride=2),
    "concat": lambda: _Lambda(lambda x: torch.cat([x, 2 * x[:, :1]], dim=1)),
    "head_conv1x1": lambda: nn.Conv3d(2, 1, 1),
}


@pytest.mark.parametrize("kind", sorted(LAYERS))
def test_layer_gradients(kind):
    torch.manual_seed(0)
    x = np.random.default_rng(1).normal(size=(2, 2, 4, 4, 4))
    if kind == "batchnorm3d":
        with torch.no_grad():
            m = LAYERS[kind]()
            m.weight.uniform_(0.5, 1.5)
            m.bias.uniform_(-1, 1)
        _check_module(m, x)
    else:
        _check_module(LAYERS[kind](), x)


def _net_loss(net, x, y, cfg):
    net.train(True)
    with torch.no_grad():
        z = net(unet._as_batch(x, net)).numpy()
    return float(np.mean([composite_loss_logits(z[b], y[b], cfg).value for b in range(len(z))]))


@pytest.mark.parametrize("loss", ["bw-ce", "bw-focal+dice"])
def test_full_network_gradient(loss):
    cfg = LossConfig.from_name(loss, K=3)
    net = build(TINY, 3, dtype=torch.float64)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 4, 4, 4))
    y = (rng.random((2, 4, 4, 4)) < 0.4).astype(float)
    y[:, 0, 0, 0] = 1
    unet.backward(net, x, y, cfg)
    params = dict(net.named_parameters())
    for name in ["down.0.0.weight", "down.0.1.weight", "down.1.3.weight", "up.0.weight", "up.0.bias",
                 "dec.0.4.bias", "head.weight", "head.bias"]:
        prm = params[name]
        analytic = prm.grad.numpy().ravel()
        base = prm.detach().numpy().copy()
        flat = base.ravel()
        idx = rng.choice(flat.size, size=min(6, flat.size), replace=False)
        num = []
        for i in idx:
            vals = []
            for d in (1e-6, -1e-6):
                pert = flat.copy()
                pert[i] += d
                with torch.no_grad():
                    prm.copy_(torch.from_numpy(pert.reshape(base.shape)))
                vals.append(_net_loss(net, x, y, cfg))
            num.append((vals[0] - vals[1]) / 2e-6)
        with torch.no_grad():
            prm.copy_(torch.from_numpy(base))
        assert max_rel_err(analytic[idx], num) < 1e-3, name


# -- inference helpers -----------------------------------------------------------

def test_largest_component_26_connected():
    m = np.zeros((6, 6, 6), bool)
    m[0, 0, 0] = m[1, 1, 1] = True  # diagonal neighbours: one component
    m[4:6, 4:6, 4] = True  # 4 voxels
    out = largest_component(m)
    assert out.sum() == 4
    m[2, 2, 2] = True
    assert largest_component(m).sum() == 4
    assert not largest_component(np.zeros((2, 2, 2), bool)).any()


def test_segment_maps_back_to_input_grid():
    net = build(TINY, 0, head_prior=0.9)
    v = Volume(np.random.default_rng(0).random((5, 7, 3)) + 1)
    res = unet.segment(net, v, (8, 8, 4))
    assert isinstance(res, SegmentResult) and res.label.dims == (5, 7, 3)
    assert res.empty == (res.label.count() == 0)


def test_checkpoint_roundtrip(tmp_path):
    net = build(UNetConfig(levels=3, base_channels=4), 5)
    unet.backward(net, np.random.default_rng(0).random((1, 8, 8, 8)),
                  np.ones((1, 8, 8, 8)), LossConfig.from_name("ce"))  # moves BN running stats
    save_checkpoint(tmp_path / "m.ckpt", net, (8, 8, 8), [{"epoch": 0}], {"note": 1})
    back, header = load_checkpoint(tmp_path / "m.ckpt")
    assert header["input_dims"] == [8, 8, 8] and header["extra"] == {"note": 1}
    x = np.random.default_rng(1).random((1, 8, 8, 8))
    assert np.array_equal(unet.forward(net, x), unet.forward(back, x))
    blob = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(blob[:-4])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "bad2.ckpt").write_bytes(b"nope" + blob[4:])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad2.ckpt")


def test_train_config_roundtrip_and_validation():
    cfg = TrainConfig(input_dims=(32, 32, 32), unet=UNetConfig(levels=3), loss=LossConfig.from_name("bw-ce+dice"))
    back = TrainConfig.from_dict(cfg.to_dict())
    assert back.to_dict() == cfg.to_dict()
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ValueError):
        TrainConfig(input_dims=(30, 32, 32))


def test_short_training_is_deterministic():
    from bwseg.phantom import PhantomConfig, make_phantom_series

    s = make_phantom_series(PhantomConfig(dims=(24, 24, 16), semi_axes=(5, 4, 2), edge_margin=2, T=2,
                                          phase_bounds=(1, 2)))
    cfg = TrainConfig(learning_rate=3e-3, epochs=3, batch_size=2, unet=UNetConfig(levels=2, base_channels=2),
                      input_dims=(24, 24, 16), head_prior=0.05)
    n1, h1 = unet.train([s], [s], cfg)
    n2, h2 = unet.train([s], [s], cfg)
    assert h1 == h2
    assert all(torch.equal(a, b) for a, b in zip(n1.state_dict().values(), n2.state_dict().values()))
    assert len(h1) == 3 and "val_dice" in h1[-1]


def test_bottleneck_dims():
    assert UNetConfig(levels=3).skip_shapes((16, 16, 16))[-1] == (4, 4, 4)


def test_full_size_output_shape():
    net = build(UNetConfig(), 0)
    p = unet.forward(net, np.zeros((1, 112, 112, 80), np.float32))
    assert p.shape == (1, 112, 112, 80)


def test_translation_equivariance_interior():
    cfg = UNetConfig(levels=2, base_channels=2)
    net = build(cfg, 1)
    x = np.random.default_rng(0).random((1, 32, 32, 32))
    a = unet.forward_logits(net, x)
    b = unet.forward_logits(net, np.roll(x, 2, axis=1))
    # the receptive-field radius of a 2-level net is 10 voxels, so the centre
    # never sees the wrapped edge or the zero padding
    c = slice(12, 20)
    assert np.allclose(np.roll(a, 2, axis=1)[:, c, c, c], b[:, c, c, c], atol=1e-5)


def test_duplicated_sample_gradient_equals_single():
    net = build(TINY, 2, dtype=torch.float64)
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(1, 4, 4, 4)), (rng.random((1, 4, 4, 4)) < 0.5).astype(float)
    cfg = LossConfig.from_name("ce")
    unet.backward(net, x, y, cfg)
    g1 = [p.grad.clone() for p in net.parameters()]
    unet.backward(net, np.concatenate([x, x]), np.concatenate([y, y]), cfg)
    for a, b in zip(g1, (p.grad for p in net.parameters())):
        assert torch.allclose(a, b, rtol=1e-10, atol=1e-13)


def test_saturated_correct_predictions_have_tiny_gradient():
    y = np.zeros((4, 4, 4))
    y[1:3] = 1
    z = np.where(y > 0, 30.0, -30.0)
    for name in ("ce", "focal", "bw-ce"):
        g = composite_loss_logits(z, y, LossConfig.from_name(name, K=3)).grad
        assert np.linalg.norm(g) < 1e-6


def test_postprocess_cases():
    assert not unet.postprocess(np.full((4, 4, 4), 0.4)).any()
    p = np.zeros((20, 20, 20))
    p[1:6, 1:6, 1:5] = 0.9  # 100 voxels
    p[15:16, 15:20, 15:16] = 0.9  # 5 voxels
    out = unet.postprocess(p)
    assert out.sum() == 100 and not out[15:, 15:, 15:].any()
    assert np.array_equal(unet.postprocess(out.astype(float)), out)


def test_each_subject_contributes_one_sample_per_epoch(monkeypatch):
    from bwseg.augment import AugmentConfig
    from bwseg.phantom import PhantomConfig, make_phantom_series

    calls = []
    real = unet.augment_sample

    def counting(v, y, cfg, rng):
        calls.append(1)
        return real(v, y, cfg, rng)

    monkeypatch.setattr(unet, "augment_sample", counting)
    pc = PhantomConfig(dims=(24, 24, 16), semi_axes=(5, 4, 2), edge_margin=2, T=8, phase_bounds=(2, 6))
    many = make_phantom_series(pc, label_frames=range(6), subject_id="many")
    one = make_phantom_series(pc, label_frames=[0], subject_id="one")
    cfg = TrainConfig(epochs=3, batch_size=2, unet=UNetConfig(levels=2, base_channels=2),
                      input_dims=(24, 24, 16), augment=AugmentConfig.disabled())
    unet.train([many, one], [], cfg)
    assert len(calls) == 6


def test_training_rejects_unlabeled_series():
    from bwseg.phantom import PhantomConfig, make_phantom_series

    s = make_phantom_series(PhantomConfig(T=2, phase_bounds=(1, 2)), label_frames=[])
    with pytest.raises(ValueError, match="no labeled"):
        unet.train([s], [], TrainConfig(epochs=1, unet=UNetConfig(levels=2, base_channels=2),
                                        input_dims=(40, 40, 24)))
