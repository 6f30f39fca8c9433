import numpy as np
import pytest

from mdsnet import nn
from mdsnet.gradcheck import max_relative_error, numerical_gradient
from mdsnet.loss import LossWeights, loss_gradient, stack_loss
from mdsnet.training import overfit
from mdsnet.unet import StackUNet, UNetConfig
from mdsnet.volume import generate_phantom


def tiny(k=3, depth=2, extents=(16, 16), base=4, seed=0, dtype="f64"):
    return StackUNet(UNetConfig(k, base, depth, extents, dtype), np.random.default_rng(seed))


def test_paper_stack_shape(rng):
    model = StackUNet(UNetConfig(7, 4, 4, (64, 64)), rng)
    out = model.forward(rng.random((7, 64, 64)))
    assert out.shape == (7, 64, 64)
    assert np.all((out > 0) & (out < 1))


@pytest.mark.parametrize("k,depth,extents", [(1, 1, (8, 6)), (3, 2, (16, 12)), (5, 3, (8, 16))])
def test_shape_contract(k, depth, extents, rng):
    model = StackUNet(UNetConfig(k, 2, depth, extents), rng)
    x = rng.random((2, k) + extents)
    assert model.forward(x).shape == x.shape


def test_config_validation():
    with pytest.raises(nn.ShapeError):
        UNetConfig(7, 8, 4, (64, 60))
    with pytest.raises(ValueError):
        UNetConfig(7, 8, 0, (64, 64))
    with pytest.raises(ValueError):
        UNetConfig(0, 8, 2, (64, 64))


def test_input_extent_mismatch(rng):
    model = tiny()
    with pytest.raises(nn.ShapeError):
        model.forward(rng.random((3, 16, 8)))
    with pytest.raises(nn.ShapeError):
        model.forward(rng.random((2, 16, 16)))


def test_determinism(rng):
    a, b = tiny(seed=4), tiny(seed=4)
    assert a.n_parameters() == b.n_parameters()
    for p, q in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(p.data, q.data)
    x = rng.random((3, 16, 16))
    a.set_train(False)
    np.testing.assert_array_equal(a.forward(x), a.forward(x))


def test_skip_channel_arithmetic():
    cfg = UNetConfig(7, 6, 3, (32, 32))
    model = StackUNet(cfg, np.random.default_rng(0))
    widths = cfg.widths()
    assert widths == [6, 12, 24, 48]
    for up, dec, level in zip(model.upconvs, model.decoders, reversed(range(cfg.depth))):
        deconv_out = up.weight.shape[1]
        first_conv = dec.layers[0]
        assert deconv_out == widths[level]
        assert first_conv.weight.shape[1] == widths[level] + deconv_out
    # parameter count is a pure function of the configuration
    assert model.n_parameters() == StackUNet(cfg, np.random.default_rng(99)).n_parameters()


def test_end_to_end_fd():
    model = tiny(seed=1)
    rng = np.random.default_rng(2)
    x = rng.random((2, 3, 16, 16))
    y = (rng.random((2, 3, 16, 16)) < 0.3).astype(float)
    w = LossWeights()

    def f():
        out = model.forward(x)
        return sum(stack_loss(o, t, w).total for o, t in zip(out, y)) / 2

    model.set_train(True)
    out = model.forward(x)
    model.zero_grad()
    model.backward(np.stack([loss_gradient(o, t, w, 2) for o, t in zip(out, y)]))
    params = model.parameters()
    grads = [p.grad.copy() for p in params]
    worst = 0.0
    for p, g in zip(params, grads):
        assert g.shape == p.data.shape
        idx = rng.choice(p.data.size, size=min(4, p.data.size), replace=False)
        numeric = numerical_gradient(f, p.data, indices=idx)
        worst = max(worst, max_relative_error(g.reshape(-1)[idx], numeric))
    assert worst < 1e-3


def test_zero_output_gradient(rng):
    model = tiny()
    model.forward(rng.random((3, 16, 16)))
    model.zero_grad()
    model.backward(np.zeros((3, 16, 16)))
    assert all(not p.grad.any() for p in model.parameters())


def test_backward_needs_tape():
    with pytest.raises(RuntimeError):
        tiny().backward(np.zeros((3, 16, 16)))


def test_overfit_single_stack():
    img, lab = generate_phantom(5, (16, 32, 32))
    model = StackUNet(UNetConfig(3, 8, 2, (32, 32)), np.random.default_rng(0))
    history = overfit(model, img.voxels[4:7], lab.voxels[4:7], LossWeights(), steps=200)
    assert history[-1] < 0.05
