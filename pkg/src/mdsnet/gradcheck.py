"""Central finite differences and the error measure used to compare them."""
from __future__ import annotations

import numpy as np

FD_STEP = 1e-5
# below this magnitude an element is compared in absolute terms
REL_FLOOR = 1e-6


def numerical_gradient(f, x, step=FD_STEP, indices=None):
    """Central-difference gradient of scalar ``f()`` w.r.t. array ``x`` (perturbed in place).

    With ``indices`` (flat positions) only those entries are evaluated and a
    1-D array is returned.
    """
    flat = x.reshape(-1)
    if indices is None:
        grad = np.zeros(flat.size)
        positions = range(flat.size)
    else:
        positions = list(indices)
        grad = np.zeros(len(positions))
    for n, i in enumerate(positions):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        grad[n] = (fp - fm) / (2 * step)
    return grad.reshape(x.shape) if indices is None else grad


def max_relative_error(analytic, numeric, floor=REL_FLOOR):
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)."""
    a = np.asarray(analytic, dtype=float).ravel()
    n = np.asarray(numeric, dtype=float).ravel()
    if a.shape != n.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


STACK_CASES = ("random", "empty-slices", "perfect", "symmetric", "saturated")


def random_stack_case(rng, k, size=(8, 8), kind="random"):
    """A ``(pred, label)`` pair of shape (k, *size) for gradient checks.

    ``empty-slices`` zeroes the label on about half the slices, ``perfect``
    sets pred == label (all slice losses zero), ``symmetric`` repeats one
    slice k times and ``saturated`` pushes pred to the clamp limits.
    """
    shape = (k,) + tuple(size)
    label = (rng.random(shape) < 0.4).astype(float)
    pred = rng.uniform(0.05, 0.95, shape)
    if kind == "empty-slices":
        label[rng.random(k) < 0.5] = 0.0
        label[0] = 0.0
    elif kind == "perfect":
        label[:, 0, 0] = 1.0
        pred = label.copy()
    elif kind == "symmetric":
        label = np.repeat(label[:1], k, axis=0)
        pred = np.repeat(pred[:1], k, axis=0)
    elif kind == "saturated":
        pred = np.where(rng.random(shape) < 0.5, 1e-6, 1 - 1e-6) + rng.uniform(-1, 1, shape) * 1e-7
        pred = np.clip(pred, 1e-6, 1 - 1e-6)
    elif kind != "random":
        raise ValueError(f"unknown stack case {kind!r}; choose from {STACK_CASES}")
    return pred, label


def loss_gradcheck(seed, k, kind="random", weights=None, size=(8, 8), step=FD_STEP):
    """Max relative error between the analytic stack-energy gradient and central differences."""
    from .loss import LossWeights, loss_gradient, stack_loss

    weights = weights or LossWeights()
    pred, label = random_stack_case(np.random.default_rng(seed), k, size, kind)
    analytic = loss_gradient(pred, label, weights)
    numeric = numerical_gradient(lambda: stack_loss(pred, label, weights).total, pred, step)
    return max_relative_error(analytic, numeric)


def layer_gradcheck(layer, x, rng, indices=None):
    """Max relative error over input and parameter gradients of ``sum(G * layer(x))``.

    ``G`` is a fixed random projection of the output.  With ``indices`` (an
    int) only that many sampled entries of each parameter are checked.
    """
    y, _ = layer.forward(x)
    g = rng.standard_normal(y.shape)

    def f():
        return float(np.sum(layer.forward(x)[0] * g))

    for p in layer.parameters():
        p.zero_grad()
    _, cache = layer.forward(x)
    dx = layer.backward(g, cache)
    errs = [max_relative_error(dx, numerical_gradient(f, x))]
    for p in layer.parameters():
        if indices is None:
            errs.append(max_relative_error(p.grad, numerical_gradient(f, p.data)))
        else:
            idx = rng.choice(p.data.size, size=min(indices, p.data.size), replace=False)
            errs.append(max_relative_error(p.grad.reshape(-1)[idx], numerical_gradient(f, p.data, indices=idx)))
    return max(errs)


LAYER_OPS = ("conv2d", "conv2d-strided", "deconv2d", "deconv2d-padded", "maxpool2x2", "batchnorm-train",
             "batchnorm-eval", "relu", "sigmoid")


def op_gradcheck(op, seed):
    """FD check of one differentiable primitive on a small random instance."""
    from . import nn

    rng = np.random.default_rng(seed)
    if op in ("conv2d", "conv2d-strided"):
        stride = 2 if op == "conv2d-strided" else 1
        layer = nn.Conv2d(2, 3, 3, rng, stride=stride, padding=1)
        layer.bias.data[...] = rng.standard_normal(3)
        x = rng.standard_normal((2, 2, 5, 5))
    elif op in ("deconv2d", "deconv2d-padded"):
        k, pad = (2, 0) if op == "deconv2d" else (3, 1)
        layer = nn.Deconv2d(3, 2, k, rng, stride=2, padding=pad)
        layer.bias.data[...] = rng.standard_normal(2)
        x = rng.standard_normal((2, 3, 3, 4))
    elif op == "maxpool2x2":
        layer, x = nn.MaxPool2x2(), rng.standard_normal((2, 2, 4, 6))
    elif op.startswith("batchnorm"):
        layer = nn.BatchNorm2d(3)
        layer.gamma.data[...] = rng.uniform(0.5, 2, 3)
        layer.beta.data[...] = rng.standard_normal(3)
        layer.running_var[...] = rng.uniform(0.5, 2, 3)
        layer.train = op == "batchnorm-train"
        x = rng.standard_normal((2, 3, 3, 3))
    elif op in ("relu", "sigmoid"):
        layer = nn.ReLU() if op == "relu" else nn.Sigmoid()
        x = rng.standard_normal((1, 2, 4, 4))
        x[np.abs(x) < 1e-3] = 0.5  # away from the ReLU kink
    else:
        raise ValueError(f"unknown op {op!r}; choose from {LAYER_OPS}")
    return layer_gradcheck(layer, x, rng)


def cell_step_gradcheck(seed):
    """FD check of one ConvLSTM step w.r.t. its input, both states and every weight."""
    from . import nn
    from .biclstm import ConvLSTMCell

    rng = np.random.default_rng(seed)
    cell = ConvLSTMCell(1, 2, 3, rng)
    x = rng.standard_normal((1, 1, 4, 4))
    h0 = np.tanh(rng.standard_normal((1, 2, 4, 4)))
    c0 = rng.standard_normal((1, 2, 4, 4))
    wh, wc = rng.standard_normal((2, 1, 2, 4, 4))

    def f():
        h, c, _ = cell.step(x, h0, c0)
        return float(np.sum(h * wh) + np.sum(c * wc))

    nn.zero_grad(cell.parameters())
    _, _, cache = cell.step(x, h0, c0)
    grads = cell.step_backward(wh, wc, cache)
    errs = [max_relative_error(g, numerical_gradient(f, t)) for g, t in zip(grads, (x, h0, c0))]
    errs += [max_relative_error(p.grad, numerical_gradient(f, p.data)) for p in cell.parameters()]
    return max(errs)


def refiner_window_gradcheck(seed, hidden=3, samples=12):
    """FD check of one unrolled refiner window: full input gradient, sampled parameters."""
    from .biclstm import BiCLSTM, RefinerConfig

    rng = np.random.default_rng(seed)
    model = BiCLSTM(RefinerConfig(hidden_channels=hidden), rng)
    for p in model.parameters():  # leave the pass-through start so every path carries signal
        p.data[...] = 0.5 * rng.standard_normal(p.data.shape)
    win = rng.random((2, 3, 5, 5))
    weight = rng.standard_normal((2, 5, 5))

    def f():
        return float(np.sum(model.forward(win) * weight))

    model.zero_grad()
    model.forward(win)
    dwin = model.backward(weight)
    input_err = max_relative_error(dwin, numerical_gradient(f, win))
    param_err = 0.0
    for p in model.parameters():
        idx = rng.choice(p.data.size, size=min(samples, p.data.size), replace=False)
        numeric = numerical_gradient(f, p.data, indices=idx)
        param_err = max(param_err, max_relative_error(p.grad.reshape(-1)[idx], numeric))
    return input_err, param_err
