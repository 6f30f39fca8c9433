"""Bidirectional convolutional LSTM that refines each probability slice from its
neighbours.

For slice ``t`` the window ``(y[t-1], y[t], y[t+1])`` is read forwards by one
ConvLSTM cell and backwards by another; the two hidden states at the centre
step, together with the centre slice itself, are mixed by a 1x1 convolution and
squashed by a sigmoid.  Edge slices replicate themselves as the missing
neighbour.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .loss import EPS_SMOOTH, clamp_prediction
from .metrics import binary_overlap_metrics
from .nn import ShapeError, sigmoid_fn

DTYPES = {"f64": np.float64, "f32": np.float32}

# Initial weight on the centre-slice channel of the projection.  With the bias
# at -CENTER_GAIN/2 and the hidden-state weights at zero, an untrained refiner
# is a sharpened pass-through that keeps every voxel on its side of 0.5.
CENTER_GAIN = 24.0


@dataclass(frozen=True)
class RefinerConfig:
    hidden_channels: int = 8
    kernel_size: int = 3
    in_channels: int = 1
    dtype: str = "f64"

    def __post_init__(self):
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd to keep spatial extents")
        if self.hidden_channels < 1:
            raise ValueError("hidden_channels must be >= 1")

    def to_dict(self):
        return asdict(self)


class ConvLSTMCell:
    """Gates i, f, o and candidate g from one convolution over [input, h_prev]."""

    def __init__(self, in_channels, hidden_channels, kernel_size, rng, name="cell", dtype=np.float64):
        self.hidden = hidden_channels
        self.conv = nn.Conv2d(in_channels + hidden_channels, 4 * hidden_channels, kernel_size, rng,
                              padding=kernel_size // 2, name=f"{name}.gates", dtype=dtype)
        # Xavier-style scale suits the saturating gate nonlinearities better than Kaiming
        fan = (in_channels + hidden_channels) * kernel_size**2
        self.conv.weight.data[...] = (rng.standard_normal(self.conv.weight.shape) / np.sqrt(fan)).astype(dtype)

    def parameters(self):
        return self.conv.parameters()

    def zero_state(self, x):
        n, _, h, w = x.shape
        z = np.zeros((n, self.hidden, h, w), dtype=x.dtype)
        return z, z.copy()

    def step(self, x, h_prev, c_prev):
        """One recurrence step on batched (N, C, H, W) inputs; returns ``(h, c, cache)``."""
        if h_prev.shape != c_prev.shape or h_prev.shape[1] != self.hidden:
            raise ShapeError(f"state shapes {h_prev.shape}/{c_prev.shape} do not match {self.hidden} hidden channels")
        if x.shape[0] != h_prev.shape[0] or x.shape[2:] != h_prev.shape[2:]:
            raise ShapeError(f"input {x.shape} does not align with state {h_prev.shape}")
        z, conv_cache = self.conv.forward(np.concatenate([x, h_prev], axis=1))
        hc = self.hidden
        i = sigmoid_fn(z[:, :hc])
        f = sigmoid_fn(z[:, hc : 2 * hc])
        o = sigmoid_fn(z[:, 2 * hc : 3 * hc])
        g = np.tanh(z[:, 3 * hc :])
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        return h, c, (conv_cache, i, f, o, g, tc, c_prev, x.shape[1])

    def step_backward(self, dh, dc, cache):
        """Returns ``(dx, dh_prev, dc_prev)`` and accumulates the gate-conv gradients."""
        conv_cache, i, f, o, g, tc, c_prev, n_in = cache
        dc = dc + dh * o * (1 - tc**2)
        dz = np.concatenate([
            dc * g * i * (1 - i),
            dc * c_prev * f * (1 - f),
            dh * tc * o * (1 - o),
            dc * i * (1 - g**2),
        ], axis=1)
        dxh = self.conv.backward(dz, conv_cache)
        return dxh[:, :n_in], dxh[:, n_in:], dc * f


class BiCLSTM:
    kind = "biclstm"

    def __init__(self, config, rng):
        self.config = config
        dtype = DTYPES[config.dtype]
        args = (config.in_channels, config.hidden_channels, config.kernel_size, rng)
        self.forward_cell = ConvLSTMCell(*args, name="fwd", dtype=dtype)
        self.backward_cell = ConvLSTMCell(*args, name="bwd", dtype=dtype)
        hc = config.hidden_channels
        self.proj = nn.Conv2d(2 * hc + 1, 1, 1, rng, name="proj", dtype=dtype)
        w = self.proj.weight.data
        w[:, : 2 * hc] = 0.0
        w[:, 2 * hc] = CENTER_GAIN
        self.proj.bias.data[...] = -CENTER_GAIN / 2
        self._tape = None

    def parameters(self):
        return self.forward_cell.parameters() + self.backward_cell.parameters() + self.proj.parameters()

    def buffers(self):
        return []

    def zero_grad(self):
        nn.zero_grad(self.parameters())

    def swapped(self):
        """Copy with forward/backward roles (cells and their projection weights) exchanged."""
        other = object.__new__(BiCLSTM)
        other.config = self.config
        other.forward_cell, other.backward_cell = _clone_cell(self.backward_cell), _clone_cell(self.forward_cell)
        other.proj = nn.Conv2d.__new__(nn.Conv2d)
        other.proj.stride, other.proj.padding = self.proj.stride, self.proj.padding
        hc = self.config.hidden_channels
        w = self.proj.weight.data
        other.proj.weight = nn.Parameter(np.concatenate([w[:, hc : 2 * hc], w[:, :hc], w[:, 2 * hc :]], axis=1),
                                         "proj.weight")
        other.proj.bias = nn.Parameter(self.proj.bias.data.copy(), "proj.bias")
        other._tape = None
        return other

    # -- forward / backward --------------------------------------------------

    def forward(self, windows):
        """Refine centre slices of (N, 3, H, W) windows (or one (3, H, W) window)."""
        windows = np.asarray(windows, dtype=DTYPES[self.config.dtype])
        single = windows.ndim == 3
        if single:
            windows = windows[None]
        if windows.ndim != 4 or windows.shape[1] != 3:
            raise ShapeError(f"refiner windows must have 3 slices, got shape {windows.shape}")
        nn.check_finite(windows, "refiner input")
        prev, center, nxt = (windows[:, j : j + 1] for j in range(3))
        tape = {}
        h, c = self.forward_cell.zero_state(center)
        h, c, tape["f1"] = self.forward_cell.step(prev, h, c)
        hf, _, tape["f2"] = self.forward_cell.step(center, h, c)
        h, c = self.backward_cell.zero_state(center)
        h, c, tape["b1"] = self.backward_cell.step(nxt, h, c)
        hb, _, tape["b2"] = self.backward_cell.step(center, h, c)
        z, tape["proj"] = self.proj.forward(np.concatenate([hf, hb, center], axis=1))
        y = sigmoid_fn(z[:, 0])
        tape["y"] = y
        self._tape = tape
        return y[0] if single else y

    def backward(self, grad_output):
        """Accumulate parameter gradients; returns d(loss)/d(windows)."""
        if self._tape is None:
            raise RuntimeError("backward called without a forward tape")
        t = self._tape
        dy = np.asarray(grad_output, dtype=t["y"].dtype)
        if dy.ndim == 2:
            dy = dy[None]
        dz = (dy * t["y"] * (1 - t["y"]))[:, None]
        dhh = self.proj.backward(dz, t["proj"])
        hc = self.config.hidden_channels
        dhf, dhb = dhh[:, :hc], dhh[:, hc : 2 * hc]
        zeros = np.zeros_like(dhf)
        dwin = np.zeros(dy.shape[:1] + (3,) + dy.shape[1:], dtype=dy.dtype)
        dwin[:, 1] += dhh[:, 2 * hc]
        dx, dh, dc = self.forward_cell.step_backward(dhf, zeros, t["f2"])
        dwin[:, 1] += dx[:, 0]
        dx, _, _ = self.forward_cell.step_backward(dh, dc, t["f1"])
        dwin[:, 0] += dx[:, 0]
        dx, dh, dc = self.backward_cell.step_backward(dhb, zeros, t["b2"])
        dwin[:, 1] += dx[:, 0]
        dx, _, _ = self.backward_cell.step_backward(dh, dc, t["b1"])
        dwin[:, 2] += dx[:, 0]
        return dwin


def _clone_cell(cell):
    other = object.__new__(ConvLSTMCell)
    other.hidden = cell.hidden
    other.conv = nn.Conv2d.__new__(nn.Conv2d)
    other.conv.stride, other.conv.padding = cell.conv.stride, cell.conv.padding
    other.conv.weight = nn.Parameter(cell.conv.weight.data.copy(), cell.conv.weight.name)
    other.conv.bias = nn.Parameter(cell.conv.bias.data.copy(), cell.conv.bias.name)
    return other


# ----------------------------------------------------------------------------
# volumes
# ----------------------------------------------------------------------------

def volume_windows(prob_volume):
    """(d, H, W) -> (d, 3, H, W) windows with edge replication at both ends."""
    v = np.asarray(prob_volume)
    if v.ndim != 3:
        raise ShapeError(f"expected a (d, H, W) volume, got {v.shape}")
    padded = np.concatenate([v[:1], v, v[-1:]], axis=0)
    return np.stack([padded[:-2], padded[1:-1], padded[2:]], axis=1)


def refine(model, window):
    """Refined centre slice for one (3, H, W) window."""
    window = np.asarray(window)
    if window.ndim != 3 or window.shape[0] != 3:
        raise ShapeError(f"window must hold 3 slices, got shape {window.shape}")
    return model.forward(window)


def refine_volume(model, prob_volume, chunk=16):
    """Refine every slice of a probability volume; output has the same dims."""
    windows = volume_windows(prob_volume)
    out = np.empty(windows.shape[:1] + windows.shape[2:], dtype=float)
    for s in range(0, len(windows), chunk):
        out[s : s + chunk] = model.forward(windows[s : s + chunk])
    return out


def _slice_dice_terms(pred, label, eps):
    inter = np.sum(pred * label, axis=(1, 2))
    denom = np.sum(pred, axis=(1, 2)) + np.sum(label, axis=(1, 2)) + eps
    loss = 1.0 - (2.0 * inter + eps) / denom
    grad = ((2.0 * inter + eps)[:, None, None] - 2.0 * label * denom[:, None, None]) / (denom**2)[:, None, None]
    return loss, grad


def refiner_loss_and_grad(model, prob_volume, label, eps=EPS_SMOOTH, chunk=16):
    """Mean per-slice soft Dice loss of the refined volume; accumulates gradients."""
    windows = volume_windows(prob_volume)
    label = np.asarray(label, dtype=float)
    d = len(windows)
    total = 0.0
    for s in range(0, d, chunk):
        out = model.forward(windows[s : s + chunk])
        clipped, passed = clamp_prediction(out)
        loss, grad = _slice_dice_terms(clipped, label[s : s + chunk], eps)
        total += float(loss.sum())
        model.backward(grad * passed / d)
    return total / d


def thresholded_dice(model, pairs, thr=0.5):
    """Mean hard Dice of the refined volumes at ``thr``."""
    return float(np.mean([binary_overlap_metrics(refine_volume(model, p) >= thr, y).dice for p, y in pairs]))


def _snapshot(model):
    return [(p.data.copy(), p.momentum.copy()) for p in model.parameters()]


def _restore(model, snap):
    for p, (data, mom) in zip(model.parameters(), snap):
        p.data[...] = data
        p.momentum[...] = mom


def train_refiner(model, pairs, epochs=150, lr=1e-3, momentum=0.99, rng=None, eps=EPS_SMOOTH,
                  log=None, select_thr=None):
    """SGD-momentum training on ``(prob_volume, label)`` pairs, one step per volume.

    Returns the per-epoch mean loss history.  With ``select_thr`` the weights
    of the epoch with the best hard training Dice at that threshold are kept,
    the untrained state counting as epoch -1; the choice is stored as
    ``model.selected_epoch``.
    """
    pairs = list(pairs)
    for p, y in pairs:
        if np.shape(p) != np.shape(y):
            raise ShapeError(f"probability volume {np.shape(p)} and label {np.shape(y)} differ")
    rng = rng if rng is not None else np.random.default_rng(0)
    history = []
    best = None
    if select_thr is not None:
        best = (thresholded_dice(model, pairs, select_thr), -1, _snapshot(model))
    for epoch in range(epochs):
        losses = []
        for idx in rng.permutation(len(pairs)):
            prob, label = pairs[idx]
            model.zero_grad()
            loss = refiner_loss_and_grad(model, prob, label, eps)
            if not np.isfinite(loss):
                raise nn.NonFiniteError(f"refiner loss diverged at epoch {epoch}")
            nn.sgd_momentum_step(model.parameters(), lr, momentum)
            losses.append(loss)
        history.append(float(np.mean(losses)))
        if log is not None:
            log(epoch, history[-1])
        if best is not None:
            dice = thresholded_dice(model, pairs, select_thr)
            if dice > best[0]:
                best = (dice, epoch, _snapshot(model))
    if best is not None:
        _restore(model, best[2])
        model.selected_epoch = best[1]
    return history
