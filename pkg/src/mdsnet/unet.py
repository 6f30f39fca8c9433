"""Stack-U-Net: a 2-D encoder-decoder that maps a k-slice stack (as k channels)
to k probability slices."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .nn import ShapeError

DTYPES = {"f64": np.float64, "f32": np.float32}

# The output bias starts at the logit of a small foreground prior.  At 0.5 the
# Dice gradient is spread over every pixel and the first epochs barely move.
HEAD_PRIOR = 0.05


@dataclass(frozen=True)
class UNetConfig:
    k: int = 7
    base_channels: int = 16
    depth: int = 4
    extents: tuple = (64, 64)
    dtype: str = "f64"

    def __post_init__(self):
        object.__setattr__(self, "extents", tuple(int(e) for e in self.extents))
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")
        step = 2**self.depth
        for name, e in zip("lw", self.extents):
            if e % step:
                raise ShapeError(f"extent {name}={e} is not divisible by 2**depth={step}")

    def widths(self):
        """Channel width per level, encoder levels then the bottom unit."""
        return [self.base_channels * 2**i for i in range(self.depth + 1)]

    def to_dict(self):
        d = asdict(self)
        d["extents"] = list(self.extents)
        return d


def _unit(cin, cout, rng, name, dtype, n_conv=2):
    layers = []
    for j in range(n_conv):
        layers += [
            nn.Conv2d(cin if j == 0 else cout, cout, 3, rng, padding=1, name=f"{name}.conv{j}", dtype=dtype),
            nn.ReLU(),
            nn.BatchNorm2d(cout, name=f"{name}.bn{j}", dtype=dtype),
        ]
    return nn.Sequential(*layers)


class StackUNet:
    kind = "stack-unet"

    def __init__(self, config, rng):
        self.config = config
        dtype = DTYPES[config.dtype]
        widths = config.widths()
        self.encoders = []
        cin = config.k
        for i in range(config.depth):
            self.encoders.append(_unit(cin, widths[i], rng, f"enc{i}", dtype))
            cin = widths[i]
        self.pool = nn.MaxPool2x2()
        self.bottom = _unit(cin, widths[-1], rng, "bottom", dtype)
        self.upconvs, self.decoders = [], []
        for i in reversed(range(config.depth)):
            self.upconvs.append(nn.Deconv2d(widths[i + 1], widths[i], 2, rng, stride=2, name=f"up{i}", dtype=dtype))
            self.decoders.append(_unit(2 * widths[i], widths[i], rng, f"dec{i}", dtype, n_conv=1))
        self.head = nn.Conv2d(widths[0], config.k, 1, rng, name="head", dtype=dtype)
        self.head.bias.data[...] = np.log(HEAD_PRIOR / (1 - HEAD_PRIOR))
        self.sigmoid = nn.Sigmoid()
        self._tape = None

    # -- bookkeeping ---------------------------------------------------------

    def _modules(self):
        yield from self.encoders
        yield self.bottom
        for up, dec in zip(self.upconvs, self.decoders):
            yield up
            yield dec
        yield self.head

    def parameters(self):
        return [p for m in self._modules() for p in m.parameters()]

    def buffers(self):
        return [b for m in self._modules() for b in m.buffers()]

    def n_parameters(self):
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self):
        nn.zero_grad(self.parameters())

    def set_train(self, train=True):
        for m in self._modules():
            for layer in getattr(m, "layers", []):
                if isinstance(layer, nn.BatchNorm2d):
                    layer.train = train

    # -- forward / backward --------------------------------------------------

    def forward(self, stack):
        """Probability stack of the same shape; records the tape for :meth:`backward`."""
        x, single = nn._as_batch(np.asarray(stack, dtype=DTYPES[self.config.dtype]))
        expected = (self.config.k,) + self.config.extents
        if x.shape[1:] != expected:
            raise ShapeError(f"input stack shape {x.shape[1:]} != configured {expected}")
        nn.check_finite(x, "stack-unet input")
        tape = {"enc": [], "pool": [], "up": [], "dec": [], "split": []}
        skips = []
        for enc in self.encoders:
            x, c = enc.forward(x)
            tape["enc"].append(c)
            skips.append(x)
            x, c = self.pool.forward(x)
            tape["pool"].append(c)
        x, tape["bottom"] = self.bottom.forward(x)
        for up, dec, skip in zip(self.upconvs, self.decoders, reversed(skips)):
            x, c = up.forward(x)
            tape["up"].append(c)
            tape["split"].append(x.shape[1])
            x, c = dec.forward(nn.concat_channels(x, skip))
            tape["dec"].append(c)
        x, tape["head"] = self.head.forward(x)
        y, tape["sigmoid"] = self.sigmoid.forward(x)
        nn.check_finite(y, "stack-unet output")
        self._tape = tape
        return y[0] if single else y

    def backward(self, grad_output):
        """Accumulate parameter gradients for d(loss)/d(output); returns d(loss)/d(input)."""
        if self._tape is None:
            raise RuntimeError("backward called without a forward tape")
        tape = self._tape
        d, single = nn._as_batch(np.asarray(grad_output, dtype=DTYPES[self.config.dtype]))
        d = self.sigmoid.backward(d, tape["sigmoid"])
        d = self.head.backward(d, tape["head"])
        skip_grads = []
        for j in reversed(range(self.config.depth)):
            d = self.decoders[j].backward(d, tape["dec"][j])
            n_up = tape["split"][j]
            skip_grads.append(d[:, n_up:])
            d = self.upconvs[j].backward(d[:, :n_up], tape["up"][j])
        # skip_grads[i] belongs to encoder level i
        d = self.bottom.backward(d, tape["bottom"])
        for i in reversed(range(self.config.depth)):
            d = self.pool.backward(d, tape["pool"][i])
            d = d + skip_grads[i]
            d = self.encoders[i].backward(d, tape["enc"][i])
        return d[0] if single else d
