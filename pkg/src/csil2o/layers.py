"""Small trainable building blocks on top of :mod:`csil2o.ndtensor`."""

from __future__ import annotations

import numpy as np

from . import ndtensor as nd
from .errors import DimensionError


def kaiming(rng, fan_out, fan_in):
    """He-normal weights, N(0, 2 / fan_in)."""
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))


class Linear:
    def __init__(self, fan_in, fan_out, rng=None, bias=True):
        rng = np.random.default_rng() if rng is None else rng
        self.W = nd.Tensor(kaiming(rng, fan_out, fan_in), requires_grad=True)
        self.b = nd.Tensor(np.zeros(fan_out), requires_grad=True) if bias else None

    @property
    def fan_in(self):
        return self.W.shape[1]

    @property
    def fan_out(self):
        return self.W.shape[0]

    def __call__(self, x):
        return nd.linear(x, self.W, self.b)

    def parameters(self):
        return [self.W] if self.b is None else [self.W, self.b]

    def named_parameters(self, prefix):
        out = {f"{prefix}.W": self.W}
        if self.b is not None:
            out[f"{prefix}.b"] = self.b
        return out


class MLP:
    """Fully connected stack with ReLU between layers and a linear output."""

    def __init__(self, widths, rng=None):
        if len(widths) < 2:
            raise DimensionError("MLP needs at least an input and an output width")
        self.widths = tuple(int(w) for w in widths)
        self.layers = [Linear(a, b, rng) for a, b in zip(self.widths[:-1], self.widths[1:])]

    def __call__(self, x):
        if x.shape[-1] != self.widths[0]:
            raise DimensionError(f"MLP expects width {self.widths[0]}, got {x.shape[-1]}")
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = nd.max0(x)
        return x

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def named_parameters(self, prefix):
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_parameters(f"{prefix}.layer{i}"))
        return out

    def flops(self):
        return sum(a * b for a, b in zip(self.widths[:-1], self.widths[1:]))


class LSTMLayer:
    """One LSTM layer with PyTorch gate order (input, forget, cell, output)."""

    def __init__(self, input_size, hidden_size, rng=None):
        rng = np.random.default_rng() if rng is None else rng
        h = hidden_size
        self.hidden_size = h
        self.Wih = nd.Tensor(kaiming(rng, 4 * h, input_size), requires_grad=True)
        self.Whh = nd.Tensor(kaiming(rng, 4 * h, h), requires_grad=True)
        self.bih = nd.Tensor(np.zeros(4 * h), requires_grad=True)
        self.bhh = nd.Tensor(np.zeros(4 * h), requires_grad=True)

    def __call__(self, x, h, c):
        gates = nd.linear(x, self.Wih, self.bih) + nd.linear(h, self.Whh, self.bhh)
        h_new, c_new = nd.split_cols(nd.lstm_cell(gates, c), self.hidden_size)
        return h_new, c_new

    def parameters(self):
        return [self.Wih, self.Whh, self.bih, self.bhh]

    def named_parameters(self, prefix):
        return {
            f"{prefix}.Wih": self.Wih,
            f"{prefix}.Whh": self.Whh,
            f"{prefix}.bih": self.bih,
            f"{prefix}.bhh": self.bhh,
        }

    def flops(self):
        return self.Wih.size + self.Whh.size


def assign(named, arrays, strict=True):
    """Copy arrays into the tensors of ``named`` (a name -> Tensor dict)."""
    for name, t in named.items():
        if name not in arrays:
            if strict:
                raise KeyError(f"checkpoint has no tensor {name!r}")
            continue
        arr = np.asarray(arrays[name], dtype=np.float64)
        if arr.shape != t.shape:
            raise DimensionError(f"{name}: checkpoint shape {arr.shape} != model shape {t.shape}")
        t.data = arr.copy()
