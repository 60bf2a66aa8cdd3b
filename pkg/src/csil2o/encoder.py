"""Bias-free linear projection that turns a channel vector into a codeword."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .errors import ContractError, DimensionError
from .layers import kaiming


@dataclass
class Codeword:
    s: np.ndarray
    compression_ratio: float

    @property
    def M(self):
        return self.s.shape[-1]


class LinearEncoder:
    def __init__(self, W):
        W = W if isinstance(W, nd.Tensor) else nd.Tensor(W, requires_grad=True)
        if W.ndim != 2 or not 0 < W.shape[0] <= W.shape[1]:
            raise ContractError(f"encoder weight must be M x n with 0 < M <= n, got {W.shape}")
        W.requires_grad = True
        self.W = W

    @property
    def M(self):
        return self.W.shape[0]

    @property
    def n(self):
        return self.W.shape[1]

    @property
    def compression_ratio(self):
        return self.M / self.n

    def __call__(self, h):
        """Differentiable batch encode: ``h`` is (batch, n), result (batch, M)."""
        h = nd.as_tensor(h)
        if h.ndim != 2 or h.shape[1] != self.n:
            raise DimensionError(f"expected (batch, {self.n}) input, got {h.shape}")
        return nd.matmul(h, nd.transpose(self.W))

    def parameters(self):
        return [self.W]

    def named_parameters(self):
        return {"encoder.W": self.W}

    def parameter_count(self):
        return self.W.size


def encode(enc, h_vec):
    """``s = W h_vec`` for a single vector, returned as a :class:`Codeword`."""
    h_vec = np.asarray(h_vec, dtype=np.float64)
    if h_vec.shape != (enc.n,):
        raise DimensionError(f"h_vec has shape {h_vec.shape}, encoder expects ({enc.n},)")
    return Codeword(enc.W.data @ h_vec, enc.compression_ratio)


def init_kaiming(M, n, seed):
    if M < 1 or n < 1:
        raise ContractError("M and n must be positive")
    return LinearEncoder(kaiming(np.random.default_rng(seed), M, n))


def flops(enc):
    """One FLOP per weight: ``2 * N_a * N_t * M``."""
    return enc.M * enc.n


def encoder_flops(N_a, N_t, M):
    if M < 1:
        raise ContractError("codeword length M must be at least 1")
    return 2 * N_a * N_t * M


def resize(enc, M, seed):
    """Encoder for a different codeword length.

    Rows are kept up to ``M``; extra rows come from a fresh Kaiming draw
    seeded by ``seed``.
    """
    if not 0 < M <= enc.n:
        raise ContractError(f"target M={M} outside (0, {enc.n}]")
    if M <= enc.M:
        return LinearEncoder(enc.W.data[:M].copy())
    extra = kaiming(np.random.default_rng(seed), M - enc.M, enc.n)
    return LinearEncoder(np.vstack([enc.W.data, extra]))
