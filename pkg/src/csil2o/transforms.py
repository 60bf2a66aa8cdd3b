"""Learned per-row sparsifying transform and its inverse.

Each delay row of the truncated angular-delay channel (real and imaginary
parts concatenated, length ``2 * N_t``) goes through a shared MLP ``f_t``.
Only the ``G`` largest-magnitude outputs survive; ``f_i`` mirrors the MLP
and maps the sparse code back to a row.
"""

from __future__ import annotations

import numpy as np

from . import ndtensor as nd
from .errors import ContractError, DimensionError
from .layers import MLP


def top_g_mask(values, G):
    """Boolean mask of the ``G`` largest |values| per row, ties to the lowest index."""
    order = np.argsort(-np.abs(values), axis=-1, kind="stable")[..., :G]
    mask = np.zeros(values.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def rows_from_vec(x, N_a, N_t):
    """(batch, 2*N_a*N_t) -> (batch*N_a, 2*N_t), one delay row per output row."""
    x = nd.as_tensor(x)
    B = x.shape[0]
    x = nd.reshape(x, (B, 2, N_a, N_t))
    x = nd.transpose(x, (0, 2, 1, 3))
    return nd.reshape(x, (B * N_a, 2 * N_t))


def vec_from_rows(r, N_a, N_t):
    r = nd.as_tensor(r)
    B = r.shape[0] // N_a
    r = nd.reshape(r, (B, N_a, 2, N_t))
    r = nd.transpose(r, (0, 2, 1, 3))
    return nd.reshape(r, (B, 2 * N_a * N_t))


class SparseTransform:
    is_identity = False

    def __init__(self, N_t, hidden=(32, 32), N_i=64, G=13, rng=None, seed=0):
        if not 1 <= G <= N_i:
            raise ContractError(f"G={G} must lie in [1, N_i={N_i}]")
        rng = np.random.default_rng(seed) if rng is None else rng
        self.N_t = N_t
        self.N_i = N_i
        self.G = G
        w1, w2 = hidden
        self.ft = MLP((2 * N_t, w1, w2, N_i), rng)
        self.fi = MLP((N_i, w2, w1, 2 * N_t), rng)

    @property
    def row_width(self):
        return 2 * self.N_t

    def parameters(self):
        return self.ft.parameters() + self.fi.parameters()

    def named_parameters(self):
        return {**self.ft.named_parameters("ft"), **self.fi.named_parameters("fi")}

    def flops(self):
        """Per-row FLOPs of one f_t pass and one f_i pass (one per weight)."""
        return self.ft.flops(), self.fi.flops()

    def parameter_count(self):
        return sum(p.size for p in self.parameters())


class IdentityTransform:
    """Stand-in that makes the decoder's proximal step plain soft-thresholding."""

    is_identity = True

    def parameters(self):
        return []

    def named_parameters(self):
        return {}

    def flops(self):
        return 0, 0

    def parameter_count(self):
        return 0


def apply_ft(t, rows):
    """MLP output with all but the G largest-magnitude entries per row zeroed.

    Gradients pass straight through the retained entries and are zero on the
    discarded ones.  Accepts one row of length ``2*N_t`` or a (rows, 2*N_t)
    batch.
    """
    rows = nd.as_tensor(rows)
    single = rows.ndim == 1
    if single:
        rows = nd.reshape(rows, (1, rows.shape[0]))
    if rows.shape[-1] != t.row_width:
        raise DimensionError(f"apply_ft expects rows of width {t.row_width}, got {rows.shape[-1]}")
    out = t.ft(rows)
    if t.G < t.N_i:
        out = out * nd.Tensor(top_g_mask(out.data, t.G))
    return nd.reshape(out, (t.N_i,)) if single else out


def apply_fi(t, code):
    code = nd.as_tensor(code)
    single = code.ndim == 1
    if single:
        code = nd.reshape(code, (1, code.shape[0]))
    if code.shape[-1] != t.N_i:
        raise DimensionError(f"apply_fi expects codes of width {t.N_i}, got {code.shape[-1]}")
    out = t.fi(code)
    return nd.reshape(out, (t.row_width,)) if single else out


def transform_loss(t, H):
    """Summed squared row error of ``f_i(f_t(.))`` over every delay row.

    ``H`` is either one truncated channel (2, N_a, N_t) or a batch of flat
    channel vectors (batch, 2*N_a*N_t).
    """
    if t.is_identity:
        return nd.Tensor(0.0)
    if not isinstance(H, nd.Tensor) and np.ndim(H) == 3:
        H = np.asarray(H).reshape(1, -1)
    H = nd.as_tensor(H)
    N_t = t.N_t
    n = H.shape[1]
    if n % (2 * N_t):
        raise DimensionError(f"channel width {n} is not a multiple of 2*N_t={2 * N_t}")
    N_a = n // (2 * N_t)
    rows = rows_from_vec(H, N_a, N_t)
    recon = apply_fi(t, apply_ft(t, rows))
    return nd.sum_squares(rows - recon)
