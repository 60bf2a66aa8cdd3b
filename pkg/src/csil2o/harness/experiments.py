"""Complexity accounting, multi-rate evaluation and quantized evaluation."""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from .. import ndtensor as nd
from ..encoder import encoder_flops, resize
from ..errors import ContractError
from ..quantize import QuantizerCodebook, feedback_bits, fit_lloyd_max, quantize
from ..l2o import decode
from .training import nmse, reconstruct


def complexity_report(model, T):
    """Exact FLOP and parameter counts, one FLOP per weight touched.

    Decoder FLOPs per iteration: f_t and f_i over the ``N_a`` delay rows, the
    parameter network over all ``n`` coordinates, and two gradient
    evaluations of ``W^T (W v - s)`` at ``2 M n`` each.
    """
    cfg = model.cfg
    n, M = cfg.n, model.encoder.M
    ft_row, fi_row = model.transform.flops()
    per_iter = {
        "ft": ft_row * cfg.N_a,
        "fi": fi_row * cfg.N_a,
        "paramnet": n * model.net.flops_per_coordinate(),
        "gradient": 2 * (2 * M * n),
    }
    return {
        "encoder_flops": encoder_flops(cfg.N_a, cfg.N_t, M),
        "encoder_params": model.encoder.parameter_count(),
        "decoder_flops_per_iter": sum(per_iter.values()),
        "decoder_flops": T * sum(per_iter.values()),
        "decoder_params": model.transform.parameter_count() + model.net.parameter_count(),
        "iterations": T,
        **{f"decoder_{k}_flops_per_iter": v for k, v in per_iter.items()},
    }


def ratio_to_m(ratio, n):
    M = Fraction(ratio).limit_denominator(1 << 20) * n
    if M.denominator != 1:
        raise ContractError(f"ratio {ratio} does not give an integer codeword length for n={n}")
    return int(M)


def multirate_eval(model, H, Ms, T, seed=0):
    """NMSE of one trained model at several codeword lengths, no retraining.

    Smaller codewords keep the first rows of the trained ``W``; larger ones
    append freshly seeded Kaiming rows.  Transform and parameter network
    are shared unchanged.  Returns rows sorted by ``M`` plus the list of
    ordering violations (a smaller ``M`` scoring better than a larger one).
    """
    n = model.cfg.n
    rows = []
    for M in sorted(set(int(m) for m in Ms)):
        if not 0 < M <= n:
            raise ContractError(f"codeword length {M} outside (0, {n}]")
        enc = model.encoder if M == model.encoder.M else resize(model.encoder, M, seed=seed + M)
        variant = model.with_encoder(enc)
        est, _ = reconstruct(variant, H, T, seed=seed)
        rows.append({"M": M, "ratio": M / n, "nmse_db": nmse(H, est), "net_shapes": _shapes(model.net)})
    violations = [
        (small["M"], large["M"])
        for i, small in enumerate(rows)
        for large in rows[i + 1:]
        if small["nmse_db"] < large["nmse_db"]
    ]
    return rows, violations


def _shapes(net):
    return tuple(p.shape for p in net.parameters())


def codewords(model, H):
    return np.asarray(H, dtype=np.float64) @ model.encoder.W.data.T


def fit_codebooks(model, train_H, bits):
    pooled = codewords(model, train_H).ravel()
    return {B: fit_lloyd_max(pooled, B) for B in bits}


def quantized_eval(model, H, codebooks, T, seed=0):
    """Decode from dequantized codewords; one row per bit width."""
    H = np.asarray(H, dtype=np.float64)
    S = codewords(model, H)
    rows = []
    for B, cb in sorted(codebooks.items()):
        Sq = quantize(cb, S).dequantized
        with nd.no_grad():
            x, _ = decode(model.net, model.transform, model.encoder.W, Sq, T, seed=seed)
        rows.append({
            "ratio": model.encoder.M / model.cfg.n,
            "bits": feedback_bits(model.encoder.M, B),
            "B": B,
            "nmse_db": nmse(H, x.data),
            "quant_mse": float(np.mean((S - Sq) ** 2)),
        })
    return rows


__all__ = [
    "QuantizerCodebook",
    "codewords",
    "complexity_report",
    "fit_codebooks",
    "multirate_eval",
    "quantized_eval",
    "ratio_to_m",
]
