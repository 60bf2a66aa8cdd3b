"""Lloyd-Max scalar quantization of codewords into packed bitstreams."""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DimensionError, FormatError


@dataclass
class QuantizerCodebook:
    B: int
    levels: np.ndarray
    thresholds: np.ndarray
    converged: bool = True
    history: tuple = ()

    def __post_init__(self):
        self.levels = np.asarray(self.levels, dtype=np.float64)
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64)
        if not 1 <= self.B <= 8:
            raise ContractError(f"B={self.B} outside 1..8")
        if self.levels.shape != (2**self.B,) or self.thresholds.shape != (2**self.B - 1,):
            raise DimensionError(f"a {self.B}-bit codebook needs {2**self.B} levels and {2**self.B - 1} thresholds")


def _midpoints(levels):
    return 0.5 * (levels[:-1] + levels[1:])


def assign(levels, x):
    """Index of the nearest level; an exact midpoint goes to the lower index."""
    thresholds = _midpoints(levels)
    return np.searchsorted(thresholds, x, side="left")


def distortion(levels, x):
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean((x - levels[assign(levels, x)]) ** 2))


def fit_lloyd_max(samples, B, max_iter=5000, tol=1e-10):
    """Alternate nearest-level assignment and centroid updates.

    Levels start at the sample quantiles of the cell centres.  A cell that
    empties is re-seeded at the midpoint of the currently most populated
    cell.  Iteration stops when no level moves by more than ``tol``; if
    ``max_iter`` is reached first the best codebook seen is returned with
    ``converged=False`` and a warning.
    """
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    if x.size == 0:
        raise ContractError("cannot fit a quantizer to an empty sample set")
    if not 1 <= B <= 8:
        raise ContractError(f"B={B} outside 1..8")
    K = 2**B
    levels = np.quantile(x, (np.arange(K) + 0.5) / K)
    history = []
    best = (np.inf, levels.copy())
    converged = False
    for _ in range(max_iter):
        idx = assign(levels, x)
        counts = np.bincount(idx, minlength=K)
        sums = np.bincount(idx, weights=x, minlength=K)
        new = levels.copy()
        full = counts > 0
        new[full] = sums[full] / counts[full]
        for k in np.flatnonzero(~full):
            big = int(np.argmax(counts))
            members = x[idx == big]
            new[k] = 0.5 * (members[0] + members[-1])
        new = np.sort(new)
        d = distortion(new, x)
        history.append(d)
        if d < best[0]:
            best = (d, new.copy())
        move = float(np.max(np.abs(new - levels)))
        levels = new
        if move < tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"Lloyd-Max did not converge in {max_iter} iterations", RuntimeWarning, stacklevel=2)
        levels = best[1]
    levels = _separate(levels, tol)
    return QuantizerCodebook(B, levels, _midpoints(levels), converged, tuple(history))


def _separate(levels, tol):
    # Degenerate inputs (e.g. constant samples) collapse several levels onto
    # one value; nudge them apart within +-tol so the ordering stays strict.
    levels = levels.copy()
    if np.all(np.diff(levels) > 0):
        return levels
    centre = levels.mean()
    K = levels.size
    spread = np.linspace(-1.0, 1.0, K) * (tol / 2)
    collapsed = np.ptp(levels) <= tol
    if collapsed:
        return centre + spread
    for k in range(1, K):
        if levels[k] <= levels[k - 1]:
            levels[k] = np.nextafter(levels[k - 1], np.inf)
    return levels


def pack_indices(indices, B):
    """Big-endian bit packing of ``B``-bit indices, zero-padded to whole bytes."""
    indices = np.asarray(indices, dtype=np.int64).ravel()
    if indices.size and (indices.min() < 0 or indices.max() >= 2**B):
        raise ContractError(f"index out of range for {B} bits")
    shifts = np.arange(B - 1, -1, -1)
    bits = ((indices[:, None] >> shifts) & 1).astype(np.uint8).ravel()
    return np.packbits(bits).tobytes(), bits.size


def unpack_indices(payload, B, count):
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))[: count * B]
    if bits.size < count * B:
        raise FormatError("bitstream shorter than the declared codeword length")
    weights = 1 << np.arange(B - 1, -1, -1)
    return (bits.reshape(count, B).astype(np.int64) * weights).sum(axis=1)


@dataclass
class Quantized:
    payload: bytes
    n_bits: int
    indices: np.ndarray
    dequantized: np.ndarray


def quantize(cb, s):
    s = np.asarray(s, dtype=np.float64)
    idx = assign(cb.levels, s.ravel())
    payload, n_bits = pack_indices(idx, cb.B)
    return Quantized(payload, n_bits, idx.reshape(s.shape), cb.levels[idx].reshape(s.shape))


def dequantize(cb, payload, M):
    return cb.levels[unpack_indices(payload, cb.B, M)]


def feedback_bits(M, B):
    if M < 1 or B < 1:
        raise ContractError("M and B must be positive")
    return M * B


# --- files ---------------------------------------------------------------------
# Bitstream: b"CLBQ", u8 B, u32 M, packed payload.
# Codebook:  b"CLCB", u8 B, f64 levels[2^B], f64 thresholds[2^B - 1].

def write_bitstream(path, cb, s):
    q = quantize(cb, s)
    Path(path).write_bytes(b"CLBQ" + struct.pack("<BI", cb.B, np.size(s)) + q.payload)
    return q


def read_bitstream(path, cb):
    buf = Path(path).read_bytes()
    if buf[:4] != b"CLBQ":
        raise FormatError(f"{path}: bad magic, not a CLBQ bitstream")
    if len(buf) < 9:
        raise FormatError(f"{path}: truncated header")
    B, M = struct.unpack_from("<BI", buf, 4)
    if B != cb.B:
        raise FormatError(f"{path}: stream uses {B} bits, codebook has {cb.B}")
    payload = buf[9:]
    if len(payload) != (M * B + 7) // 8:
        raise FormatError(f"{path}: payload length {len(payload)} does not match M={M}, B={B}")
    return dequantize(cb, payload, M)


def save_codebook(path, cb):
    Path(path).write_bytes(
        b"CLCB" + struct.pack("<B", cb.B) + cb.levels.astype("<f8").tobytes() + cb.thresholds.astype("<f8").tobytes()
    )


def load_codebook(path):
    buf = Path(path).read_bytes()
    if buf[:4] != b"CLCB" or len(buf) < 5:
        raise FormatError(f"{path}: bad magic, not a CLCB codebook")
    B = buf[4]
    K = 2**B
    if len(buf) != 5 + 8 * (2 * K - 1):
        raise FormatError(f"{path}: wrong size for a {B}-bit codebook")
    arr = np.frombuffer(buf, dtype="<f8", offset=5).astype(np.float64)
    return QuantizerCodebook(B, arr[:K], arr[K:])
