"""Synthetic multipath CSI, angular-delay sparsification and dataset files.

A channel is the ``N_c x N_t`` spatial-frequency matrix seen across OFDM
subcarriers and base-station antennas.  Two unitary DFTs move it to the
angular-delay domain, where only the first ``N_a`` delay rows carry
meaningful energy; those rows, split into real and imaginary planes, are
what the encoder consumes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DimensionError, FormatError

SPLITS = ("train", "val", "test")
# Index offsets keep the per-sample seeds of different splits disjoint.
SPLIT_OFFSETS = {"train": 0, "val": 10_000_000, "test": 20_000_000}


@dataclass(frozen=True)
class GenConfig:
    N_c: int = 64
    N_t: int = 8
    N_a: int = 8
    n_paths: int = 3
    delay_spread: float = 0.125
    angle_spread: float = np.pi / 8
    seed: int = 0
    fractional_delays: bool = False
    power_decay: float = 1.0

    def __post_init__(self):
        for name in ("N_c", "N_t", "N_a", "n_paths"):
            if int(getattr(self, name)) < 1:
                raise ContractError(f"GenConfig.{name} must be a positive integer")
        if self.N_a > self.N_c:
            raise ContractError(f"N_a={self.N_a} exceeds N_c={self.N_c}")
        if not 0.0 < self.delay_spread <= 1.0:
            raise ContractError("delay_spread must lie in (0, 1]")
        if self.angle_spread <= 0:
            raise ContractError("angle_spread must be positive")
        if self.seed < 0:
            raise ContractError("seed must be non-negative")
        if self.power_decay < 0:
            raise ContractError("power_decay must be non-negative")

    @property
    def n(self):
        """Length of the real channel vector, ``2 * N_a * N_t``."""
        return 2 * self.N_a * self.N_t


@dataclass
class ChannelSample:
    H: np.ndarray | None
    H_trunc: np.ndarray
    h_vec: np.ndarray


@dataclass
class Dataset:
    samples: list
    split: str
    config: GenConfig
    _matrix: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.samples)

    def matrix(self):
        """All ``h_vec`` rows stacked into a (count, n) array."""
        if self._matrix is None or self._matrix.shape[0] != len(self.samples):
            n = self.config.n
            self._matrix = np.stack([s.h_vec for s in self.samples]) if self.samples else np.zeros((0, n))
        return self._matrix


def delay_dft(N_c):
    """Unitary DFT that maps a path of integer delay ``d`` to row ``d``."""
    k = np.arange(N_c)
    return np.exp(2j * np.pi * np.outer(k, k) / N_c) / np.sqrt(N_c)


def angle_dft(N_t):
    """Unitary DFT whose column ``q`` matches a steering vector with sin(angle) = 2q/N_t."""
    m = np.arange(N_t)
    return np.exp(2j * np.pi * np.outer(m, m) / N_t) / np.sqrt(N_t)


def steering(angle, N_t):
    """Half-wavelength ULA response."""
    return np.exp(-1j * np.pi * np.arange(N_t) * np.sin(angle))


def multipath_channel(gains, delays, angles, N_c, N_t):
    """Sum of rank-one paths; ``delays`` are in units of subcarrier-spacing bins."""
    gains = np.atleast_1d(np.asarray(gains, dtype=np.complex128))
    delays = np.atleast_1d(np.asarray(delays, dtype=np.float64))
    angles = np.atleast_1d(np.asarray(angles, dtype=np.float64))
    if not gains.shape == delays.shape == angles.shape:
        raise DimensionError("gains, delays and angles must have equal lengths")
    k = np.arange(N_c)
    freq = np.exp(-2j * np.pi * np.outer(k, delays) / N_c)  # N_c x L
    ant = np.exp(-1j * np.pi * np.outer(np.sin(angles), np.arange(N_t)))  # L x N_t
    return (freq * gains) @ ant


def to_angular_delay(H):
    N_c, N_t = H.shape
    return delay_dft(N_c) @ H @ angle_dft(N_t)


def from_angular_delay(Hp):
    N_c, N_t = Hp.shape
    return delay_dft(N_c).conj().T @ Hp @ angle_dft(N_t).conj().T


def sparsify_truncate(H, N_a):
    """Real/imag planes (2, N_a, N_t) of the first ``N_a`` angular-delay rows."""
    H = np.asarray(H)
    if H.ndim != 2:
        raise DimensionError(f"expected a 2-d channel matrix, got shape {H.shape}")
    if N_a > H.shape[0] or N_a < 1:
        raise DimensionError(f"N_a={N_a} must lie in [1, N_c={H.shape[0]}]")
    Hp = to_angular_delay(H)[:N_a]
    return np.stack([Hp.real, Hp.imag])


def flatten(H_trunc):
    """Row-major real plane followed by row-major imaginary plane."""
    return np.ascontiguousarray(H_trunc, dtype=np.float64).reshape(-1)


def unflatten(h_vec, N_a, N_t):
    h_vec = np.asarray(h_vec, dtype=np.float64)
    if h_vec.shape[-1] != 2 * N_a * N_t:
        raise DimensionError(f"h_vec length {h_vec.shape[-1]} != 2*{N_a}*{N_t}")
    return h_vec.reshape(h_vec.shape[:-1] + (2, N_a, N_t))


def draw_paths(cfg, rng):
    """Random (gains, delays, angles) for one channel realisation."""
    L = cfg.n_paths
    gains = (rng.standard_normal(L) + 1j * rng.standard_normal(L)) / np.sqrt(2.0)
    span = cfg.delay_spread * cfg.N_c
    if cfg.fractional_delays:
        delays = rng.uniform(0.0, span, L)
    else:
        delays = rng.integers(0, max(1, int(np.floor(span))), L).astype(np.float64)
    if cfg.power_decay > 0:
        # exponential power-delay profile: path power ~ exp(-delay / power_decay)
        gains = gains * np.exp(-delays / (2.0 * cfg.power_decay))
    if cfg.angle_spread >= np.pi:
        angles = rng.uniform(-np.pi / 2, np.pi / 2, L)
    else:
        centre = rng.uniform(-np.pi / 2, np.pi / 2)
        angles = centre + rng.uniform(-cfg.angle_spread / 2, cfg.angle_spread / 2, L)
    return gains, delays, angles


def synthesize(cfg, index=0):
    """One unit-Frobenius-norm channel sample seeded by ``cfg.seed + index``."""
    rng = np.random.default_rng(cfg.seed + index)
    gains, delays, angles = draw_paths(cfg, rng)
    H = multipath_channel(gains, delays, angles, cfg.N_c, cfg.N_t)
    H = H / np.linalg.norm(H)
    H_trunc = sparsify_truncate(H, cfg.N_a)
    return ChannelSample(H=H, H_trunc=H_trunc, h_vec=flatten(H_trunc))


def generate(cfg, count, split="train"):
    if split not in SPLITS:
        raise ContractError(f"unknown split {split!r}")
    base = SPLIT_OFFSETS[split]
    return Dataset([synthesize(cfg, base + i) for i in range(count)], split, cfg)


def energy_fraction(H, N_a):
    """Share of the angular-delay energy kept by truncating to ``N_a`` rows."""
    e = np.abs(to_angular_delay(np.asarray(H))) ** 2
    return float(e[:N_a].sum() / e.sum())


# --- dataset files -----------------------------------------------------------
# Little-endian: b"CLDS", u32 version, u32 N_c, N_t, N_a, n_paths,
# f64 delay_spread, angle_spread, u64 seed, u8 fractional_delays,
# f64 power_decay, u8 split, u64 count, then count * n f64 h_vec payloads.

DS_MAGIC = b"CLDS"
DS_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIddQBdBQ")


def save_dataset(d, path):
    cfg = d.config
    header = _HEADER.pack(
        DS_MAGIC, DS_VERSION, cfg.N_c, cfg.N_t, cfg.N_a, cfg.n_paths,
        float(cfg.delay_spread), float(cfg.angle_spread), cfg.seed,
        int(cfg.fractional_delays), float(cfg.power_decay), SPLITS.index(d.split), len(d),
    )
    payload = np.ascontiguousarray(d.matrix(), dtype="<f8").tobytes()
    Path(path).write_bytes(header + payload)


def load_dataset(path):
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != DS_MAGIC:
        raise FormatError(f"{path}: bad magic, not a CLDS dataset")
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    (_, version, N_c, N_t, N_a, n_paths, ds, aspread, seed, frac, decay, split, count) = _HEADER.unpack_from(buf)
    if version != DS_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    if split >= len(SPLITS):
        raise FormatError(f"{path}: bad split code {split}")
    try:
        cfg = GenConfig(N_c, N_t, N_a, n_paths, ds, aspread, seed, bool(frac), decay)
    except ContractError as exc:
        raise FormatError(f"{path}: invalid config: {exc}") from None
    n = cfg.n
    expected = _HEADER.size + 8 * n * count
    if len(buf) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(buf)}")
    mat = np.frombuffer(buf, dtype="<f8", offset=_HEADER.size).reshape(count, n).astype(np.float64)
    samples = [ChannelSample(H=None, H_trunc=unflatten(row, N_a, N_t), h_vec=row) for row in mat]
    return Dataset(samples, SPLITS[split], cfg, _matrix=mat)
