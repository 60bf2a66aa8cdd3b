"""Loss, training loop and NMSE evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import ndtensor as nd
from ..errors import ContractError, DimensionError, NumericalError
from ..l2o import decode
from ..solvers import gaussian_matrix, ista_batch
from ..transforms import transform_loss
from .model import CsiL2O, ModelConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    T_unroll: int = 10
    epochs: int = 200
    batch_size: int = 200
    lr: float = 1e-3
    beta: float = 0.01
    seed: int = 0
    patience: int = 50
    pretrain_epochs: int = 0
    clip_norm: float | None = 1.0

    def __post_init__(self):
        if self.beta < 0:
            raise ContractError("beta must be non-negative")
        if self.T_unroll < 1:
            raise ContractError("T_unroll must be at least 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ContractError("batch_size must be positive and epochs non-negative")


@dataclass
class EvalReport:
    nmse_db: float
    objective: list = field(default_factory=list)
    flops: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    bits: int | None = None


@dataclass
class TrainResult:
    model: CsiL2O
    history: list
    best_epoch: int
    best_val_nmse: float
    initial_loss: float
    final_loss: float


def nmse(H_true, H_est):
    """``10 log10 E[||H - H_est||^2 / ||H||^2]`` over the leading axis, in dB.

    A perfect reconstruction returns ``-inf``.
    """
    H_true = np.asarray(H_true, dtype=np.float64)
    H_est = np.asarray(H_est, dtype=np.float64)
    if H_true.shape != H_est.shape:
        raise DimensionError(f"shapes differ: {H_true.shape} vs {H_est.shape}")
    if H_true.ndim == 1:
        H_true, H_est = H_true[None], H_est[None]
    t = H_true.reshape(H_true.shape[0], -1)
    e = H_est.reshape(H_est.shape[0], -1)
    power = np.sum(t * t, axis=1)
    if np.any(power == 0):
        raise ContractError("nmse is undefined for an all-zero true channel")
    ratio = float(np.mean(np.sum((t - e) ** 2, axis=1) / power))
    if ratio == 0.0:
        return -math.inf
    return 10.0 * math.log10(ratio)


def loss(batch, encoder, transform, net, T, beta=0.01, seed=0):
    """Batch-averaged reconstruction error plus ``beta`` times the transform error."""
    h = nd.Tensor(np.asarray(batch, dtype=np.float64))
    s = encoder(h)
    x, _ = decode(net, transform, encoder.W, s, T, seed=seed)
    total = nd.sum_squares(x - h)
    if beta:
        total = total + beta * transform_loss(transform, h)
    return total / h.shape[0]


def _grad_norm(params):
    return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))


def reconstruct(model, H, T, seed=0, batch_size=500):
    """Decode a (count, n) matrix of channels with no graph recording."""
    H = np.asarray(H, dtype=np.float64)
    out = np.empty_like(H)
    traces = []
    with nd.no_grad():
        for lo in range(0, H.shape[0], batch_size):
            chunk = H[lo:lo + batch_size]
            s = chunk @ model.encoder.W.data.T
            x, trace = decode(model.net, model.transform, model.encoder.W, s, T, seed=seed + lo)
            out[lo:lo + batch_size] = x.data
            traces.append(trace)
    return out, traces


def evaluate(model, H, T, seed=0):
    est, traces = reconstruct(model, H, T, seed)
    weights = np.array([len(range(lo, min(lo + 500, len(H)))) for lo in range(0, len(H), 500)], dtype=float)
    objective = np.average(np.array([t.objective for t in traces]), axis=0, weights=weights).tolist()
    return EvalReport(nmse_db=nmse(H, est), objective=objective)


def ista_baseline_nmse(H, M, lam, T, seed=0):
    """NMSE of plain ISTA with a fixed Gaussian sampling matrix."""
    H = np.asarray(H, dtype=np.float64)
    W = gaussian_matrix(M, H.shape[1], seed)
    est = ista_batch(W, H @ W.T, lam, T)
    return nmse(H, est)


def _pretrain_transform(model, H, cfg, rng):
    params = model.transform.parameters()
    if not params:
        return
    state = nd.AdamState()
    for _ in range(cfg.pretrain_epochs):
        order = rng.permutation(len(H))
        for lo in range(0, len(H), cfg.batch_size):
            batch = nd.Tensor(H[order[lo:lo + cfg.batch_size]])
            nd.backward(transform_loss(model.transform, batch) / batch.shape[0])
            nd.adam_step(params, state, cfg.lr)


def _dump_diagnostics(out_dir, epoch, step, batch, value):
    record = {
        "epoch": epoch,
        "step": step,
        "loss": repr(value),
        "batch_mean": float(np.mean(batch)),
        "batch_std": float(np.std(batch)),
        "batch_max_abs": float(np.max(np.abs(batch))),
    }
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "nan_dump.json").write_text(json.dumps(record, indent=2))
    return record


def train(cfg, train_H, val_H, model_cfg=None, model=None, out_dir=None, on_epoch=None):
    """Adam over encoder, transform and parameter network.

    Validation NMSE is measured after every epoch; the best-validation
    weights are restored at the end (and written to ``out_dir/best.ckpt``
    when ``out_dir`` is given).  Training stops early after ``patience``
    epochs without improvement.
    """
    train_H = np.asarray(train_H, dtype=np.float64)
    val_H = np.asarray(val_H, dtype=np.float64)
    if model is None:
        model = CsiL2O(model_cfg or ModelConfig(), seed=cfg.seed)
    if train_H.shape[1] != model.cfg.n:
        raise DimensionError(f"dataset width {train_H.shape[1]} != model n {model.cfg.n}")
    rng = np.random.default_rng(cfg.seed)
    _pretrain_transform(model, train_H, cfg, rng)

    params = model.parameters()
    state = nd.AdamState()
    history = []
    best = (math.inf, -1, model.parameter_arrays())
    initial_loss = None
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_H))
        losses = []
        for lo in range(0, len(train_H), cfg.batch_size):
            batch = train_H[order[lo:lo + cfg.batch_size]]
            value = loss(batch, model.encoder, model.transform, model.net, cfg.T_unroll, cfg.beta, seed=cfg.seed + step)
            v = value.item()
            if not math.isfinite(v):
                record = _dump_diagnostics(out_dir, epoch, step, batch, v)
                raise NumericalError(f"non-finite loss at epoch {epoch}, step {step}: {record}")
            nd.backward(value)
            if cfg.clip_norm is not None:
                norm = _grad_norm(params)
                if norm > cfg.clip_norm:
                    for p in params:
                        p.grad *= cfg.clip_norm / norm
            nd.adam_step(params, state, cfg.lr)
            losses.append(v)
            step += 1
        train_loss = float(np.mean(losses)) if losses else math.nan
        if initial_loss is None:
            initial_loss = losses[0] if losses else math.nan
        val_nmse = evaluate(model, val_H, cfg.T_unroll, seed=cfg.seed).nmse_db
        history.append({"epoch": epoch + 1, "train_loss": train_loss, "val_nmse_db": val_nmse})
        log.info("epoch %d train_loss %.6g val_nmse %.3f dB", epoch + 1, train_loss, val_nmse)
        if on_epoch is not None:
            on_epoch(history[-1])
        if val_nmse < best[0]:
            best = (val_nmse, epoch + 1, model.parameter_arrays())
        elif epoch + 1 - best[1] >= cfg.patience:
            break
    if best[1] > 0:
        model.load_arrays(best[2])
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        model.save(Path(out_dir) / "best.ckpt")
    final = history[-1]["train_loss"] if history else math.nan
    return TrainResult(model, history, best[1], best[0], initial_loss if initial_loss is not None else math.nan, final)


def config_dict(cfg):
    return asdict(cfg)
