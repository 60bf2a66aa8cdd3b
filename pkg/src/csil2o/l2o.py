"""Element-wise LSTM learned optimizer for the CSI reconstruction problem.

The decoder minimises ``0.5 * ||s - W x||^2`` plus a sparsity prior by a
momentum-style proximal update whose per-coordinate step sizes, momentum,
mixing weights, biases and thresholds are emitted every iteration by a
small LSTM.  The same LSTM weights are applied to every coordinate, so a
trained network runs unchanged for any problem size.

Batch convention: ``x``, ``y`` and every emitted parameter are (batch, n)
tensors, ``W`` is (M, n) and ``s`` is (batch, M).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndtensor as nd
from .errors import ContractError, DimensionError
from .layers import LSTMLayer, Linear
from .solvers import lipschitz
from .transforms import apply_fi, apply_ft, rows_from_vec, vec_from_rows

HEADS = ("p", "a", "b", "b1", "b2", "theta")


@dataclass
class StepParams:
    p: nd.Tensor
    a: nd.Tensor
    b: nd.Tensor
    b1: nd.Tensor
    b2: nd.Tensor
    theta: nd.Tensor


@dataclass
class LSTMState:
    h: list
    c: list

    @property
    def rows(self):
        return self.h[0].shape[0]

    def as_array(self):
        """Hidden and cell stacks as (rows, num_layers, hidden) arrays."""
        return (np.stack([t.data for t in self.h], axis=1), np.stack([t.data for t in self.c], axis=1))


@dataclass
class L2OState:
    x: nd.Tensor
    y: nd.Tensor
    lstm: LSTMState | None
    t: int = 0


@dataclass
class Trace:
    objective: list = field(default_factory=list)
    displacement: list = field(default_factory=list)
    b1_norm: list = field(default_factory=list)
    b2_norm: list = field(default_factory=list)


def grad_f(W, s, v):
    """Gradient of ``0.5 * ||s - W v||^2`` for batched ``v``; works on Tensors and arrays."""
    if isinstance(W, nd.Tensor) or isinstance(s, nd.Tensor) or isinstance(v, nd.Tensor):
        W, s, v = nd.as_tensor(W), nd.as_tensor(s), nd.as_tensor(v)
        if v.ndim != 2 or v.shape[1] != W.shape[1] or s.shape != (v.shape[0], W.shape[0]):
            raise DimensionError(f"grad_f: W {W.shape}, s {s.shape}, v {v.shape} are inconsistent")
        return nd.matmul(nd.matmul(v, nd.transpose(W)) - s, W)
    W, s, v = np.asarray(W), np.asarray(s), np.asarray(v)
    if W.shape[1] != v.shape[-1] or W.shape[0] != s.shape[-1]:
        raise DimensionError(f"grad_f: W {W.shape}, s {s.shape}, v {v.shape} are inconsistent")
    return (v @ W.T - s) @ W


class ParamNet:
    """Two-layer LSTM, one ReLU trunk layer and six scalar heads, shared by all coordinates."""

    def __init__(self, hidden=20, num_layers=2, seed=0, theta_init=1e-3):
        rng = np.random.default_rng(seed)
        self.hidden = hidden
        self.lstm = [LSTMLayer(2 if i == 0 else hidden, hidden, rng) for i in range(num_layers)]
        self.trunk = Linear(hidden, hidden, rng)
        self.heads = {name: Linear(hidden, 1, rng) for name in HEADS}
        # Additive terms and the mixing weight start at zero, and the threshold
        # at a small positive value, so the untrained decoder starts close to
        # an ISTA step with momentum.
        for name in ("b", "b1", "b2", "theta"):
            self.heads[name].W.data[:] = 0.0
        self.heads["theta"].b.data[:] = np.log(np.expm1(theta_init))

    def parameters(self):
        ps = [p for layer in self.lstm for p in layer.parameters()]
        ps += self.trunk.parameters()
        for name in HEADS:
            ps += self.heads[name].parameters()
        return ps

    def named_parameters(self):
        out = {}
        for i, layer in enumerate(self.lstm):
            out.update(layer.named_parameters(f"l2o.lstm.layer{i}"))
        out.update(self.trunk.named_parameters("l2o.trunk"))
        for name in HEADS:
            out.update(self.heads[name].named_parameters(f"l2o.head.{name}"))
        return out

    def parameter_count(self):
        return sum(p.size for p in self.parameters())

    def flops_per_coordinate(self):
        """Weights touched per coordinate per iteration (one FLOP each)."""
        lstm = sum(layer.flops() for layer in self.lstm)
        return lstm + self.trunk.W.size + sum(h.W.size for h in self.heads.values())

    def init_state(self, rows, rng):
        h = [nd.Tensor(rng.standard_normal((rows, self.hidden))) for _ in self.lstm]
        c = [nd.Tensor(np.zeros((rows, self.hidden))) for _ in self.lstm]
        return LSTMState(h, c)

    def emit(self, x, g, state, p_max, a_max):
        B, n = x.shape
        R = B * n
        if state is None or state.rows != R:
            raise DimensionError(f"LSTM state has {None if state is None else state.rows} rows, need {R}")
        inp = nd.concat([nd.reshape(x, (R, 1)), nd.reshape(g, (R, 1))], axis=1)
        hs, cs = [], []
        for layer, h, c in zip(self.lstm, state.h, state.c):
            h, c = layer(inp, h, c)
            hs.append(h)
            cs.append(c)
            inp = h
        z = nd.max0(self.trunk(inp))
        Wh = nd.concat([self.heads[k].W for k in HEADS], axis=0)
        bh = nd.concat([self.heads[k].b for k in HEADS], axis=0)
        out = nd.linear(z, Wh, bh)

        def col(j):
            return nd.reshape(out[:, j], (B, n))

        params = StepParams(
            p=nd.sigmoid(col(0)) * p_max,
            a=nd.sigmoid(col(1)) * a_max,
            b=col(2),
            b1=col(3),
            b2=col(4),
            theta=nd.softplus(col(5)),
        )
        return params, LSTMState(hs, cs)


class FrozenParams:
    """Constant step parameters that reduce the update to ISTA.

    With ``a = b = b1 = b2 = 0``, ``p = alpha`` and ``theta = alpha * lambda``
    one decoder step is exactly one ISTA step.
    """

    def __init__(self, alpha, theta, a=0.0, b=0.0, b1=0.0, b2=0.0):
        self.values = dict(p=alpha, a=a, b=b, b1=b1, b2=b2, theta=theta)

    def parameters(self):
        return []

    def named_parameters(self):
        return {}

    def init_state(self, rows, rng):
        return None

    def emit(self, x, g, state, p_max, a_max):
        shape = x.shape
        return StepParams(**{k: nd.Tensor(np.broadcast_to(v, shape)) for k, v in self.values.items()}), state


def emit_params(net, x, g, state, p_max=1.0, a_max=1.0):
    """Run the parameter network one step for every coordinate.

    Accepts (n,) arrays for a single problem or (batch, n) tensors.
    """
    single = np.ndim(x.data if isinstance(x, nd.Tensor) else x) == 1
    x, g = nd.as_tensor(x), nd.as_tensor(g)
    if single:
        x = nd.reshape(x, (1, x.shape[0]))
        g = nd.reshape(g, (1, g.shape[0]))
    if x.shape != g.shape:
        raise DimensionError(f"x {x.shape} and gradient {g.shape} differ")
    params, state = net.emit(x, g, state, p_max, a_max)
    if single:
        params = StepParams(**{k: nd.reshape(getattr(params, k), (x.shape[1],)) for k in HEADS})
    return params, state


def prox(z, theta, transform):
    """Soft-threshold ``z``; with a learned transform, threshold its sparse code.

    In the transform domain each row uses the mean of ``theta`` over that
    row's coordinates.
    """
    if transform is None or transform.is_identity:
        return nd.soft_threshold(z, theta)
    n = z.shape[1]
    N_t = transform.N_t
    N_a = n // (2 * N_t)
    rows = rows_from_vec(z, N_a, N_t)
    code = apply_ft(transform, rows)
    spread = nd.Tensor(np.full((2 * N_t, transform.N_i), 1.0 / (2 * N_t)))
    theta_rows = nd.matmul(rows_from_vec(theta, N_a, N_t), spread)
    code = nd.soft_threshold(code, theta_rows)
    return vec_from_rows(apply_fi(transform, code), N_a, N_t)


def l2o_step(state, params, W, s, transform=None):
    x, y = state.x, state.y
    if x.shape != y.shape or x.shape != params.p.shape:
        raise DimensionError(f"state x {x.shape}, y {y.shape} and params {params.p.shape} disagree")
    x_hat = x - params.p * grad_f(W, s, x)
    y_hat = y - params.p * grad_f(W, s, y)
    z = x_hat + params.b * (y_hat - x_hat) - params.b1
    x_new = prox(z, params.theta, transform)
    y_new = x_new + params.a * (x_new - x) + params.b2
    return L2OState(x_new, y_new, state.lstm, state.t + 1)


def step_bounds(W):
    """``(p_max, a_max)`` for a sampling matrix: ``2 / L`` and 1.

    For a trainable ``W`` the bound is a scalar tensor, so the loss sees how
    the step cap moves with the encoder.
    """
    if isinstance(W, nd.Tensor) and W.requires_grad and nd.grad_enabled():
        return 2.0 * nd.reciprocal(nd.spectral_norm_sq(W)), 1.0
    L = lipschitz(W.data if isinstance(W, nd.Tensor) else W)
    return 2.0 / L, 1.0


def sparsity_objective(W, s, x, lam, transform=None):
    """Per-sample ``0.5||s - Wx||^2 + lam * ||code||_1``, as a numpy array."""
    W = W.data if isinstance(W, nd.Tensor) else np.asarray(W)
    s = s.data if isinstance(s, nd.Tensor) else np.asarray(s)
    x = x.data if isinstance(x, nd.Tensor) else np.asarray(x)
    r = s - x @ W.T
    fid = 0.5 * np.sum(r * r, axis=-1)
    if lam == 0:
        return fid
    if transform is None or transform.is_identity:
        reg = np.abs(x).sum(axis=-1)
    else:
        N_t = transform.N_t
        N_a = x.shape[-1] // (2 * N_t)
        with nd.no_grad():
            code = apply_ft(transform, rows_from_vec(x.reshape(-1, x.shape[-1]), N_a, N_t)).data
        reg = np.abs(code).reshape(x.reshape(-1, x.shape[-1]).shape[0], -1).sum(axis=-1).reshape(fid.shape)
    return fid + lam * reg


def decode(net, transform, W, s, T, seed=0, lam=0.0, x0=None, bounds=None):
    """Unroll ``T`` learned-optimizer iterations.

    Returns ``(x_T, trace)``; ``x_T`` keeps its graph so a loss on it can be
    back-propagated into the network, the transform and ``W``.
    """
    if T < 1:
        raise ContractError("decode needs at least one iteration")
    W = nd.as_tensor(W)
    single = np.ndim(s.data if isinstance(s, nd.Tensor) else s) == 1
    s = nd.as_tensor(s)
    if single:
        s = nd.reshape(s, (1, s.shape[0]))
    if s.shape[1] != W.shape[0]:
        raise DimensionError(f"codeword length {s.shape[1]} != W rows {W.shape[0]}")
    B, n = s.shape[0], W.shape[1]
    p_max, a_max = step_bounds(W) if bounds is None else bounds
    x = nd.matmul(s, W) if x0 is None else nd.as_tensor(np.broadcast_to(x0, (B, n)).copy())
    state = L2OState(x, x, net.init_state(B * n, np.random.default_rng(seed)), 0)
    trace = Trace()
    for _ in range(T):
        g = grad_f(W, s, state.x)
        params, lstm_state = net.emit(state.x, g, state.lstm, p_max, a_max)
        state.lstm = lstm_state
        prev = state.x
        state = l2o_step(state, params, W, s, transform)
        trace.objective.append(float(np.mean(sparsity_objective(W, s, state.x, lam, transform))))
        trace.displacement.append(float(np.mean(np.linalg.norm(state.x.data - prev.data, axis=1))))
        trace.b1_norm.append(float(np.mean(np.linalg.norm(params.b1.data, axis=1))))
        trace.b2_norm.append(float(np.mean(np.linalg.norm(params.b2.data, axis=1))))
    x_final = nd.reshape(state.x, (n,)) if single else state.x
    return x_final, trace


def convergence_report(trace, threshold=1e-4):
    """Summarise a decode trace: final displacement, bias norms, first iteration below ``threshold``."""
    if not trace.displacement:
        raise ContractError("empty trace")
    disp = np.asarray(trace.displacement)
    below = np.flatnonzero(disp < threshold)
    return {
        "iterations": len(disp),
        "last_displacement": float(disp[-1]),
        "displacement": disp.tolist(),
        "b1_norm": list(trace.b1_norm),
        "b2_norm": list(trace.b2_norm),
        "first_below": int(below[0]) + 1 if below.size else None,
        "threshold": threshold,
    }
