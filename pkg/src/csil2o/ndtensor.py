"""Dense float64 tensors with a dynamic reverse-mode tape.

Every forward operation that touches a tensor with ``requires_grad`` records
its inputs and a local backward rule on the output.  :func:`backward` walks
the recorded graph in reverse topological order and then releases it, so a
fresh forward pass is required before differentiating again.

Broadcasting is deliberately narrow: binary element-wise ops accept either
equal shapes or a 0-d scalar on one side.  Row-wise bias addition goes
through :func:`linear`.
"""

from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import ContractError, DimensionError, FormatError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division is only supported by plain scalars")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)


def _raise_item(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, parents, backward_fn, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    out._op = op
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _binary_shapes(a, b, op):
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not equal and neither is a scalar")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# --- element-wise binary ---------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(a.data * b.data, (a, b), bw, "mul")


def reciprocal(a):
    a = as_tensor(a)
    out = 1.0 / a.data
    return _record(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def neg(a):
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


# --- element-wise unary ----------------------------------------------------

def _fast_sigmoid(x):
    # tanh-based logistic: same values as expit, several times faster on large arrays
    out = np.array(x, dtype=np.float64) * 0.5
    if out.ndim == 0:
        return 0.5 * np.tanh(out) + 0.5
    np.tanh(out, out=out)
    out *= 0.5
    out += 0.5
    return out


def sigmoid(a):
    a = as_tensor(a)
    out = _fast_sigmoid(a.data)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a):
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return _record(out, (a,), lambda g: (g * expit(a.data),), "softplus")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def tabs(a):
    a = as_tensor(a)
    return _record(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def sign(a):
    a = as_tensor(a)
    return _record(np.sign(a.data), (a,), lambda g: (np.zeros_like(g),), "sign")


def max0(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "max0")


relu = max0


def soft_threshold(x, theta):
    """``sign(x) * max(0, |x| - theta)`` as a single fused node."""
    x, theta = as_tensor(x), as_tensor(theta)
    _binary_shapes(x, theta, "soft_threshold")
    if np.any(theta.data < 0):
        raise ContractError("soft_threshold: theta must be non-negative")
    sgn = np.sign(x.data)
    active = np.abs(x.data) > theta.data
    out = np.where(active, x.data - sgn * theta.data, 0.0)

    def bw(g):
        gx = g * active
        return gx, _unbroadcast(-gx * sgn, theta.shape)

    return _record(out, (x, theta), bw, "soft_threshold")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "tanh": tanh,
    "abs": tabs,
    "sign": sign,
    "max0": max0,
}


def elementwise(op, *args):
    """Dispatch a named point-wise op, e.g. ``elementwise("sigmoid", x)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown element-wise op {op!r}") from None
    return fn(*args)


# --- linear algebra and shape ops -------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _record(a.data @ b.data, (a, b), bw, "matmul")


def linear(x, W, b=None):
    """Row-wise affine map ``x @ W.T + b`` for x of shape (rows, in)."""
    x, W = as_tensor(x), as_tensor(W)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {W.shape}")
    out = x.data @ W.data.T
    parents = [x, W]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[0],):
            raise DimensionError(f"linear: bias {b.shape} does not match weight {W.shape}")
        out += b.data
        parents.append(b)

    def bw(g):
        gx = g @ W.data if x.requires_grad else None
        gW = g.T @ x.data if W.requires_grad else None
        if b is None:
            return gx, gW
        return gx, gW, g.sum(axis=0)

    return _record(out, parents, bw, "linear")


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(np.asarray(out, dtype=np.float64), (a,), bw, "sum")


def mean(a):
    a = as_tensor(a)
    return mul(tsum(a), 1.0 / a.size)


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _record(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _record(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, ts, bw, "concat")


def getitem(a, idx):
    a = as_tensor(a)
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] += g
        return (full,)

    return _record(np.array(out, dtype=np.float64), (a,), bw, "getitem")


def spectral_norm_sq(W):
    """Largest eigenvalue of ``W.T @ W`` (squared top singular value), differentiable in ``W``."""
    W = as_tensor(W)
    if W.ndim != 2:
        raise DimensionError(f"spectral_norm_sq expects a matrix, got shape {W.shape}")
    U, S, Vt = np.linalg.svd(W.data, full_matrices=False)
    sigma = S[0]
    u, v = U[:, 0], Vt[0]
    return _record(np.array(sigma * sigma), (W,), lambda g: (g * 2.0 * sigma * np.outer(u, v),), "spectral_norm_sq")


def lstm_cell(pre, c):
    """Fused LSTM gate math.

    ``pre`` holds the (rows, 4h) gate pre-activations in (input, forget,
    cell, output) order and ``c`` the previous cell state.  Returns the
    packed (rows, 2h) array ``[h_new, c_new]``.
    """
    pre, c = as_tensor(pre), as_tensor(c)
    R, four_h = pre.shape
    h = four_h // 4
    if four_h != 4 * h or c.shape != (R, h):
        raise DimensionError(f"lstm_cell: gates {pre.shape} do not match cell state {c.shape}")
    act = _fast_sigmoid(pre.data)
    act[:, 2 * h:3 * h] = np.tanh(pre.data[:, 2 * h:3 * h])
    i, f, g, o = act[:, :h], act[:, h:2 * h], act[:, 2 * h:3 * h], act[:, 3 * h:]
    c_new = f * c.data
    c_new += i * g
    tc = np.tanh(c_new)
    out = np.empty((R, 2 * h))
    np.multiply(o, tc, out=out[:, :h])
    out[:, h:] = c_new

    def bw(grad):
        gh, gc = grad[:, :h], grad[:, h:]
        dc = gh * o
        dc *= 1.0 - tc * tc
        dc += gc
        dpre = np.empty_like(pre.data)
        np.multiply(dc, g, out=dpre[:, :h])
        np.multiply(dc, c.data, out=dpre[:, h:2 * h])
        np.multiply(dc, i, out=dpre[:, 2 * h:3 * h])
        np.multiply(gh, tc, out=dpre[:, 3 * h:])
        # sigmoid' = s(1-s) on the i, f, o blocks; tanh' = 1-g^2 on the cell block
        deriv = act * (1.0 - act)
        deriv[:, 2 * h:3 * h] = 1.0 - g * g
        dpre *= deriv
        return dpre, dc * f

    return _record(out, (pre, c), bw, "lstm_cell")


def split_cols(a, width):
    """Split a (rows, k*width) tensor into k column blocks."""
    a = as_tensor(a)
    k = a.shape[1] // width
    if a.ndim != 2 or k * width != a.shape[1]:
        raise DimensionError(f"split_cols: {a.shape} is not divisible into blocks of {width}")
    outs = []
    for j in range(k):
        lo, hi = j * width, (j + 1) * width

        def bw(g, lo=lo, hi=hi):
            full = np.zeros_like(a.data)
            full[:, lo:hi] = g
            return (full,)

        outs.append(_record(a.data[:, lo:hi].copy(), (a,), bw, "split_cols"))
    return outs


def sum_squares(a):
    """``sum(a * a)`` without materialising an intermediate node."""
    a = as_tensor(a)
    return _record(np.asarray(np.sum(a.data * a.data)), (a,), lambda g: (2.0 * g * a.data,), "sum_squares")


# --- backward ----------------------------------------------------------------

def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``.grad`` on every requires-grad tensor feeding ``loss``.

    Gradients accumulate into existing ``.grad`` arrays.  The graph is
    released afterwards; calling again on the same loss raises.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {getattr(loss, 'shape', None)}")
    if loss._consumed:
        raise ContractError("graph already consumed by a previous backward; re-run the forward pass")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor with requires_grad")

    order = _topo_order(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            g = np.zeros_like(node.data)
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is not None:
            grads = node._backward(g)
            for parent, pg in zip(node._parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg
            node._backward = None
            node._parents = ()
            node._consumed = True
    loss._consumed = True


# --- Adam ----------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, state, lr):
    """One bias-corrected Adam update in place, then zero the grads."""
    for p in params:
        if p.grad is None:
            raise ContractError("adam_step: parameter has no gradient; run backward first")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ContractError("adam_step: parameter list changed since the state was created")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = np.zeros_like(p.data)


# --- checkpoints -------------------------------------------------------------
# Layout (little-endian): b"CL2O", u32 version, u32 count, then per tensor
# u32 name length, UTF-8 name, u32 rank, u64 dims[rank], f64 payload.

CKPT_MAGIC = b"CL2O"
CKPT_VERSION = 1


def save_checkpoint(path, tensors):
    """Write an ordered mapping name -> Tensor/ndarray."""
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path):
    """Read a checkpoint back into an ordered ``{name: ndarray}`` dict."""
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"{path}: truncated checkpoint")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic, not a CL2O checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        out[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(buf):
        raise FormatError(f"{path}: trailing bytes after {count} tensors")
    return out
