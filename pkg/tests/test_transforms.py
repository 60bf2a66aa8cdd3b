import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from csil2o import ndtensor as nd
from csil2o import transforms as tf
from csil2o.errors import ContractError, DimensionError

from conftest import central_diff, rel_err


def test_top_g_examples():
    v = np.array([[0.1, -3.0, 2.0, 0.5]])
    np.testing.assert_array_equal(tf.top_g_mask(v, 2), [[False, True, True, False]])
    tie = np.array([[1.0, -1.0, 1.0]])
    np.testing.assert_array_equal(tf.top_g_mask(tie, 2), [[True, True, False]])


@settings(max_examples=30, deadline=None)
@given(N_i=st.integers(2, 40), data=st.data())
def test_top_g_keeps_exactly_g(N_i, data):
    G = data.draw(st.integers(1, N_i))
    v = np.random.default_rng(N_i).standard_normal((3, N_i))
    mask = tf.top_g_mask(v, G)
    assert (mask.sum(axis=1) == G).all()
    kept_min = np.where(mask, np.abs(v), np.inf).min(axis=1)
    dropped_max = np.where(mask, -np.inf, np.abs(v)).max(axis=1)
    assert (kept_min >= dropped_max).all()


def test_ft_output_sparsity():
    t = tf.SparseTransform(4, hidden=(6, 5), N_i=10, G=3, seed=0)
    out = tf.apply_ft(t, np.random.default_rng(0).standard_normal((7, 8))).data
    assert (np.count_nonzero(out, axis=1) == 3).all()
    assert tf.apply_ft(t, np.ones(8)).shape == (10,)


def _naive_mlp(mlp, x):
    for i, layer in enumerate(mlp.layers):
        W, b = layer.W.data, layer.b.data
        x = np.array([sum(W[o, k] * x[k] for k in range(len(x))) + b[o] for o in range(W.shape[0])])
        if i < len(mlp.layers) - 1:
            x = np.maximum(x, 0)
    return x


def test_fi_matches_naive_loop():
    t = tf.SparseTransform(3, hidden=(5, 4), N_i=7, G=2, seed=1)
    code = np.random.default_rng(1).standard_normal(7)
    np.testing.assert_allclose(tf.apply_fi(t, code).data, _naive_mlp(t.fi, code), atol=1e-13)


def test_width_mismatch():
    t = tf.SparseTransform(3, hidden=(4, 4), N_i=6, G=2, seed=0)
    with pytest.raises(DimensionError):
        tf.apply_ft(t, np.ones(5))
    with pytest.raises(DimensionError):
        tf.apply_fi(t, np.ones(5))
    with pytest.raises(ContractError):
        tf.SparseTransform(3, N_i=6, G=7)


def test_rows_round_trip():
    x = np.arange(2 * 2 * 3 * 4, dtype=float).reshape(2, 24)
    rows = tf.rows_from_vec(x, 3, 4).data
    # row 1 of sample 0: real part of delay row 1 then its imaginary part
    np.testing.assert_array_equal(rows[1], np.r_[x[0, 4:8], x[0, 16:20]])
    np.testing.assert_array_equal(tf.vec_from_rows(rows, 3, 4).data, x)


def test_transform_loss_matches_oracle():
    t = tf.SparseTransform(2, hidden=(5, 5), N_i=6, G=3, seed=4)
    H = np.random.default_rng(4).standard_normal((2, 3, 2))
    rows = [np.r_[H[0, r], H[1, r]] for r in range(3)]
    ref = 0.0
    for r in rows:
        code = _naive_mlp(t.ft, r)
        keep = np.argsort(-np.abs(code), kind="stable")[:3]
        sparse = np.zeros_like(code)
        sparse[keep] = code[keep]
        ref += np.sum((r - _naive_mlp(t.fi, sparse)) ** 2)
    assert tf.transform_loss(t, H).item() == pytest.approx(ref, rel=1e-12)
    assert tf.transform_loss(tf.IdentityTransform(), H).item() == 0.0


def test_transform_loss_row_permutation_invariant():
    t = tf.SparseTransform(2, hidden=(5, 5), N_i=6, G=3, seed=4)
    H = np.random.default_rng(5).standard_normal((2, 4, 2))
    perm = [2, 0, 3, 1]
    a = tf.transform_loss(t, H).item()
    b = tf.transform_loss(t, H[:, perm]).item()
    assert a == pytest.approx(b, rel=1e-12)


def test_transform_gradients_match_fd():
    t = tf.SparseTransform(2, hidden=(4, 4), N_i=5, G=3, seed=7)
    H = np.random.default_rng(7).standard_normal((2, 3, 2))
    nd.backward(tf.transform_loss(t, H))
    for p in t.parameters()[:4] + t.parameters()[-2:]:
        analytic = p.grad.copy()

        def f(v, p=p):
            old = p.data
            p.data = v
            with nd.no_grad():
                out = tf.transform_loss(t, H).item()
            p.data = old
            return out

        assert rel_err(analytic, central_diff(f, p.data)) < 1e-4
