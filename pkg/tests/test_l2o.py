import math

import numpy as np
import pytest

from csil2o import l2o
from csil2o import ndtensor as nd
from csil2o import solvers as sv
from csil2o.errors import ContractError
from csil2o.transforms import IdentityTransform, SparseTransform

from conftest import central_diff, rel_err


def _sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def _scalar_emit(net, x, g, hs, cs, p_max, a_max):
    """Loop-level reference of the parameter network for one coordinate."""
    inp = [x, g]
    new_h, new_c = [], []
    for layer, h, c in zip(net.lstm, hs, cs):
        H = layer.hidden_size
        Wih, Whh, bih, bhh = (t.data for t in layer.parameters())
        pre = [
            sum(Wih[k, j] * inp[j] for j in range(len(inp))) + sum(Whh[k, j] * h[j] for j in range(H)) + bih[k] + bhh[k]
            for k in range(4 * H)
        ]
        i = [_sig(v) for v in pre[:H]]
        f = [_sig(v) for v in pre[H:2 * H]]
        gg = [math.tanh(v) for v in pre[2 * H:3 * H]]
        o = [_sig(v) for v in pre[3 * H:]]
        c2 = [f[k] * c[k] + i[k] * gg[k] for k in range(H)]
        h2 = [o[k] * math.tanh(c2[k]) for k in range(H)]
        new_h.append(h2)
        new_c.append(c2)
        inp = h2
    W, b = net.trunk.W.data, net.trunk.b.data
    z = [max(0.0, sum(W[k, j] * inp[j] for j in range(len(inp))) + b[k]) for k in range(W.shape[0])]
    raw = {}
    for name in l2o.HEADS:
        hw, hb = net.heads[name].W.data, net.heads[name].b.data
        raw[name] = sum(hw[0, j] * z[j] for j in range(len(z))) + hb[0]
    return {
        "p": _sig(raw["p"]) * p_max,
        "a": _sig(raw["a"]) * a_max,
        "b": raw["b"],
        "b1": raw["b1"],
        "b2": raw["b2"],
        "theta": math.log1p(math.exp(raw["theta"])),
    }, new_h, new_c


def _randomize(net, rng, scale=0.5):
    for p in net.parameters():
        p.data = rng.standard_normal(p.shape) * scale


def test_emit_matches_scalar_loop_oracle():
    rng = np.random.default_rng(0)
    net = l2o.ParamNet(hidden=3, seed=1)
    _randomize(net, rng)
    x, g = rng.standard_normal(4), rng.standard_normal(4)
    state = net.init_state(4, np.random.default_rng(9))
    h0, c0 = state.as_array()
    params, new = l2o.emit_params(net, x, g, state, p_max=2.0, a_max=1.0)
    h1, c1 = new.as_array()
    for j in range(4):
        ref, rh, rc = _scalar_emit(net, x[j], g[j], h0[j], c0[j], 2.0, 1.0)
        for name in l2o.HEADS:
            assert abs(getattr(params, name).data[j] - ref[name]) < 1e-12
        np.testing.assert_allclose(h1[j], rh, atol=1e-12)
        np.testing.assert_allclose(c1[j], rc, atol=1e-12)


def test_zero_head_weights_give_half_p_max():
    net = l2o.ParamNet(hidden=4, seed=0)
    for name in l2o.HEADS:
        net.heads[name].W.data[:] = 0
        net.heads[name].b.data[:] = 0
    params, _ = l2o.emit_params(net, np.ones(5), np.ones(5), net.init_state(5, np.random.default_rng(0)), p_max=3.0)
    np.testing.assert_allclose(params.p.data, 1.5)
    np.testing.assert_allclose(params.theta.data, math.log(2.0))


def test_initial_heads():
    net = l2o.ParamNet(hidden=4, seed=0, theta_init=1e-3)
    params, _ = l2o.emit_params(net, np.ones(3), -np.ones(3), net.init_state(3, np.random.default_rng(0)))
    np.testing.assert_allclose(params.theta.data, 1e-3, rtol=1e-12)
    for name in ("b", "b1", "b2"):
        np.testing.assert_array_equal(getattr(params, name).data, 0.0)


def test_permutation_equivariance():
    rng = np.random.default_rng(3)
    net = l2o.ParamNet(hidden=4, seed=2)
    _randomize(net, rng)
    x, g = rng.standard_normal(6), rng.standard_normal(6)
    perm = rng.permutation(6)
    st = net.init_state(6, np.random.default_rng(1))
    h, c = st.as_array()
    st_perm = l2o.LSTMState([nd.Tensor(h[perm, k]) for k in range(2)], [nd.Tensor(c[perm, k]) for k in range(2)])
    a, _ = l2o.emit_params(net, x, g, st)
    b, _ = l2o.emit_params(net, x[perm], g[perm], st_perm)
    for name in l2o.HEADS:
        np.testing.assert_allclose(getattr(a, name).data[perm], getattr(b, name).data, atol=1e-14)


def _problem(seed, M=16, n=64, lam=0.05):
    W = sv.gaussian_matrix(M, n, seed)
    s = np.random.default_rng(seed).standard_normal(M)
    return sv.LassoProblem(W, s, lam)


def test_frozen_params_reduce_to_ista():
    p = _problem(0)
    frozen = l2o.FrozenParams(p.alpha, p.alpha * p.lam)
    state = l2o.L2OState(nd.Tensor(np.zeros((1, p.n))), nd.Tensor(np.zeros((1, p.n))), None)
    x = np.zeros(p.n)
    for _ in range(20):
        params, _ = frozen.emit(state.x, None, None, 0, 0)
        state = l2o.l2o_step(state, params, p.W, p.s[None], IdentityTransform())
        x = sv.ista_step(p, x)
        assert np.max(np.abs(state.x.data[0] - x)) < 1e-12


def test_fixed_point_of_reduction():
    p = _problem(1, M=8, n=16)
    x_star = sv.solve_oracle(p)
    frozen = l2o.FrozenParams(p.alpha, p.alpha * p.lam)
    xs = nd.Tensor(x_star[None])
    params, _ = frozen.emit(xs, None, None, 0, 0)
    out = l2o.l2o_step(l2o.L2OState(xs, xs, None), params, p.W, p.s[None])
    assert np.max(np.abs(out.x.data[0] - x_star)) < 1e-8


def test_b_equal_one_uses_y_gradient_step():
    rng = np.random.default_rng(2)
    p = _problem(2, M=6, n=10)
    x, y = rng.standard_normal((1, 10)), rng.standard_normal((1, 10))
    params = l2o.StepParams(*(nd.Tensor(np.full((1, 10), v)) for v in (p.alpha, 0.0, 1.0, 0.0, 0.0, 0.0)))
    out = l2o.l2o_step(l2o.L2OState(nd.Tensor(x), nd.Tensor(y), None), params, p.W, p.s[None])
    np.testing.assert_allclose(out.x.data, y - p.alpha * l2o.grad_f(p.W, p.s[None], y), atol=1e-14)


def test_decode_is_deterministic_and_dimension_agnostic():
    net = l2o.ParamNet(hidden=4, seed=0)
    for n in (32, 128, 512):
        W = sv.gaussian_matrix(n // 4, n, 0)
        s = np.random.default_rng(n).standard_normal((2, n // 4))
        with nd.no_grad():
            a, tr = l2o.decode(net, IdentityTransform(), W, s, 3, seed=5)
            b, _ = l2o.decode(net, IdentityTransform(), W, s, 3, seed=5)
        assert a.shape == (2, n)
        assert np.isfinite(a.data).all()
        np.testing.assert_array_equal(a.data, b.data)
        assert len(tr.displacement) == 3


def test_decode_contracts():
    net = l2o.ParamNet(hidden=2, seed=0)
    with pytest.raises(ContractError):
        l2o.decode(net, None, np.eye(2), np.ones(2), 0)


def test_convergence_report():
    tr = l2o.Trace(displacement=[1.0, 1e-3, 1e-5, 1e-6], b1_norm=[0] * 4, b2_norm=[0] * 4)
    rep = l2o.convergence_report(tr)
    assert rep["first_below"] == 3
    assert rep["iterations"] == 4


def test_learned_prox_with_identity_like_theta():
    t = SparseTransform(2, hidden=(4, 4), N_i=6, G=6, seed=0)
    z = nd.Tensor(np.random.default_rng(0).standard_normal((1, 8)))
    out = l2o.prox(z, nd.Tensor(np.zeros((1, 8))), t)
    # zero threshold and G = N_i: prox is the plain autoencoder round trip
    from csil2o.transforms import apply_fi, apply_ft, rows_from_vec, vec_from_rows
    ref = vec_from_rows(apply_fi(t, apply_ft(t, rows_from_vec(z, 2, 2))), 2, 2)
    np.testing.assert_allclose(out.data, ref.data, atol=1e-14)


def test_decode_gradient_wrt_network_matches_fd():
    rng = np.random.default_rng(4)
    net = l2o.ParamNet(hidden=3, seed=4)
    W = sv.gaussian_matrix(6, 12, 4)
    S = rng.standard_normal((2, 6))
    target = rng.standard_normal((2, 12))

    def run():
        x, _ = l2o.decode(net, IdentityTransform(), W, S, 3, seed=1)
        return nd.sum_squares(x - nd.Tensor(target))

    nd.backward(run())
    for p in (net.lstm[0].Wih, net.trunk.W, net.heads["p"].W, net.heads["theta"].b):
        analytic = p.grad.copy()

        def f(v, p=p):
            old = p.data
            p.data = v
            with nd.no_grad():
                out = run().item()
            p.data = old
            return out

        assert rel_err(analytic, central_diff(f, p.data)) < 1e-4
