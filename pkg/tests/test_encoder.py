import numpy as np
import pytest

from csil2o import encoder as enc
from csil2o import ndtensor as nd
from csil2o.errors import ContractError, DimensionError


def test_selector_rows():
    e = enc.LinearEncoder(np.array([[1.0, 0, 0, 0], [0, 0, 1.0, 0]]))
    cw = enc.encode(e, np.array([3.0, 4.0, 5.0, 6.0]))
    np.testing.assert_array_equal(cw.s, [3.0, 5.0])
    assert cw.compression_ratio == 0.5


def test_matches_loop_oracle(rng):
    e = enc.init_kaiming(5, 12, seed=1)
    h = rng.standard_normal(12)
    ref = [sum(e.W.data[i, j] * h[j] for j in range(12)) for i in range(5)]
    np.testing.assert_allclose(enc.encode(e, h).s, ref, atol=1e-13)
    batch = rng.standard_normal((3, 12))
    np.testing.assert_allclose(e(batch).data[1], enc.encode(e, batch[1]).s, atol=1e-13)


def test_linearity(rng):
    e = enc.init_kaiming(4, 10, seed=0)
    a, b = rng.standard_normal(10), rng.standard_normal(10)
    np.testing.assert_allclose(enc.encode(e, 2 * a - b).s, 2 * enc.encode(e, a).s - enc.encode(e, b).s, atol=1e-12)


def test_kaiming_statistics():
    W = enc.init_kaiming(256, 512, seed=0).W.data
    assert abs(W.mean()) < 0.005
    assert W.var() == pytest.approx(2 / 512, rel=0.02)


@pytest.mark.parametrize("M,expected", [(256, 524288), (128, 262144), (64, 131072), (32, 65536)])
def test_encoder_flops(M, expected):
    assert enc.encoder_flops(32, 32, M) == expected
    assert enc.flops(enc.init_kaiming(M, 2048, seed=0)) == expected


def test_contracts():
    with pytest.raises(ContractError):
        enc.LinearEncoder(np.ones((5, 4)))
    with pytest.raises(ContractError):
        enc.encoder_flops(8, 8, 0)
    with pytest.raises(DimensionError):
        enc.encode(enc.init_kaiming(2, 4, 0), np.ones(5))


def test_gradient_wrt_weights(rng):
    e = enc.init_kaiming(3, 6, seed=2)
    h = rng.standard_normal((4, 6))
    nd.backward(nd.sum_squares(e(h)))
    np.testing.assert_allclose(e.W.grad, 2 * (h @ e.W.data.T).T @ h, atol=1e-12)


def test_resize_keeps_leading_rows():
    e = enc.init_kaiming(8, 16, seed=0)
    small = enc.resize(e, 4, seed=1)
    big = enc.resize(e, 12, seed=1)
    np.testing.assert_array_equal(small.W.data, e.W.data[:4])
    np.testing.assert_array_equal(big.W.data[:8], e.W.data)
    np.testing.assert_array_equal(big.W.data, enc.resize(e, 12, seed=1).W.data)
