import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from csil2o import quantize as q
from csil2o.errors import ContractError, FormatError


def test_one_bit_uniform():
    x = np.random.default_rng(0).uniform(-1, 1, 200_000)
    cb = q.fit_lloyd_max(x, 1)
    np.testing.assert_allclose(cb.levels, [-0.5, 0.5], atol=0.01)
    assert cb.converged


def test_constant_samples_give_distinct_levels():
    cb = q.fit_lloyd_max(np.full(100, 0.7), 2)
    assert np.all(np.diff(cb.levels) > 0)
    np.testing.assert_allclose(cb.levels, 0.7, atol=1e-9)


@pytest.mark.parametrize("B", [2, 3])
def test_gaussian_beats_best_uniform(B):
    x = np.random.default_rng(1).standard_normal(50_000)
    cb = q.fit_lloyd_max(x, B)
    best_uniform = min(
        q.distortion(np.linspace(-a, a, 2**B), x) for a in np.linspace(1.0, 3.5, 101)
    )
    assert q.distortion(cb.levels, x) <= best_uniform


def test_assign_matches_brute_force():
    r = np.random.default_rng(2)
    levels = np.sort(r.standard_normal(8))
    x = r.standard_normal(1000)
    brute = np.argmin(np.abs(x[:, None] - levels[None]), axis=1)
    np.testing.assert_array_equal(q.assign(levels, x), brute)
    # exact midpoint goes to the lower index
    assert q.assign(np.array([0.0, 1.0]), np.array([0.5]))[0] == 0


def test_distortion_decreases_with_bits():
    x = np.random.default_rng(3).laplace(size=20_000)
    d = [q.distortion(q.fit_lloyd_max(x, B).levels, x) for B in range(1, 7)]
    assert all(b < a for a, b in zip(d, d[1:]))


def test_lloyd_history_is_non_increasing():
    x = np.random.default_rng(4).standard_normal(5_000)
    h = np.array(q.fit_lloyd_max(x, 4).history)
    assert np.all(np.diff(h) <= 1e-15)


def test_non_convergence_warns_and_returns_best():
    x = np.random.default_rng(5).standard_normal(5_000)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        cb = q.fit_lloyd_max(x, 4, max_iter=2)
    assert not cb.converged
    assert any(issubclass(i.category, RuntimeWarning) for i in w)


def test_twelve_bits_pack_into_two_bytes():
    payload, nbits = q.pack_indices([5, 0, 7, 2], 3)
    assert nbits == 12 and len(payload) == 2
    # 101 000 111 010 + 0000 padding
    assert payload == bytes([0b10100011, 0b10100000])


@settings(max_examples=40, deadline=None)
@given(B=st.integers(1, 8), data=st.data())
def test_pack_round_trip(B, data):
    idx = data.draw(st.lists(st.integers(0, 2**B - 1), min_size=1, max_size=50))
    payload, nbits = q.pack_indices(idx, B)
    assert nbits == B * len(idx)
    np.testing.assert_array_equal(q.unpack_indices(payload, B, len(idx)), idx)


def test_feedback_bits_equivalence():
    assert q.feedback_bits(512, 3) == 1536
    assert q.feedback_bits(256, 6) == 1536
    with pytest.raises(ContractError):
        q.feedback_bits(0, 3)


def test_file_round_trips(tmp_path):
    x = np.random.default_rng(6).standard_normal(1000)
    cb = q.fit_lloyd_max(x, 3)
    q.save_codebook(tmp_path / "c.clcb", cb)
    cb2 = q.load_codebook(tmp_path / "c.clcb")
    np.testing.assert_array_equal(cb2.levels, cb.levels)
    s = x[:10]
    qz = q.write_bitstream(tmp_path / "s.clbq", cb, s)
    np.testing.assert_array_equal(q.read_bitstream(tmp_path / "s.clbq", cb2), qz.dequantized)
    raw = (tmp_path / "s.clbq").read_bytes()
    (tmp_path / "s.clbq").write_bytes(raw[:-1])
    with pytest.raises(FormatError):
        q.read_bitstream(tmp_path / "s.clbq", cb)
