import cmath
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from freqbias.errors import ConfigError, ContractError, ShapeError, SymmetryError
from freqbias.spectral import (
    Spectrum, band_split, cutoff_radius, dft2, filter_tensor, high_freq_norm, idft2, lowpass,
    make_filter, naive_dft2,
)
from freqbias.tensorcore import Tensor

from gradcheck import TOL, check


def loop_dft2(x):
    """The defining double sum, one output bin at a time."""
    h, w = x.shape
    out = np.zeros((h, w), dtype=complex)
    for u in range(h):
        for v in range(w):
            acc = 0j
            for a in range(h):
                for b in range(w):
                    acc += x[a, b] * cmath.exp(-2j * math.pi * (u * a / h + v * b / w))
            out[u, v] = acc
    return out


def scalar_filter(h, w, beta, u, v):
    d0 = beta * math.sqrt((h / 2) ** 2 + (w / 2) ** 2)
    du = min(u, h - u)
    dv = min(v, w - v)
    return math.exp(-((math.sqrt(du * du + dv * dv) / (2 * d0)) ** 2))


@pytest.mark.parametrize("h,w", [(1, 1), (1, 5), (3, 4), (5, 5), (6, 7)])
def test_dft_matches_loop_oracle(rng, h, w):
    x = rng.standard_normal((h, w))
    ref = loop_dft2(x)
    np.testing.assert_allclose(dft2(x).data, ref, atol=1e-9)
    np.testing.assert_allclose(dft2(x, method="naive").data, ref, atol=1e-9)


def test_dft_acts_per_channel(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    s = dft2(x).data
    assert s.shape == x.shape
    np.testing.assert_allclose(s[1, 2], loop_dft2(x[1, 2]), atol=1e-9)


def test_known_transforms():
    np.testing.assert_allclose(dft2(np.ones((4, 4))).data, np.pad([[16]], ((0, 3), (0, 3))), atol=1e-12)
    delta = np.zeros((3, 5))
    delta[0, 0] = 1
    np.testing.assert_allclose(dft2(delta).data, np.ones((3, 5)), atol=1e-12)


def test_centered_layout_round_trip(rng):
    s = dft2(rng.standard_normal((4, 6)))
    c = s.centered()
    assert c.layout == "centered"
    # zero frequency moves to (h//2, w//2)
    assert c.data[2, 3] == s.data[0, 0]
    np.testing.assert_array_equal(c.natural().data, s.data)
    with pytest.raises(ContractError):
        idft2(c)


def test_idft_rejects_asymmetric_spectrum():
    s = np.zeros((4, 4), dtype=complex)
    s[1, 2] = 10.0
    with pytest.raises(SymmetryError):
        idft2(s)
    assert idft2(s, check=False).shape == (4, 4)


def test_dft_rejects_vectors():
    with pytest.raises(ShapeError):
        dft2(np.ones(5))


@given(st.integers(1, 16), st.integers(1, 16), st.integers(0, 2**31))
def test_fast_naive_parseval_roundtrip(h, w, seed):
    x = np.random.default_rng(seed).standard_normal((h, w))
    fast = dft2(x).data
    naive = naive_dft2(x)
    assert np.max(np.abs(fast - naive)) < 1e-6
    energy = np.sum(x * x)
    assert abs(np.sum(np.abs(fast) ** 2) / (h * w) - energy) <= 1e-5 * energy
    assert np.max(np.abs(idft2(dft2(x)) - x)) < 1e-6


@pytest.mark.parametrize("h,w,beta", [(8, 8, 0.5), (5, 7, 0.125), (16, 12, 0.3), (1, 1, 0.2), (9, 4, 1.0)])
def test_filter_matches_scalar_formula(h, w, beta):
    f = make_filter(h, w, beta)
    for u in range(h):
        for v in range(w):
            assert abs(f.values[u, v] - scalar_filter(h, w, beta, u, v)) < 1e-9
    assert f.values[0, 0] == 1.0
    assert f.d0 == pytest.approx(cutoff_radius(h, w, beta))


@given(st.integers(1, 32), st.integers(1, 32), st.floats(1e-3, 1.0))
def test_filter_range_and_symmetry(h, w, beta):
    v = make_filter(h, w, beta).values
    assert np.all(v > 0) and np.all(v <= 1)
    flipped = np.roll(v[::-1, ::-1], (1, 1), axis=(0, 1))
    np.testing.assert_array_equal(v, flipped)


def test_filter_contracts():
    with pytest.raises(ConfigError):
        make_filter(4, 4, 0.0)
    with pytest.raises(ShapeError):
        make_filter(0, 4, 0.5)
    with pytest.raises(ConfigError):
        make_filter(4, 4, 0.5, "box")
    assert np.all(make_filter(3, 5, 0.5, "allpass").values == 1)


def test_filter_values_are_read_only():
    with pytest.raises(ValueError):
        make_filter(4, 4, 0.5).values[0, 0] = 3


def test_lowpass_matches_complex_path(rng):
    x = rng.standard_normal((2, 3, 6, 7))
    f = make_filter(6, 7, 0.25)
    ref = idft2(Spectrum(dft2(x).data * f.values))
    np.testing.assert_allclose(lowpass(x, f), ref, atol=1e-12)
    with pytest.raises(ShapeError):
        lowpass(x, make_filter(6, 6, 0.25))


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 9), st.integers(1, 9)),
                  elements=st.floats(-1e6, 1e6)), st.floats(0.01, 1.0))
def test_band_split_sums_to_input(x, beta):
    low, high = band_split(x, make_filter(x.shape[1], x.shape[2], beta))
    scale = max(1.0, float(np.abs(x).max()))
    assert np.max(np.abs(low + high - x)) <= 1e-7 * scale


def test_band_split_constant_map_has_no_high_band():
    low, high = band_split(np.full((2, 5, 5), 3.0), make_filter(5, 5, 0.125))
    np.testing.assert_allclose(low, 3.0, atol=1e-12)
    assert high_freq_norm(np.full((2, 5, 5), 3.0), 0.125) < 1e-12


def test_high_freq_norm_oracle(rng):
    x = rng.standard_normal((3, 6, 6))
    f = make_filter(6, 6, 0.25)
    high = x - np.real(np.fft.ifft2(np.fft.fft2(x) * f.values))
    assert high_freq_norm(x, 0.25) == pytest.approx(np.linalg.norm(high.ravel()), rel=1e-12)


def test_filter_tensor_gradient():
    x = np.random.default_rng(0).standard_normal((2, 2, 5, 6))
    f = make_filter(5, 6, 0.2)
    assert check(lambda t: filter_tensor(t, f), [x], probes=100) < TOL


def test_band_split_keeps_tensor_graph():
    x = Tensor(np.random.default_rng(1).standard_normal((1, 2, 4, 4)), requires_grad=True)
    low, high = band_split(x, make_filter(4, 4, 0.3))
    assert low.requires_grad and high.requires_grad
