import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fpguard.errors import ConfigurationError
from fpguard.fingerprint import (
    Fingerprint,
    compute_layer_ratios,
    compute_moments,
    compute_sparsity,
    compute_topk_concentration,
    default_k,
    extract_fingerprint,
    feature_names,
    read_fingerprints_csv,
    write_fingerprints_csv,
)
from fpguard.model import GradientUpdate

from helpers import layout


def oracle_fingerprint(values, lengths, eps=1e-6, k=None):
    """Feature-by-feature evaluation in plain Python, one loop per formula."""
    v = [float(x) for x in values]
    d = len(v)
    k = k if k is not None else max(1, math.ceil(0.01 * d))
    l2 = math.sqrt(sum(x * x for x in v))
    l1 = sum(abs(x) for x in v)
    linf = max(abs(x) for x in v)
    ratios, start = [], 0
    for n in lengths:
        part = v[start:start + n]
        start += n
        ratios.append(math.sqrt(sum(x * x for x in part)) / l2 if l2 > 0 else 0.0)
    mu = sum(v) / d
    var = sum((x - mu) ** 2 for x in v) / d
    skew = 0.0 if var < 1e-24 else sum((x - mu) ** 3 for x in v) / d / var ** 1.5
    rho = sum(1 for x in v if abs(x) < eps) / d
    mags = sorted((abs(x) for x in v), reverse=True)
    tau = sum(mags[:k]) / l1 if l1 > 0 else 0.0
    return [l2, l1, linf, *ratios, mu, var, skew, rho, tau]


def test_worked_example():
    g = GradientUpdate(np.array([3.0, 4.0, 0.0, 0.0]), layout(2, 2))
    fp = extract_fingerprint(g, 1e-6, 1).features
    mu = 1.75
    var = ((3 - mu) ** 2 + (4 - mu) ** 2 + 2 * mu ** 2) / 4
    skew = ((3 - mu) ** 3 + (4 - mu) ** 3 - 2 * mu ** 3) / 4 / var ** 1.5
    np.testing.assert_allclose(fp, [5, 7, 4, 1, 0, mu, var, skew, 0.5, 4 / 7], rtol=1e-14, atol=1e-15)
    assert var == pytest.approx(3.1875)


def test_against_straight_line_oracle_random_gradients():
    rng = np.random.default_rng(0)
    for trial in range(100):
        lengths = list(rng.integers(1, 40, size=rng.integers(1, 5)))
        d = sum(lengths)
        v = rng.standard_t(3, size=d) * 10.0 ** rng.uniform(-4, 2)
        v[rng.random(d) < 0.2] = 0.0
        k = int(rng.integers(1, d + 1)) if trial % 2 else None
        got = extract_fingerprint(GradientUpdate(v, layout(*lengths)), 1e-6, k).features
        want = oracle_fingerprint(v, lengths, 1e-6, k)
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-300)


def test_feature_names_and_length():
    assert feature_names(2) == ["l2", "l1", "linf", "ratio_1", "ratio_2", "mean", "variance",
                                "skewness", "sparsity", "topk"]
    fp = extract_fingerprint(GradientUpdate(np.ones(10), layout(3, 3, 4)))
    assert fp.features.shape == (11,)
    with pytest.raises(ConfigurationError):
        Fingerprint(np.zeros(3), 1)


def test_default_k():
    assert default_k(1) == 1 and default_k(100) == 1 and default_k(101) == 2 and default_k(50890) == 509


def test_sparsity_example():
    assert compute_sparsity(np.array([0.0, 1e-7, 0.5, -2.0]), 1e-6) == 0.5
    with pytest.raises(ConfigurationError):
        compute_sparsity(np.ones(3), 0.0)


def test_topk_edge_cases():
    assert compute_topk_concentration(np.zeros(5), 2) == 0.0
    assert compute_topk_concentration(np.array([1.0, -2.0]), 2) == 1.0
    with pytest.raises(ConfigurationError):
        compute_topk_concentration(np.ones(3), 4)
    with pytest.raises(ConfigurationError):
        compute_topk_concentration(np.ones(3), 0)


def test_zero_vector():
    fp = extract_fingerprint(GradientUpdate(np.zeros(6), layout(3, 3))).features
    np.testing.assert_array_equal(fp, [0, 0, 0, 0, 0, 0, 0, 0, 1, 0])


def test_constant_vector_skew_zero():
    assert compute_moments(np.full(7, 2.5))[2] == 0.0


# magnitudes below 1e-100 are mapped to zero so squares never underflow
finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False).map(lambda x: 0.0 if abs(x) < 1e-100 else x)


@st.composite
def gradients(draw):
    lengths = draw(st.lists(st.integers(1, 12), min_size=1, max_size=4))
    v = draw(arrays(np.float64, sum(lengths), elements=finite))
    return GradientUpdate(v, layout(*lengths))


@given(gradients(), st.floats(0.01, 100))
def test_scaling_law(g, c):
    """Norms scale by c, variance by c^2, scale-free features stay put."""
    assume(np.min(np.abs(g.values[g.values != 0]), initial=np.inf) >= 2e-6)
    a = extract_fingerprint(g).features
    b = extract_fingerprint(g.replace(c * g.values)).features
    L = g.layout.num_layers
    np.testing.assert_allclose(b[:3], c * a[:3], rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(b[3 + L], c * a[3 + L], rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(b[4 + L], c * c * a[4 + L], rtol=1e-9, atol=1e-12)
    if a[4 + L] > 1e-12:
        np.testing.assert_allclose(b[5 + L], a[5 + L], rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(b[3:3 + L], a[3:3 + L], rtol=1e-9, atol=1e-12)
    # with c >= 1/2 nothing crosses into or out of the sparsity band
    if c >= 0.5:
        assert b[6 + L] == a[6 + L]
    np.testing.assert_allclose(b[7 + L], a[7 + L], rtol=1e-9, atol=1e-12)


@given(gradients())
def test_layer_ratios_square_sum_to_one(g):
    r = compute_layer_ratios(g)
    if np.any(g.values != 0):
        assert abs(np.sum(r ** 2) - 1.0) < 1e-9
    else:
        assert np.all(r == 0)


@given(gradients())
def test_feature_ranges(g):
    fp = extract_fingerprint(g).features
    L = g.layout.num_layers
    l2, l1, linf = fp[:3]
    assert linf <= l2 * (1 + 1e-12) + 1e-300 and l2 <= l1 * (1 + 1e-12) + 1e-300
    assert fp[4 + L] >= 0
    assert 0 <= fp[6 + L] <= 1
    assert 0 <= fp[7 + L] <= 1 + 1e-12


def test_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    fps = [extract_fingerprint(GradientUpdate(rng.normal(size=9), layout(4, 5))) for _ in range(3)]
    write_fingerprints_csv(tmp_path / "f.csv", [4, 5, 6], fps)
    ids, back = read_fingerprints_csv(tmp_path / "f.csv")
    assert ids == [4, 5, 6]
    for a, b in zip(fps, back):
        assert np.array_equal(a.features, b.features)
