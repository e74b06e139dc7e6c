import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fpguard.baselines import (
    AggregatorChoice,
    FoolsGold,
    coord_median,
    default_krum_f,
    fedavg_mean,
    foolsgold_weights,
    krum,
    krum_scores,
    krum_select,
    pairwise_sq_distances,
    trimmed_mean,
)
from fpguard.errors import ConfigurationError, DimensionError
from fpguard.model import GradientUpdate

from helpers import layout, updates_from


# fedavg ------------------------------------------------------------------

def test_fedavg_examples():
    ups = updates_from([[1.0, 2.0], [3.0, 6.0]])
    np.testing.assert_array_equal(fedavg_mean(ups).values, [2.0, 4.0])
    np.testing.assert_array_equal(fedavg_mean(ups, [3, 1]).values, [1.5, 3.0])
    assert fedavg_mean(ups).sample_count == 2


def test_fedavg_errors():
    ups = updates_from([[1.0], [2.0]])
    with pytest.raises(DimensionError):
        fedavg_mean(ups, [1.0])
    with pytest.raises(ConfigurationError):
        fedavg_mean(ups, [0.0, 0.0])
    with pytest.raises(ConfigurationError):
        fedavg_mean([])
    with pytest.raises(DimensionError):
        fedavg_mean([GradientUpdate(np.ones(2), layout(2)), GradientUpdate(np.ones(2), layout(1, 1))])


# krum --------------------------------------------------------------------

def brute_krum(rows, ids, f):
    """Pure-Python Krum: explicit pairwise loops, sort, argmin with id ties."""
    n = len(rows)
    scores = []
    for i in range(n):
        dists = []
        for j in range(n):
            if j != i:
                dists.append(sum((a - b) ** 2 for a, b in zip(rows[i], rows[j])))
        dists.sort()
        scores.append(sum(dists[: n - f - 2]))
    best = min(range(n), key=lambda i: (scores[i], ids[i]))
    return best, scores


def test_krum_vs_brute_force_100_instances():
    rng = np.random.default_rng(0)
    for trial in range(100):
        f = int(rng.integers(0, 4))
        n = int(rng.integers(2 * f + 3, 11))
        d = int(rng.integers(1, 21))
        mat = rng.normal(size=(n, d))
        if trial % 3 == 0:
            mat = np.round(mat)  # integer data gives exact ties
        ids = list(rng.permutation(n))
        ups = [GradientUpdate(row, layout(d), int(cid)) for row, cid in zip(mat, ids)]
        best, scores = brute_krum(mat.tolist(), ids, f)
        np.testing.assert_allclose(krum_scores(mat, f), scores, rtol=1e-12, atol=1e-12)
        assert krum_select(ups, f)[0] == best
        np.testing.assert_array_equal(krum(ups, f).values, mat[best])


def test_krum_picks_cluster_member():
    mat = np.array([[0.0, 0], [0.1, 0], [0, 0.1], [0.1, 0.1], [0.05, 0.05], [100, 100], [-90, 50]])
    assert krum_select(updates_from(mat), 2)[0] == 4


def test_krum_tie_breaks_to_lower_id():
    mat = np.zeros((5, 3))
    ups = [GradientUpdate(r, layout(3), cid) for r, cid in zip(mat, [7, 3, 9, 4, 5])]
    assert krum_select(ups, 1)[0] == 1


def test_multikrum_mean_of_best():
    mat = np.array([[0.0], [1.0], [2.0], [3.0], [50.0]])
    ups = updates_from(mat)
    chosen = krum_select(ups, 1, 3)
    assert sorted(chosen) == [0, 1, 2] or sorted(chosen) == [1, 2, 3]
    np.testing.assert_allclose(krum(ups, 1, 3).values, mat[chosen].mean(axis=0))


def test_krum_preconditions():
    ups = updates_from(np.zeros((4, 2)))
    with pytest.raises(ConfigurationError):
        krum_select(ups, 1)  # 4 < 2*1+3
    with pytest.raises(ConfigurationError):
        krum_select(updates_from(np.zeros((5, 2))), 1, 6)
    with pytest.raises(ConfigurationError):
        krum_select(ups, -1)


def test_pairwise_distances_exact():
    mat = np.array([[0.0, 0.0], [3.0, 4.0], [1.0, 1.0]])
    np.testing.assert_array_equal(pairwise_sq_distances(mat), [[0, 25, 2], [25, 0, 13], [2, 13, 0]])


def test_default_f():
    assert default_krum_f(50) == 10 and default_krum_f(7) == 2 and default_krum_f(5) == 1


krum_mats = st.integers(0, 2).flatmap(
    lambda f: arrays(np.float64, st.tuples(st.integers(2 * f + 3, 9), st.integers(1, 6)),
                     elements=st.floats(-100, 100, allow_nan=False)).map(lambda m: (f, m))
)


@given(krum_mats, st.sampled_from([0.25, 0.5, 2.0, 8.0, 1024.0]))
def test_krum_argmin_scale_invariant(fm, c):
    """Power-of-two scaling multiplies every score exactly, so the argmin is unchanged."""
    f, mat = fm
    a = krum_select(updates_from(mat), f)
    b = krum_select(updates_from(c * mat), f)
    assert a == b


# trimmed mean and median -------------------------------------------------

def brute_trimmed(mat, b):
    n, d = mat.shape
    cut = math.floor(b * n)
    out = []
    for j in range(d):
        col = sorted(mat[:, j].tolist())
        kept = col[cut:n - cut]
        out.append(math.fsum(kept) / len(kept))
    return out


def test_trimmed_mean_example():
    ups = updates_from([[1.0], [2.0], [3.0], [4.0], [100.0]])
    assert trimmed_mean(ups, 0.2).values[0] == 3.0
    assert trimmed_mean(ups, 0.0).values[0] == 22.0


def test_trimmed_mean_vs_sort_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n, d = int(rng.integers(1, 15)), int(rng.integers(1, 10))
        b = float(rng.uniform(0, 0.49))
        mat = rng.standard_cauchy(size=(n, d))
        np.testing.assert_allclose(trimmed_mean(updates_from(mat), b).values, brute_trimmed(mat, b), rtol=1e-12, atol=1e-12)


def test_trimmed_mean_errors():
    with pytest.raises(ConfigurationError):
        trimmed_mean(updates_from([[1.0]]), 0.5)


def test_coord_median_examples():
    np.testing.assert_array_equal(coord_median(updates_from([[1.0, 9], [5, 2], [3, 4]])).values, [3, 4])
    # even n: lower middle
    np.testing.assert_array_equal(coord_median(updates_from([[1.0], [2], [3], [4]])).values, [2])


def test_coord_median_vs_sort_oracle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n, d = int(rng.integers(1, 15)), int(rng.integers(1, 10))
        mat = rng.normal(size=(n, d))
        want = [sorted(mat[:, j].tolist())[(n - 1) // 2] for j in range(d)]
        np.testing.assert_array_equal(coord_median(updates_from(mat)).values, want)


def test_median_equals_maximal_trim_for_odd_n():
    rng = np.random.default_rng(3)
    for n in (3, 5, 7, 9):
        mat = rng.normal(size=(n, 6))
        b = ((n - 1) / 2) / n + 1e-9  # floor(b n) = (n-1)/2
        np.testing.assert_array_equal(trimmed_mean(updates_from(mat), b).values, coord_median(updates_from(mat)).values)


mats = arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 5)), elements=st.floats(-1e3, 1e3, allow_nan=False))


@given(mats, st.randoms(use_true_random=False))
def test_robust_means_permutation_invariant(mat, rnd):
    perm = list(range(len(mat)))
    rnd.shuffle(perm)
    a, b = updates_from(mat), updates_from(mat[perm])
    assert np.array_equal(coord_median(a).values, coord_median(b).values)
    np.testing.assert_allclose(trimmed_mean(a, 0.2).values, trimmed_mean(b, 0.2).values, rtol=1e-12, atol=1e-9)


@given(st.integers(5, 20), st.integers(0, 2**31 - 1), st.floats(1e3, 1e12))
def test_trimmed_mean_bounded_by_honest_range(n, seed, size):
    """Up to floor(b n) arbitrary rows cannot pull the result outside the honest range."""
    rng = np.random.default_rng(seed)
    b = 0.2
    bad = math.floor(b * n)
    honest = rng.normal(size=(n - bad, 4))
    evil = size * rng.choice([-1.0, 1.0], size=(bad, 4))
    out = trimmed_mean(updates_from(np.vstack([honest, evil])), b).values
    assert np.all(out >= honest.min(axis=0) - 1e-9) and np.all(out <= honest.max(axis=0) + 1e-9)


# foolsgold ---------------------------------------------------------------

def test_foolsgold_downweights_colluders():
    rng = np.random.default_rng(4)
    fg = FoolsGold()
    d, honest, sybils = 50, 7, 3
    target = rng.normal(size=d)
    for _ in range(6):
        rows = [rng.normal(size=d) for _ in range(honest)]
        rows += [target + 0.01 * rng.normal(size=d) for _ in range(sybils)]
        fg.aggregate(updates_from(np.array(rows)))
    w = fg.last_weights
    assert w[honest:].max() < 0.1 * w[:honest].mean()


def test_foolsgold_orthogonal_histories_uniform():
    w = foolsgold_weights(np.eye(4) * np.array([[1.0], [2.0], [3.0], [4.0]]))
    np.testing.assert_array_equal(w, np.ones(4))


def test_foolsgold_identical_histories_floor():
    w = foolsgold_weights(np.ones((3, 5)))
    np.testing.assert_array_equal(w, np.full(3, 1e-5))


def test_foolsgold_single_client_and_first_round():
    np.testing.assert_array_equal(foolsgold_weights(np.ones((1, 3))), [1.0])
    fg = FoolsGold()
    ups = updates_from([[1.0, 0.0], [3.0, 0.0]])
    np.testing.assert_array_equal(fg.aggregate(ups).values, [2.0, 0.0])
    np.testing.assert_array_equal(fg.last_weights, [1.0, 1.0])
    np.testing.assert_array_equal(fg.history[1], [3.0, 0.0])


def test_foolsgold_window_forgets():
    fg = FoolsGold(window=1)
    fg.aggregate(updates_from([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
    fg.aggregate(updates_from([[0.0, 1.0], [1.0, 0.0], [1.0, 1.0]]))
    np.testing.assert_array_equal(fg.recent[0][-1], [0.0, 1.0])
    assert len(fg.recent[0]) == 1


# choice ------------------------------------------------------------------

def test_aggregator_choice_validation():
    with pytest.raises(ConfigurationError):
        AggregatorChoice("median")
    with pytest.raises(ConfigurationError):
        AggregatorChoice("trimmed_mean", trim_fraction=0.5)
    with pytest.raises(ConfigurationError):
        AggregatorChoice("krum", krum_f=-1)
    with pytest.raises(ConfigurationError):
        AggregatorChoice("krum").check_clients(4)
    c = AggregatorChoice("multikrum")
    assert c.resolved_f(50) == 10 and c.resolved_m(50) == 40
    assert AggregatorChoice("krum").resolved_m(50) == 1
