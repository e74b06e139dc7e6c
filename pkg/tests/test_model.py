import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fpguard.errors import ConfigurationError, DimensionError, NumericInputError
from fpguard.model import (
    Batch,
    GradientUpdate,
    LayerLayout,
    ModelParams,
    apply_update,
    compute_gradient,
    evaluate,
    init_params,
    layout_for_widths,
    local_train,
    loss,
)


def _fd_gradient(params, batch, h=1e-5):
    out = np.zeros_like(params.values)
    for j in range(params.values.size):
        plus = params.values.copy()
        minus = params.values.copy()
        plus[j] += h
        minus[j] -= h
        out[j] = (loss(ModelParams(plus, params.layout, params.widths), batch)
                  - loss(ModelParams(minus, params.layout, params.widths), batch)) / (2 * h)
    return out


def test_init_dimensions_small():
    p = init_params([4, 3], 7)
    assert p.values.size == 15
    assert p.layout.num_layers == 2
    assert p.layout.boundaries == ((0, 12), (12, 3))


def test_init_dimensions_mnist_shape():
    # 784*64 + 64 + 64*10 + 10
    assert init_params([784, 64, 10], 0).values.size == 50890


def test_init_deterministic_and_biases_zero():
    a, b = init_params([5, 4, 3], 11), init_params([5, 4, 3], 11)
    assert np.array_equal(a.values, b.values)
    for _, bias in a.matrices():
        assert np.all(bias == 0)


def test_init_rejects_bad_widths():
    with pytest.raises(ConfigurationError):
        init_params([], 0)
    with pytest.raises(ConfigurationError):
        init_params([3], 0)
    with pytest.raises(ConfigurationError):
        init_params([3, 0], 0)


def test_layout_rejects_gaps():
    with pytest.raises(ConfigurationError):
        LayerLayout(((0, 2), (3, 1)), 4)
    with pytest.raises(ConfigurationError):
        LayerLayout(((0, 2),), 3)


@given(st.lists(st.integers(1, 6), min_size=2, max_size=4), st.integers(0, 2**31 - 1))
def test_layout_split_concatenates_back(widths, seed):
    p = init_params(widths, seed)
    assert np.array_equal(np.concatenate(p.layout.split(p.values)), p.values)
    assert p.layout == layout_for_widths(widths)


@pytest.mark.parametrize("widths", [[3, 5, 4], [6, 4], [2, 3, 3, 2]])
def test_gradient_matches_finite_differences(widths):
    rng = np.random.default_rng(sum(widths))
    p = init_params(widths, 3)
    p = ModelParams(p.values + 0.1 * rng.normal(size=p.values.size), p.layout, p.widths)
    batch = Batch(rng.normal(size=(7, widths[0])), rng.integers(0, widths[-1], size=7))
    assert p.values.size < 200
    g = compute_gradient(p, batch).values
    fd = _fd_gradient(p, batch)
    rel = np.abs(g - fd) / np.maximum(np.abs(fd), 1e-4)
    assert rel.max() < 1e-4


def test_gradient_near_zero_at_confident_correct_output():
    # one-layer model whose logit for the true class is huge
    p = init_params([2, 3], 0)
    vals = np.zeros_like(p.values)
    vals[6 + 1] = 40.0  # bias of class 1
    p = ModelParams(vals, p.layout, p.widths)
    g = compute_gradient(p, Batch(np.array([[0.3, -0.2]]), np.array([1])))
    assert np.linalg.norm(g.values) < 1e-6


def test_gradient_invariant_to_duplicated_batch():
    rng = np.random.default_rng(1)
    p = init_params([4, 5, 3], 1)
    x, y = rng.normal(size=(6, 4)), rng.integers(0, 3, size=6)
    g1 = compute_gradient(p, Batch(x, y)).values
    g2 = compute_gradient(p, Batch(np.vstack([x, x]), np.concatenate([y, y]))).values
    np.testing.assert_allclose(g1, g2, atol=1e-12, rtol=0)


def test_gradient_deterministic():
    rng = np.random.default_rng(2)
    p = init_params([4, 5, 3], 2)
    b = Batch(rng.normal(size=(5, 4)), rng.integers(0, 3, size=5))
    assert np.array_equal(compute_gradient(p, b).values, compute_gradient(p, b).values)


def test_gradient_errors():
    p = init_params([3, 2], 0)
    with pytest.raises(DimensionError):
        compute_gradient(p, Batch(np.zeros((2, 4)), np.array([0, 1])))
    with pytest.raises(NumericInputError):
        compute_gradient(p, Batch(np.array([[np.nan, 0, 0]]), np.array([0])))


def test_apply_update_examples():
    lay = LayerLayout.from_lengths([2])
    w = ModelParams(np.array([1.0, 1.0]), lay, (1, 2))
    g = GradientUpdate(np.array([2.0, -2.0]), lay)
    np.testing.assert_array_equal(apply_update(w, g, 0.5).values, [0.0, 2.0])
    assert np.array_equal(apply_update(w, g, 0.0).values, w.values)
    half = apply_update(apply_update(w, g, 0.25), g, 0.25)
    np.testing.assert_allclose(half.values, apply_update(w, g, 0.5).values, atol=1e-12, rtol=0)


def test_apply_update_layout_mismatch():
    w = init_params([2, 2], 0)
    with pytest.raises(DimensionError):
        apply_update(w, GradientUpdate(np.zeros(6), LayerLayout.from_lengths([3, 3])), 0.1)


def test_gradient_update_rejects_nonfinite():
    with pytest.raises(NumericInputError):
        GradientUpdate(np.array([1.0, np.inf]), LayerLayout.from_lengths([2]))


def test_evaluate_untrained_on_random_labels_is_near_chance():
    rng = np.random.default_rng(5)
    p = init_params([20, 16, 10], 5)
    data = Batch(rng.normal(size=(10000, 20)), rng.integers(0, 10, size=10000))
    acc, mean_loss = evaluate(p, data)
    # binomial(10000, 0.1): a 0.03 band is ~10 standard deviations wide
    assert 0.07 <= acc <= 0.13
    assert mean_loss >= 0


def test_evaluate_memorised_dataset():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(4, 3)), np.array([0, 1, 2, 1])
    p = init_params([3, 16, 3], 0)
    for _ in range(3000):
        p = apply_update(p, compute_gradient(p, Batch(x, y)), 0.5)
    acc, mean_loss = evaluate(p, Batch(x, y))
    assert mean_loss < 1e-3 and acc == 1.0


def test_evaluate_empty_rejected():
    with pytest.raises(ConfigurationError):
        evaluate(init_params([2, 2], 0), Batch(np.zeros((0, 2)), np.zeros(0, dtype=int)))


def test_local_train_single_step_equals_gradient():
    rng = np.random.default_rng(3)
    p = init_params([4, 3], 3)
    x, y = rng.normal(size=(5, 4)), rng.integers(0, 3, size=5)
    upd = local_train(p, x, y, eta=0.1, epochs=1, batch_size=32, rng=np.random.default_rng(0))
    np.testing.assert_allclose(upd.values, compute_gradient(p, Batch(x, y)).values, atol=1e-12)
    assert upd.sample_count == 5


def test_local_train_replays_on_server():
    rng = np.random.default_rng(4)
    p = init_params([4, 6, 3], 4)
    x, y = rng.normal(size=(50, 4)), rng.integers(0, 3, size=50)
    upd = local_train(p, x, y, 0.05, 2, 8, np.random.default_rng(9))
    # manual replay of the same SGD trajectory
    w = p
    order_rng = np.random.default_rng(9)
    for _ in range(2):
        order = order_rng.permutation(50)
        for s in range(0, 50, 8):
            idx = order[s:s + 8]
            w = apply_update(w, compute_gradient(w, Batch(x[idx], y[idx])), 0.05)
    np.testing.assert_allclose(apply_update(p, upd, 0.05).values, w.values, atol=1e-12)
