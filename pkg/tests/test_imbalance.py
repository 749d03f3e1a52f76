import numpy as np
import pytest

from dgm_dte.imbalance import (
    DENSITY_FLOOR,
    density_weights,
    fit_density,
    reweight_embeddings,
    silverman_bandwidth,
)
from dgm_dte.numerics import Tape, leaf

INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def test_single_point_peak_value():
    model = fit_density(np.array([0.0]), bandwidth=1.0)
    np.testing.assert_allclose(model.pdf(0.0), [INV_SQRT_2PI], atol=1e-15)
    np.testing.assert_allclose(model.pdf(0.0), [0.3989422804014327], atol=1e-12)


def test_mixture_kernel_sums():
    model = fit_density(np.array([100.0, 100.0, 100.0, 200.0]), bandwidth=1.0)
    # at 100 the three coincident kernels dominate; the 200 kernel is ~0
    np.testing.assert_allclose(model.pdf(100.0), [0.75 * INV_SQRT_2PI], atol=1e-12)
    np.testing.assert_allclose(model.pdf(200.0), [0.25 * INV_SQRT_2PI], atol=1e-12)
    np.testing.assert_allclose(
        model.pdf(150.0), [0.0], atol=1e-15
    )


def test_density_integrates_to_one():
    rng = np.random.default_rng(0)
    y = np.concatenate([rng.normal(50, 5, 200), rng.normal(150, 20, 50)])
    model = fit_density(y)
    xs = np.linspace(y.min() - 8 * model.bandwidth, y.max() + 8 * model.bandwidth, 20001)
    integral = np.trapezoid(model.pdf(xs), xs)
    assert abs(integral - 1.0) < 1e-6


def test_scaled_bandwidth_scales_density():
    y = np.array([10.0])
    m1 = fit_density(y, bandwidth=1.0)
    m2 = fit_density(y, bandwidth=2.0)
    np.testing.assert_allclose(m1.pdf(10.0), 2.0 * m2.pdf(10.0), atol=1e-15)


def test_silverman_hand_value():
    y = np.array([0.0, 10.0])  # std = 5, n = 2
    expected = 1.06 * 5.0 * 2 ** (-0.2)
    assert silverman_bandwidth(y) == pytest.approx(expected)


def test_silverman_floor():
    assert silverman_bandwidth(np.array([7.0])) == 0.5
    assert silverman_bandwidth(np.full(100, 3.0)) == 0.5
    assert silverman_bandwidth(np.array([7.0]), floor=0.25) == 0.25


def test_bandwidth_validation():
    with pytest.raises(ValueError, match="empty"):
        fit_density(np.array([]))
    with pytest.raises(ValueError, match="positive"):
        fit_density(np.array([1.0]), bandwidth=0.0)


def test_weight_ratio_sqrt_three():
    # density at 0 is 3x the density at 10, so weights differ by sqrt(3)
    model = fit_density(np.array([0.0, 0.0, 0.0, 10.0]), bandwidth=0.5)
    w, clamped = density_weights(model, np.array([0.0, 10.0]), normalize=False)
    assert clamped == 0
    np.testing.assert_allclose(w[1] / w[0], np.sqrt(3.0), rtol=1e-9)


def test_weights_decrease_with_density():
    rng = np.random.default_rng(1)
    y = rng.normal(100, 10, 500)
    model = fit_density(y)
    # stay within ~3 sigma of the mass so no query hits the density clamp
    q = np.array([100.0, 120.0, 130.0])
    w, clamped = density_weights(model, q, normalize=False)
    assert clamped == 0
    assert w[0] < w[1] < w[2]


def test_weights_normalize_to_unit_mean():
    rng = np.random.default_rng(2)
    y = rng.lognormal(np.log(48), 0.4, 300)
    model = fit_density(y)
    w, _ = density_weights(model, y, normalize=True)
    assert w.mean() == pytest.approx(1.0, abs=1e-12)
    assert np.all(w > 0)


def test_huge_bandwidth_flattens_weights():
    model = fit_density(np.array([10.0, 50.0, 400.0]), bandwidth=1e4)
    w, _ = density_weights(model, np.array([10.0, 400.0]), normalize=True)
    np.testing.assert_allclose(w, [1.0, 1.0], atol=1e-2)


def test_clamp_counter_and_warning():
    model = fit_density(np.array([0.0]), bandwidth=0.5)
    with pytest.warns(UserWarning, match="clamped 1 of 2"):
        w, clamped = density_weights(model, np.array([0.0, 1e6]), normalize=False)
    assert clamped == 1
    np.testing.assert_allclose(w[1], DENSITY_FLOOR**-0.5)


def test_grid_covers_observed_range():
    model = fit_density(np.array([3.2, 97.9]), bandwidth=2.0)
    centers, dens = model.grid(bin_hours=1.0)
    # bin edges span the observed label range; centres sit half a bin inside
    assert centers[0] - 0.5 <= 3.2 and centers[-1] + 0.5 >= 97.9
    assert np.all(np.diff(centers) == 1.0)
    np.testing.assert_allclose(dens, model.pdf(centers))


def test_density_symmetric_labels():
    # two-point label sets give densities mirror-symmetric about the midpoint
    model = fit_density(np.array([20.0, 80.0]), bandwidth=4.0)
    xs = np.linspace(0.0, 100.0, 63)
    np.testing.assert_allclose(model.pdf(xs), model.pdf(100.0 - xs)[::-1], atol=1e-9)


def test_reweight_unit_weights_identity():
    rng = np.random.default_rng(0)
    e = rng.normal(size=(5, 3))
    tape = Tape()
    out = reweight_embeddings(tape, leaf(e, name="e"), np.ones(5))
    np.testing.assert_array_equal(out.data, e)


def test_reweight_scales_rows():
    tape = Tape()
    e = leaf(np.array([[1.0, 2.0], [3.0, 4.0]]), name="e")
    out = reweight_embeddings(tape, e, np.array([2.0, 1.0]))
    np.testing.assert_allclose(out.data, [[2.0, 4.0], [3.0, 4.0]])


def test_reweight_matches_loop_and_grads_flow_through_embeddings_only():
    rng = np.random.default_rng(7)
    raw = rng.normal(size=(6, 4))
    w = rng.uniform(0.5, 3.0, size=6)
    tape = Tape()
    e = leaf(raw.copy(), name="e")
    out = reweight_embeddings(tape, e, w)
    expected = np.stack([w[i] * raw[i] for i in range(6)])
    np.testing.assert_allclose(out.data, expected, atol=1e-15)
    tape.backward(tape.sum(out))
    # d(sum w_i e_ij)/d e_ij = w_i broadcast across the row
    np.testing.assert_allclose(e.grad, np.repeat(w[:, None], 4, axis=1), atol=1e-15)


def test_reweight_rejects_mismatched_weights():
    tape = Tape()
    e = leaf(np.zeros((3, 2)), name="e")
    with pytest.raises(ValueError, match="3 embedding rows"):
        reweight_embeddings(tape, e, np.ones(4))
