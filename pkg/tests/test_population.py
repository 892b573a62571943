import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from popgrad.errors import ConfigError, NumericDivergenceError, UsageError
from popgrad.population import (PopulationGradSpec, gradient_quality, perturb,
                                population_gradient, population_loss_and_grad)

from conftest import make_conv, make_mlp, random_batch


class Quadratic:
    """L(w) = 0.5 |w|^2, independent of the batch."""

    def loss_and_grad(self, w, images, labels, mode="train", rng=None):
        return 0.5 * float(w @ w), w.copy()


class Cubic:
    """L(w) = sum(w^3) / 3."""

    def loss_and_grad(self, w, images, labels, mode="train", rng=None):
        return float(np.sum(w ** 3) / 3), w ** 2


class PerSample:
    """Per-sample gradient is the sample's feature row; loss is irrelevant."""

    def loss_and_grad(self, w, images, labels, mode="train", rng=None):
        return 0.0, np.asarray(images, dtype=np.float64).mean(axis=0)


def single_member_draws(model, w, r, n):
    spec = PopulationGradSpec(1, r)
    return np.array([population_gradient(model, w, (None, None), spec, seed=11, step=t)
                     for t in range(n)])


def test_spec_validation():
    with pytest.raises(ConfigError):
        PopulationGradSpec(0, 0.1)
    with pytest.raises(ConfigError):
        PopulationGradSpec(3, -0.1)


def test_perturb_examples():
    p = np.random.default_rng(0).standard_normal(50)
    assert perturb(p, 0.0, np.random.default_rng(1)).tobytes() == p.tobytes()
    np.testing.assert_array_equal(perturb(np.zeros(20), 0.4, np.random.default_rng(1)), 0.0)
    with pytest.raises(UsageError):
        perturb(p, -1.0, np.random.default_rng(0))


def test_perturb_sd_within_bound():
    out = perturb(np.ones(10_000), 0.1, np.random.default_rng(42))
    sd = np.std(out - 1.0, ddof=1)
    assert abs(sd - 0.1) <= 4 * (0.1 / math.sqrt(20_000))


def test_perturb_ratio_mean_is_centered():
    p = np.random.default_rng(3).uniform(0.5, 2.0, 20_000) * np.random.default_rng(4).choice([-1, 1], 20_000)
    ratio = perturb(p, 0.2, np.random.default_rng(5)) / p - 1.0
    assert abs(ratio.mean()) <= 4 * ratio.std(ddof=1) / math.sqrt(ratio.size)


def test_biases_can_be_left_unperturbed():
    class Echo:
        def __init__(self, layout):
            self.layout = layout

        def loss_and_grad(self, w, images, labels, mode="train", rng=None):
            return 0.0, w.copy()

    model, p = make_mlp((4, 3, 2))
    weights = model.layout.weight_mask()
    spec = PopulationGradSpec(1, 0.5, perturb_biases=False)
    out = population_gradient(Echo(model.layout), p, (None, None), spec, seed=0)
    np.testing.assert_array_equal(out[~weights], p[~weights])
    assert np.all(out[weights] != p[weights])


@pytest.mark.parametrize("s", range(1, 11))
def test_zero_range_is_standard_gradient(s):
    for case in range(3):
        model, p = make_mlp((6, 5, 3), seed=case)
        x, y = random_batch(model, 4, case)
        _, g = model.loss_and_grad(p, x, y)
        pg = population_gradient(model, p, (x, y), PopulationGradSpec(s, 0.0), seed=case)
        assert pg.tobytes() == g.tobytes()


def test_zero_range_with_shared_dropout():
    model, p = make_mlp((6, 5, 4, 3), seed=2)
    model = model.with_dropout([0.3, 0.3])
    x, y = random_batch(model, 4, 1)
    key = [7, 3, 0]
    _, g = model.loss_and_grad(p, x, y, rng=np.random.default_rng(key))
    pg = population_gradient(model, p, (x, y), PopulationGradSpec(5, 0.0), 0, dropout_key=key)
    assert pg.tobytes() == g.tobytes()


def test_quadratic_unbiased():
    w = np.array([2.0, -1.0])
    draws = single_member_draws(Quadratic(), w, 0.1, 100_000)
    se = draws.std(axis=0, ddof=1) / math.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - w) <= 3 * se)


def test_cubic_smoothing_offset():
    draws = single_member_draws(Cubic(), np.array([1.0]), 0.2, 100_000)[:, 0]
    mean = draws.mean()
    se = draws.std(ddof=1) / math.sqrt(len(draws))
    assert abs(mean - 1.04) <= 3 * se
    assert abs(mean - 1.0) > 3 * se


def test_order_and_worker_invariance():
    model, p = make_conv()
    x, y = random_batch(model, 3, 5)
    spec = PopulationGradSpec(6, 0.2)
    a = population_loss_and_grad(model, p, (x, y), spec, seed=9, step=4, workers=1)
    b = population_loss_and_grad(model, p, (x, y), spec, seed=9, step=4, workers=4)
    assert a[0] == b[0]
    assert a[1].tobytes() == b[1].tobytes()
    # a different step draws different noise
    c = population_gradient(model, p, (x, y), spec, seed=9, step=5)
    assert not np.array_equal(a[1], c)


def test_member_divergence_reports_index():
    class Blows:
        def loss_and_grad(self, w, images, labels, mode="train", rng=None):
            if w[0] > 1.0:
                raise NumericDivergenceError("boom")
            return 0.0, w

    with pytest.raises(NumericDivergenceError) as info:
        population_gradient(Blows(), np.array([1.0]), (None, None), PopulationGradSpec(50, 0.5), 0)
    assert info.value.member is not None


def test_gradient_quality_two_sample_oracle():
    data = (np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0, 1]))
    rep = gradient_quality(PerSample(), np.zeros(2), data, 1, 2, np.random.default_rng(0))
    for d, c in zip(rep.distances, rep.cosines):
        assert d == pytest.approx(math.sqrt(0.5), abs=1e-12)
        assert c == pytest.approx(1 / math.sqrt(2), abs=1e-12)
    assert rep.distance_var == pytest.approx(0.0, abs=1e-12)
    assert rep.cosine_var == pytest.approx(0.0, abs=1e-12)


def test_gradient_quality_full_subset(mlp):
    model, p = mlp
    x, y = random_batch(model, 6, 3)
    rep = gradient_quality(model, p, (x, y), 6, 4, np.random.default_rng(0))
    assert all(d < 1e-12 for d in rep.distances)
    assert all(c == pytest.approx(1.0, abs=1e-12) for c in rep.cosines)
    assert rep.distance_var < 1e-24
    single = gradient_quality(model, p, (x, y), 2, 1, np.random.default_rng(0))
    assert single.distance_var == 0.0


def test_gradient_quality_undefined_cosine():
    data = (np.zeros((3, 2)), np.zeros(3, dtype=int))
    rep = gradient_quality(PerSample(), np.zeros(2), data, 1, 3, np.random.default_rng(0))
    assert rep.cosines == [None, None, None]
    assert rep.cosine_mean is None
    assert '"cosines": [null, null, null]' in rep.to_json()


def test_gradient_quality_with_population(mlp):
    model, p = mlp
    x, y = random_batch(model, 8, 1)
    rep = gradient_quality(model, p, (x, y), 4, 3, np.random.default_rng(0),
                           spec=PopulationGradSpec(3, 0.1), seed=1)
    assert rep.estimator.startswith("population")
    assert all(d >= 0 for d in rep.distances)
    assert all(-1 <= c <= 1 for c in rep.cosines)


def test_gradient_quality_argument_checks(mlp):
    model, p = mlp
    x, y = random_batch(model, 4, 1)
    with pytest.raises(UsageError):
        gradient_quality(model, p, (x, y), 5, 1, np.random.default_rng(0))
    with pytest.raises(UsageError):
        gradient_quality(model, p, (x, y), 2, 0, np.random.default_rng(0))


@settings(max_examples=20, deadline=None)
@given(n=st.integers(2, 10), m=st.integers(1, 10), k=st.integers(1, 5), seed=st.integers(0, 2**31))
def test_gradient_quality_ranges(n, m, k, seed):
    m = min(m, n)
    rng = np.random.default_rng(seed)
    data = (rng.standard_normal((n, 3)), np.zeros(n, dtype=int))
    rep = gradient_quality(PerSample(), np.zeros(3), data, m, k, rng)
    assert len(rep.distances) == k
    assert all(d >= 0 for d in rep.distances)
    assert all(c is None or -1 <= c <= 1 for c in rep.cosines)
    assert rep.distance_var >= 0
