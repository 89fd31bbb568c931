import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmvae.data import FactorSpec, make_related_dataset
from cmvae.evaluation import AnalyticLinearModel, LinearGaussianOracle
from cmvae.relatedness import (
    PropagationConfig,
    carve_pipeline_datasets,
    estimate_threshold,
    merge_predicted,
    pmi,
    precision_recall_f1,
    propagate,
    score_dataset,
)


def bivariate_oracle(a=2.0, noise=1.0):
    mat = np.array([[a]])
    return LinearGaussianOracle(loadings={"m1": mat, "m2": mat}, noise_var=noise)


def test_pmi_exact_zero_for_factorized_constant_weights():
    oracle = LinearGaussianOracle(loadings={"m1": np.zeros((2, 1)), "m2": np.zeros((2, 1))},
                                  noise_var=1.5)
    model = AnalyticLinearModel(oracle)  # exact posterior == prior, weights constant
    rng = np.random.default_rng(0)
    x = rng.standard_normal((40, 2))
    y = rng.standard_normal((40, 2))
    vals = pmi(model, x, y, 8, seed=3)
    # constant weights: zero up to float associativity across the three terms
    assert np.abs(vals).max() < 1e-12


def test_pmi_factorized_monte_carlo_small():
    oracle = LinearGaussianOracle(loadings={"m1": np.zeros((2, 1)), "m2": np.zeros((2, 1))},
                                  noise_var=1.5)
    model = AnalyticLinearModel(oracle, scale=0.9, shift=0.3)  # non-constant weights
    rng = np.random.default_rng(1)
    x = np.sqrt(1.5) * rng.standard_normal((300, 2))
    y = np.sqrt(1.5) * rng.standard_normal((300, 2))
    vals = pmi(model, x, y, 30, seed=5)
    assert abs(vals.mean()) < 0.05


def test_pmi_bivariate_correlation_value():
    model = AnalyticLinearModel(bivariate_oracle())
    val = pmi(model, np.zeros((1, 1)), np.zeros((1, 1)), 30, seed=7)[0]
    # exact encoders give constant weights: the estimate is exact
    assert val == pytest.approx(-0.5 * math.log(1 - 0.8 ** 2), abs=1e-9)
    assert val == pytest.approx(0.510826, abs=5e-7)


def test_pmi_symmetric_with_exact_encoders():
    model = AnalyticLinearModel(bivariate_oracle())
    rng = np.random.default_rng(2)
    x = rng.standard_normal((20, 1))
    y = rng.standard_normal((20, 1))
    fwd = pmi(model, x, y, 16, seed=9)
    swapped = pmi(model, y, x, 16, seed=9)
    assert np.allclose(fwd, swapped, atol=1e-9)


def test_estimate_threshold_separable_case():
    scores = np.array([2.0, 3.0, -1.0, 0.0])
    truth = np.array([1, 1, 0, 0])
    thr = estimate_threshold(scores, truth)
    assert thr == pytest.approx(1.0)
    _, _, f1 = precision_recall_f1(scores > thr, truth.astype(bool))
    assert f1 == 1.0


def test_estimate_threshold_interleaved_sweep_matches_bruteforce():
    rng = np.random.default_rng(3)
    scores = rng.standard_normal(40)
    truth = rng.integers(0, 2, size=40).astype(bool)
    if truth.all() or (~truth).all():
        truth[0] = ~truth[0]
    thr = estimate_threshold(scores, truth)

    def f1_at(t):
        return precision_recall_f1(scores > t, truth)[2]

    # brute force over a fine grid plus the candidate boundaries
    grid = np.concatenate([np.linspace(scores.min() - 1, scores.max() + 1, 4001)])
    best = max(f1_at(t) for t in grid)
    assert f1_at(thr) == pytest.approx(best, abs=1e-12)
    assert best < 1.0


def test_estimate_threshold_degenerate_inputs():
    with pytest.raises(ValueError):
        estimate_threshold(np.array([1.0, 2.0]), np.array([1, 1]))
    with pytest.raises(ValueError):
        estimate_threshold(np.array([5.0, 5.0, 5.0]), np.array([1, 0, 1]))


def test_estimate_threshold_tie_prefers_larger():
    # both boundaries reach F1 = 1; the larger midpoint must win
    scores = np.array([10.0, 0.0, 0.0, -10.0])
    truth = np.array([1, 1, 0, 0])
    # scores 0.0 appear in both classes: end F1 < 1, interleaved; use distinct
    scores = np.array([10.0, 4.0, 2.0, -10.0])
    thr = estimate_threshold(scores, truth)
    assert thr == pytest.approx(3.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-5000, 5000).map(lambda k: k / 100.0), min_size=4, max_size=24),
       st.floats(0.5, 3.0, allow_subnormal=False), st.floats(-5, 5, allow_subnormal=False))
def test_threshold_invariant_to_monotone_transform(raw, a, b):
    # rank statistic: the induced prediction set survives any well-scaled
    # strictly increasing affine transform of the scores
    scores = np.asarray(raw)
    truth = (np.arange(len(scores)) % 2).astype(bool)
    transformed = a * scores + b
    if np.unique(scores).size < 2 or np.unique(transformed).size != np.unique(scores).size:
        return
    thr = estimate_threshold(scores, truth)
    scaled = estimate_threshold(transformed, truth)
    assert np.array_equal(transformed > scaled, scores > thr)


def test_precision_recall_f1_conventions():
    truth = np.array([1, 0, 1, 0], dtype=bool)
    p, r, f1 = precision_recall_f1(np.zeros(4, dtype=bool), truth)
    assert (p, r, f1) == (0.0, 0.0, 0.0)
    p, r, f1 = precision_recall_f1(np.ones(4, dtype=bool), truth)
    assert r == 1.0 and p == 0.5 and f1 == pytest.approx(2 * 0.5 / 1.5)
    p, r, f1 = precision_recall_f1(truth, truth)
    assert f1 == 1.0


def test_propagate_threshold_extremes():
    model = AnalyticLinearModel(bivariate_oracle())
    spec = FactorSpec(num_classes=2, obs_dims=(8, 8), private_dims=(1, 1))
    ds = make_related_dataset(spec, 24, seed=4)
    with pytest.raises(ValueError):
        propagate(model, ds, math.inf, 4, seed=0)


def test_propagate_low_threshold_full_recall():
    spec = FactorSpec(num_classes=2, obs_dims=(2, 2), private_dims=(0, 0))
    from cmvae.data import generate_unimodal, pair_random
    x = generate_unimodal(spec, 60, "m1", seed=5)
    y = generate_unimodal(spec, 60, "m2", seed=6)
    mixed = pair_random(spec, x, y, seed=7)
    oracle = LinearGaussianOracle(loadings={"m1": np.zeros((2, 1)), "m2": np.zeros((2, 1))},
                                  noise_var=1.0)
    model = AnalyticLinearModel(oracle, scale=0.9)
    pred, q = propagate(model, mixed, -1e12, 4, seed=8)
    assert q["recall"] == 1.0
    assert q["precision"] == pytest.approx(mixed.related.mean())


def test_carve_pipeline_shapes_and_purity():
    spec = FactorSpec()
    full = make_related_dataset(spec, 200, seed=9)
    small, small_mixed, full_mixed = carve_pipeline_datasets(full, 10.0, seed=10)
    assert len(small.observations["m1"]) == 20
    assert small.related.all()
    assert len(full_mixed.observations["m1"]) == 180
    # mixed sets keep truthful flags
    lab = small_mixed.pair_labels()
    assert np.array_equal(small_mixed.related.astype(bool), lab["m1"] == lab["m2"])
    again = carve_pipeline_datasets(full, 10.0, seed=10)
    assert np.array_equal(again[2].pairs, full_mixed.pairs)


def test_merge_predicted_combines_pools():
    spec = FactorSpec()
    full = make_related_dataset(spec, 100, seed=11)
    small, small_mixed, full_mixed = carve_pipeline_datasets(full, 20.0, seed=12)
    predicted = np.zeros(len(full_mixed), dtype=np.uint8)
    predicted[:5] = 1
    merged = merge_predicted(small, full_mixed, predicted)
    assert len(merged) == len(small) + 5
    names = spec.modality_names
    obs = merged.pair_observations()
    tail = obs[names[0]][-5:]
    expect = full_mixed.pair_observations()[names[0]][:5]
    assert np.array_equal(tail, expect)


def test_propagation_config_validation():
    with pytest.raises(ValueError):
        PropagationConfig(pretrain_percent=0.0)
    with pytest.raises(ValueError):
        PropagationConfig(pmi_num_samples=0)
    with pytest.raises(ValueError):
        PropagationConfig(threshold_rule="best-guess")
