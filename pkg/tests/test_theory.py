import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grouppoison.errors import ConfigurationError, DomainError
from grouppoison.model import ModelParams, TrainConfig, train
from grouppoison.synth_data import Dataset, GroupLabel, generate_dataset, split, waterbirds_spec
from grouppoison.theory import (
    ClassProbDistribution, Family, SeparationCheckConfig, cantelli_bound, expected_class_probabilities,
    mc_loss_comparison, separation_sigma_bound, verify_separation_bound, write_report,
)


def test_cantelli_examples():
    assert cantelli_bound(1.0, 1.0) == 0.5
    assert cantelli_bound(0.0, 1.0) == 0.0
    assert cantelli_bound(2.0, 1.0) == pytest.approx(0.8)
    with pytest.raises(DomainError):
        cantelli_bound(1.0, 0.0)


def test_sigma_bound_example_and_limit():
    assert separation_sigma_bound(0.19, 0.7, 0.3) == pytest.approx(0.2 / 3, rel=1e-12)
    assert separation_sigma_bound(1e-12, 0.7, 0.3) < 1e-6
    with pytest.raises(DomainError):
        separation_sigma_bound(0.1, 0.3, 0.7)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 0.9), st.floats(0.01, 0.09), st.floats(0.05, 0.45))
def test_sigma_bound_monotone(eps, d_eps, gap):
    base = separation_sigma_bound(eps, 0.5 + gap, 0.5 - gap)
    assert separation_sigma_bound(eps + d_eps, 0.5 + gap, 0.5 - gap) > base
    assert separation_sigma_bound(eps, 0.5 + gap + 0.04, 0.5 - gap) > base


@settings(max_examples=100, deadline=None)
@given(st.floats(0.05, 20))
def test_sigma_bound_round_trip(x):
    eps = 1 - (1 / (1 + x * x)) ** 2
    if not 0 < eps < 1:
        return
    half_gap = (0.7 - 0.3) / 2
    assert separation_sigma_bound(eps, 0.7, 0.3) / half_gap == pytest.approx(x, rel=1e-6)


def test_beta_moments():
    d = ClassProbDistribution(Family.BETA, 0.7, 0.05)
    a, b = d.beta_params()
    assert a / (a + b) == pytest.approx(0.7)
    assert math.sqrt(a * b / ((a + b) ** 2 * (a + b + 1))) == pytest.approx(0.05)
    with pytest.raises(DomainError):
        ClassProbDistribution(Family.BETA, 0.5, 0.6)


def test_truncated_gaussian_moments():
    d = ClassProbDistribution(Family.TRUNCATED_GAUSSIAN, 0.7, 0.1)
    s = d.sample(400_000, np.random.default_rng(0))
    assert np.all((s >= 0) & (s <= 1))
    assert s.mean() == pytest.approx(0.7, abs=2e-3)
    assert s.std() == pytest.approx(0.1, abs=2e-3)


def test_point_masses_give_one():
    dc = ClassProbDistribution(Family.BETA, 0.7, 0.0)
    dp = ClassProbDistribution(Family.BETA, 0.3, 0.0)
    est = mc_loss_comparison(dc, dp, 1000, seed=0)
    assert est.value == 1.0 and est.stderr == 0.0


@pytest.mark.parametrize("family", list(Family))
def test_identical_distributions_half(family):
    d = ClassProbDistribution(family, 0.5, 0.1)
    est = mc_loss_comparison(d, d, 200_000, seed=1)
    assert abs(est.value - 0.5) <= 3 * est.stderr


def test_loss_and_probability_comparisons_agree():
    dc = ClassProbDistribution(Family.BETA, 0.6, 0.15)
    dp = ClassProbDistribution(Family.BETA, 0.4, 0.15)
    a = mc_loss_comparison(dc, dp, 300_000, seed=2, compare="loss")
    b = mc_loss_comparison(dc, dp, 300_000, seed=2, compare="prob")
    assert a == b


def test_estimate_deterministic_across_batches():
    d1 = ClassProbDistribution(Family.BETA, 0.6, 0.1)
    d2 = ClassProbDistribution(Family.BETA, 0.5, 0.1)
    n = (1 << 18) + 5
    assert mc_loss_comparison(d1, d2, n, seed=3) == mc_loss_comparison(d1, d2, n, seed=3)


def test_cantelli_holds_empirically():
    rng = np.random.default_rng(7)
    for _ in range(20):
        mu = rng.uniform(0.1, 0.9)
        sigma = rng.uniform(0.01, 0.9 * math.sqrt(mu * (1 - mu)))
        t = rng.uniform(0.2, 2.0) * sigma
        x = ClassProbDistribution(Family.BETA, mu, sigma).sample(100_000, rng)
        p = np.mean(x - mu >= t)
        se = math.sqrt(p * (1 - p) / len(x))
        assert p <= cantelli_bound(sigma, t) + 3 * se


def test_beta_grid_at_critical_sigma_passes(tmp_path):
    pts = verify_separation_bound(SeparationCheckConfig(n_samples=200_000), Family.BETA)
    assert [p.epsilon for p in pts] == [0.05, 0.1, 0.2, 0.4]
    assert all(p.passed for p in pts)
    path = tmp_path / "grid.csv"
    write_report(pts, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["epsilon", "sigma", "estimate", "stderr", "threshold", "pass"] and len(rows) == 5


def test_zero_sigma_grid_passes():
    pts = verify_separation_bound(SeparationCheckConfig(n_samples=10_000), sigmas=[0.0] * 4)
    assert all(p.passed and p.estimate == 1.0 for p in pts)


def test_unrealizable_point_is_skipped():
    pts = verify_separation_bound(SeparationCheckConfig(epsilons=(0.5,), mu_c=0.95, mu_p=0.05, n_samples=10_000))
    assert pts[0].passed is None and pts[0].estimate is None and pts[0].note


def test_precondition_guard():
    with pytest.raises(ConfigurationError):
        SeparationCheckConfig(mu_c=0.3, mu_p=0.7)
    with pytest.raises(ConfigurationError):
        SeparationCheckConfig(n_samples=100)


def test_constant_model_probabilities():
    n = 12
    y = np.array([0] * 6 + [1] * 6)
    a = np.array([0, 1] * 6)
    label = y.copy()
    prov = np.array(["clean"] * n, dtype=object)
    label[:2] = 1  # two class-0 samples relabelled as poisons
    prov[:2] = "dlbd"
    ds = Dataset(np.zeros((n, 3)), y, a, label, prov, np.arange(n), np.where(prov == "dlbd", 100, -1), 3)
    b2 = np.log([0.9, 0.1])
    m = ModelParams.pack(np.zeros((3, 2)), np.zeros(2), np.zeros((2, 2)), b2)
    rep = expected_class_probabilities(m, ds)
    assert rep.per_group[GroupLabel(0, 0)] == pytest.approx(0.9)
    assert rep.per_group[GroupLabel(1, 1)] == pytest.approx(0.1)
    assert rep.poison == pytest.approx(0.1)
    assert rep.complement_error <= 1e-12


def test_trained_model_poison_minimum():
    ds = generate_dataset(waterbirds_spec(), 3000, seed=0)
    tr, _, _ = split(ds, (0.5, 0.2, 0.3), seed=0)
    m, _ = train(ModelParams.init(tr.d, 32, tr.C, seed=0), tr, TrainConfig(lr=0.01, weight_decay=0.03, epochs=30))
    rep = expected_class_probabilities(m, tr)
    assert rep.complement_error <= 1e-12
    assert rep.poison_is_strict_minimum
