import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from grouppoison.errors import ConfigurationError, DomainError
from grouppoison.federated import (
    Aggregator, AggregatorKind, ClientUpdate, FLConfig, SparseFedState, aggregate_fedavg, aggregate_median,
    aggregate_sparsefed, aggregate_trimmed_mean, run_federated, run_fl_experiment, run_round, select_clients,
    top_k_mask, write_round_log,
)
from grouppoison.model import ModelParams, TrainConfig
from grouppoison.synth_data import IID, NonIID, partition_clients

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


def _brute_median(U):
    out = []
    for col in U.T:
        s = sorted(col)
        n = len(s)
        out.append(s[n // 2] if n % 2 else (s[n // 2 - 1] + s[n // 2]) / 2)
    return np.array(out)


def _brute_trimmed(U, k):
    out = []
    for col in U.T:
        kept = sorted(col)[k:len(col) - k]
        out.append(kept[0] + sum(v - kept[0] for v in kept) / len(kept))
    return np.array(out)


def test_median_examples():
    assert aggregate_median(np.array([[1.0], [2.0], [100.0]]))[0] == 2.0
    assert aggregate_median(np.array([[1.0], [2.0], [3.0], [4.0]]))[0] == 2.5


def test_trimmed_mean_examples():
    U = np.array([[1.0], [2.0], [3.0], [4.0], [5.0], [6.0], [100.0]])
    assert aggregate_trimmed_mean(U, 2)[0] == 4.0
    U = np.random.default_rng(0).standard_normal((6, 3))
    np.testing.assert_allclose(aggregate_trimmed_mean(U, 0), U.mean(axis=0), rtol=1e-14)
    with pytest.raises(ConfigurationError):
        aggregate_trimmed_mean(U, 3)


def test_oracles_on_random_instances():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        m, p = int(rng.integers(1, 12)), int(rng.integers(1, 8))
        U = rng.standard_normal((m, p)) * 10 ** rng.uniform(-3, 3)
        assert np.array_equal(aggregate_median(U), _brute_median(U))
        k = int(rng.integers(0, (m - 1) // 2 + 1))
        assert np.array_equal(aggregate_trimmed_mean(U, k), _brute_trimmed(U, k))


def test_sparsefed_no_momentum_example():
    emitted, state, _ = aggregate_sparsefed(np.array([[0.5, -2.0, 0.1]]), k=1, rho=0.0)
    np.testing.assert_array_equal(emitted, [0.0, -2.0, 0.0])
    np.testing.assert_array_equal(state.residual, [0.5, 0.0, 0.1])


def test_sparsefed_two_rounds():
    emitted, state, v = aggregate_sparsefed(np.array([[0.5, -2.0, 0.1]]), k=1, rho=0.9)
    np.testing.assert_allclose(emitted, [0.0, -2.0, 0.0])
    np.testing.assert_allclose(state.residual, [0.5, 0.0, 0.1])
    emitted, state, v = aggregate_sparsefed(np.array([[0.2, 0.3, -0.4]]), k=1, rho=0.9, state=state)
    np.testing.assert_allclose(state.momentum, [0.65, -1.5, -0.31])
    np.testing.assert_allclose(v, [1.15, -1.5, -0.21])
    np.testing.assert_allclose(emitted, [0.0, -1.5, 0.0])
    np.testing.assert_allclose(state.residual, [1.15, 0.0, -0.21])


def test_sparsefed_keeps_everything_when_k_is_full():
    U = np.random.default_rng(1).standard_normal((4, 5))
    emitted, state, v = aggregate_sparsefed(U, k=5, rho=0.0)
    np.testing.assert_array_equal(emitted, aggregate_fedavg(U))
    assert not state.residual.any()


def test_sparsefed_conservation_every_round():
    rng = np.random.default_rng(3)
    state = SparseFedState.zeros(50)
    for _ in range(200):
        emitted, state, v = aggregate_sparsefed(rng.standard_normal((10, 50)), k=3, rho=0.9, state=state)
        assert np.array_equal(emitted + state.residual, v)
        assert np.count_nonzero(emitted) <= 3


def test_top_k_ties_lowest_index():
    assert top_k_mask(np.array([1.0, -1.0, 1.0, 0.5]), 2).tolist() == [True, True, False, False]


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 5)), elements=finite), st.randoms())
def test_permutation_invariance(U, rnd):
    perm = list(range(len(U)))
    rnd.shuffle(perm)
    P = U[perm]
    assert np.array_equal(aggregate_median(U), aggregate_median(P))
    k = (len(U) - 1) // 2
    np.testing.assert_allclose(aggregate_trimmed_mean(U, k), aggregate_trimmed_mean(P, k), rtol=1e-12, atol=1e-9)
    np.testing.assert_allclose(aggregate_fedavg(U), aggregate_fedavg(P), rtol=1e-12, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 5)), elements=finite))
def test_robust_aggregates_within_bounds(U):
    lo, hi = U.min(axis=0), U.max(axis=0)
    med = aggregate_median(U)
    tm = aggregate_trimmed_mean(U, (len(U) - 1) // 2)
    assert np.all((lo <= med) & (med <= hi))
    assert np.all((lo - 1e-9 <= tm) & (tm <= hi + 1e-9))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=finite), st.integers(1, 9))
def test_unanimous_updates(row, m):
    U = np.tile(row, (m, 1))
    for agg in (aggregate_fedavg(U), aggregate_median(U), aggregate_trimmed_mean(U, (m - 1) // 2)):
        assert np.array_equal(agg, row)


def test_update_validation():
    with pytest.raises(DomainError):
        ClientUpdate(np.array([np.inf]), 0, 1)
    with pytest.raises(DomainError):
        aggregate_median([])


def test_select_clients_deterministic():
    a = select_clients(100, 10, seed=4, round_index=2)
    assert np.array_equal(a, select_clients(100, 10, seed=4, round_index=2))
    assert len(set(a.tolist())) == 10 and a.max() < 100
    assert not np.array_equal(a, select_clients(100, 10, seed=4, round_index=3))


def test_config_validation():
    assert FLConfig().per_round == 10
    for bad in ({"n_clients": 0}, {"participation": 0.0}, {"partition": "bogus"}):
        with pytest.raises(ConfigurationError):
            FLConfig(**bad)
    with pytest.raises(ConfigurationError):
        Aggregator(AggregatorKind.SPARSEFED, momentum=1.0)
    assert Aggregator(AggregatorKind.SPARSEFED).keep(1000) == 50


def test_one_client_round_matches_local(small_data):
    train = small_data[0]
    shards = partition_clients(train, 1, IID, seed=0)
    cfg = FLConfig(n_clients=1, participation=1.0, local_epochs=1, rounds=1)
    g = ModelParams.init(train.d, 32, train.C, seed=0)
    new, log, _ = run_round(g, shards, [0], cfg, round_index=0, seed=0)
    med_cfg = FLConfig(n_clients=1, participation=1.0, local_epochs=1, rounds=1, aggregator=Aggregator(AggregatorKind.MEDIAN))
    new_med, _, _ = run_round(g, shards, [0], med_cfg, round_index=0, seed=0)
    assert np.array_equal(new.values, new_med.values)
    assert log.selected == (0,)


def test_fedavg_against_itself_drops_nothing(small_data, tmp_path):
    train, _, test = small_data
    cfg = FLConfig(n_clients=10, participation=0.3, rounds=2, local_epochs=1,
                   local=TrainConfig(lr=0.03, batch_size=32), partition=NonIID(0.1))
    cmp = run_fl_experiment(train, test, cfg, seed=0)
    assert cmp.wga_drop == 0.0 and cmp.acc_drop == 0.0
    assert len(cmp.defended.rounds) == 2
    path = tmp_path / "rounds.csv"
    write_round_log(cmp.defended.rounds, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["round", "aggregator", "wga", "acc", "asr"] and len(rows) == 3


def test_federated_runs_deterministic(small_data):
    train, _, test = small_data
    cfg = FLConfig(n_clients=10, participation=0.3, rounds=2, local_epochs=1,
                   aggregator=Aggregator(AggregatorKind.SPARSEFED, keep_fraction=0.1))
    a = run_federated(train, test, cfg, seed=1)
    b = run_federated(train, test, cfg, seed=1)
    assert np.array_equal(a.model.values, b.model.values)
