"""Instructive-frame sampling strategies and their properties."""

import numpy as np
import pytest

from skimfocus.sampling import sample_indices, sample_instructive


def test_top_nc_basic():
    conf = np.array([0.1, 0.9, 0.3, 0.8])
    idx = sample_indices(conf, np.ones(4, bool), "top_nc", 2)
    assert list(idx) == [1, 3]


def test_top_nc_tie_break_toward_lower_index():
    conf = np.full(6, 0.5)
    idx = sample_indices(conf, np.ones(6, bool), "top_nc", 2)
    assert list(idx) == [0, 1]


def test_uniform_formula():
    conf = np.zeros(256)
    idx = sample_indices(conf, np.ones(256, bool), "uniform", 32)
    assert np.array_equal(idx, np.arange(32) * 8)


def test_random_seeded_and_sorted():
    conf = np.zeros(50)
    a = sample_indices(conf, np.ones(50, bool), "random", 10, seed=3)
    b = sample_indices(conf, np.ones(50, bool), "random", 10, seed=3)
    assert np.array_equal(a, b)
    assert np.all(np.diff(a) > 0)


def test_errors():
    conf = np.zeros(5)
    with pytest.raises(ValueError, match="cannot sample"):
        sample_indices(conf, np.ones(5, bool), "top_nc", 6)
    mask = np.array([True, True, False, False, False])
    with pytest.raises(ValueError, match="cannot sample"):
        sample_indices(conf, mask, "uniform", 3)
    with pytest.raises(ValueError, match="unknown sampling strategy"):
        sample_indices(conf, np.ones(5, bool), "best", 2)


def test_sample_instructive_gathers_rows():
    conf = np.array([0.0, 5.0, 1.0, 4.0])
    rows = np.arange(8, dtype=np.float32).reshape(4, 2)
    out = sample_instructive(conf, np.ones(4, bool), rows, "top_nc", 2)
    assert list(out.indices) == [1, 3]
    assert np.array_equal(out.features, rows[[1, 3]])


def test_property_suite_1000_cases():
    rng = np.random.default_rng(123)
    for case in range(1000):
        n = int(rng.integers(4, 40))
        mask = rng.random(n) > 0.2
        if mask.sum() < 2:
            mask[:2] = True
        conf = rng.normal(size=n)
        n_c = int(rng.integers(1, mask.sum() + 1))
        strategy = ("random", "uniform", "top_nc")[case % 3]
        idx = sample_indices(conf, mask, strategy, n_c, seed=case)

        # all strategies: strictly increasing, non-masked, right length
        assert len(idx) == n_c
        assert np.all(np.diff(idx) > 0)
        assert mask[idx].all()

        if strategy == "uniform":
            valid = np.flatnonzero(mask)
            expected = valid[(np.arange(n_c) * valid.size) // n_c]
            assert np.array_equal(idx, expected)

        if strategy == "top_nc":
            chosen = np.zeros(n, bool)
            chosen[idx] = True
            inside = conf[idx].min()
            rest = conf[mask & ~chosen]
            if rest.size:
                assert inside >= rest.max() - 1e-12


def test_top_nc_permutation_equivariance():
    rng = np.random.default_rng(9)
    for _ in range(200):
        n = int(rng.integers(5, 30))
        conf = rng.permutation(np.linspace(0, 1, n))  # distinct confidences
        n_c = int(rng.integers(1, n + 1))
        base = sample_indices(conf, np.ones(n, bool), "top_nc", n_c)
        perm = rng.permutation(n)
        permuted = sample_indices(conf[perm], np.ones(n, bool), "top_nc", n_c)
        # positions selected in the permuted map are the permuted images
        assert set(perm[permuted]) == set(base)
