import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oracles import iqp_bruteforce, random_iqp
from partmatch.graph_match import (MovingAverageState, build_affinity, objective, raw_affinity, regularizer,
                                   solve_iqp_exact, solve_iqp_local, threshold_baseline, update_moving_average)

ORTHO = np.array([[1.0, 0.0], [0.0, 1.0]])


def test_identical_orthogonal_parts():
    np.testing.assert_allclose(build_affinity(ORTHO, ORTHO).matrix, [[1, 1], [1, 1]], atol=1e-15)


def test_centering_subtracts_edge_mean():
    state = MovingAverageState(2)
    update_moving_average(state, np.array([[0.3, 1.0], [1.0, 0.7]]))
    aff = build_affinity(ORTHO, ORTHO, state)
    np.testing.assert_allclose(aff.matrix, [[1, 0], [0, 1]], atol=1e-15)
    np.testing.assert_allclose(aff.raw, [[1, 1], [1, 1]], atol=1e-15)
    assert state.count == 1  # building never mutates the state


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        raw_affinity(np.ones((3, 4)), np.ones((3, 5)))
    state = MovingAverageState(3)
    update_moving_average(state, np.zeros((3, 3)))
    with pytest.raises(ValueError):
        build_affinity(np.ones((2, 4)), np.ones((2, 4)), state)
    with pytest.raises(ValueError):
        update_moving_average(state, np.zeros((2, 2)))


def test_coincident_parts_give_zero_edge():
    f = np.array([[1.0, 2.0], [1.0, 2.0], [0.0, 1.0]])
    m = raw_affinity(f, f)
    assert m[0, 1] == 0.0 and m[1, 0] == 0.0
    assert np.all(np.isfinite(m))


@given(hnp.arrays(np.float64, (2, 5, 3), elements=st.floats(-100, 100)))
def test_affinity_symmetric_and_bounded(f):
    m = raw_affinity(f[0], f[1])
    np.testing.assert_allclose(m, m.T, atol=1e-6)
    off = m[~np.eye(5, dtype=bool)]
    assert np.all(np.abs(off) <= 1 + 1e-12)


def test_first_update_initialises():
    state = MovingAverageState(3)
    batch = np.random.default_rng(1).normal(size=(4, 3, 3))
    update_moving_average(state, batch)
    mean = batch.mean(axis=0)
    np.testing.assert_allclose(state.diag_mean, np.diag(mean))
    np.testing.assert_allclose(state.edge_mean, mean - np.diag(np.diag(mean)))


def test_ema_geometric_convergence_and_rho_zero(rng):
    state = MovingAverageState(3)
    update_moving_average(state, np.zeros((3, 3)))
    x = rng.normal(size=(3, 3))
    x = (x + x.T) / 2
    for k in range(1, 6):
        update_moving_average(state, x)
        np.testing.assert_allclose(state.diag_mean, (1 - 0.9 ** k) * np.diag(x), rtol=1e-12)
    fast = MovingAverageState(3, momentum=0.0)
    for _ in range(3):
        y = rng.normal(size=(3, 3))
        update_moving_average(fast, y)
        np.testing.assert_array_equal(fast.diag_mean, np.diag(y))


def test_regularizer_examples():
    state = MovingAverageState(2)
    with pytest.raises(ValueError):
        regularizer(state, 0.9)
    update_moving_average(state, np.diag([0.2, 0.4]))
    assert regularizer(state, 0.0).tolist() == [0.0, 0.0]
    np.testing.assert_allclose(regularizer(state, 1.0), [0.2, 0.4])
    update_moving_average(ones := MovingAverageState(3), np.eye(3))
    np.testing.assert_allclose(regularizer(ones, 0.9), [0.9] * 3)


def test_exact_examples():
    r = solve_iqp_exact(np.eye(2), [0.5, 0.5])
    assert r.v.tolist() == [1, 1] and r.objective == 1.0
    r = solve_iqp_exact([[1.0, -2.0], [-2.0, 1.0]], [0.0, 0.0])
    assert r.v.tolist() == [1, 0] and r.objective == 1.0
    m = np.random.default_rng(0).normal(size=(4, 4))
    r = solve_iqp_exact(m, np.full(4, 4 * np.abs(m).max() + 1))
    assert r.v.tolist() == [0, 0, 0, 0] and r.objective == 0.0


def test_exact_bound():
    with pytest.raises(ValueError):
        solve_iqp_exact(np.zeros((21, 21)), np.zeros(21))


def test_objective_identity(rng):
    m, lam = random_iqp(rng, 6)
    v = np.array([1, 0, 1, 1, 0, 1])
    assert objective(m, lam, v) == pytest.approx(v @ m @ v - lam @ v, abs=1e-12)


@pytest.mark.parametrize("dyadic", [False, True])
def test_exact_matches_bruteforce(dyadic):
    rng = np.random.default_rng(7 + dyadic)
    for _ in range(150):
        n = int(rng.integers(2, 9))
        m, lam = random_iqp(rng, n, dyadic)
        got = solve_iqp_exact(m, lam)
        v, val = iqp_bruteforce(m, lam)
        assert got.v.tolist() == v.tolist()
        assert got.objective == val


def test_local_search_close_to_exact():
    rng = np.random.default_rng(11)
    hits = 0
    for _ in range(1000):
        n = int(rng.integers(2, 11))
        m, lam = random_iqp(rng, n)
        exact = solve_iqp_exact(m, lam)
        local = solve_iqp_local(m, lam, seed=0)
        assert local.objective <= exact.objective
        assert local.objective >= max(0.0, objective(m, lam, np.ones(n)))
        hits += local.objective == exact.objective
    assert hits >= 950


def test_local_search_deterministic(rng):
    m, lam = random_iqp(rng, 12)
    a, b = solve_iqp_local(m, lam, seed=5), solve_iqp_local(m, lam, seed=5)
    assert a.v.tolist() == b.v.tolist() and a.objective == b.objective


def test_local_trivial_cases(rng):
    m = np.abs(rng.normal(size=(7, 7)))
    assert solve_iqp_local(m + m.T, np.zeros(7)).v.tolist() == [1] * 7
    assert solve_iqp_local(np.zeros((5, 5)), np.full(5, 0.3)).v.tolist() == [0] * 5


@given(hnp.arrays(np.float64, (6, 6), elements=st.floats(0, 10)))
def test_nonnegative_affinity_selects_everything(a):
    assert solve_iqp_exact(a + a.T, np.zeros(6)).v.tolist() == [1] * 6


def test_threshold_examples():
    m = np.array([[0.2, 5.0], [5.0, 0.8]])
    assert threshold_baseline(m, 0.5).v.tolist() == [0, 1]
    assert threshold_baseline(m, 0.1).v.tolist() == [1, 1]
    assert threshold_baseline(m, 0.9).v.tolist() == [0, 0]


@given(st.integers(0, 2**31 - 1))
def test_lambda_weighted_selection_non_increasing(seed):
    """For lam_bar = lam * d with d > 0, the optimum's d-weighted selection is non-increasing in lam.

    With uniform d this is the part count itself.
    """
    rng = np.random.default_rng(seed)
    m, _ = random_iqp(rng, 6)
    d = rng.uniform(0.1, 2.0, size=6)
    grid = [0.0, 0.6, 0.7, 0.8, 0.9, 1.0, 2.0, 5.0]
    weighted = [float(d @ solve_iqp_exact(m, lam * d).v) for lam in grid]
    assert all(b <= a + 1e-12 for a, b in zip(weighted, weighted[1:]))
    counts = [solve_iqp_exact(m, lam * np.full(6, 0.7)).n_selected for lam in grid]
    assert all(b <= a for a, b in zip(counts, counts[1:]))
