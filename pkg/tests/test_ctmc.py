import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats
from scipy.linalg import expm

from mkvswitch.ctmc import (ChainPath, build_qmatrix, ergodic_profile, invariant_measure, is_irreducible,
                            sample_path, transition_matrix, tv_distance)
from mkvswitch.errors import LengthMismatch, NegativeRate, NonConservative, Reducible
from mkvswitch.noise import derive_stream

Q2 = [[-1.0, 1.0], [2.0, -2.0]]
Q3 = [[-2.0, 1.0, 1.0], [1.0, -1.0, 0.0], [3.0, 0.0, -3.0]]


def two_state(a, b):
    return build_qmatrix([[-a, a], [b, -b]])


@st.composite
def generators(draw, max_states=5):
    m = draw(st.integers(2, max_states))
    rates = np.array(draw(st.lists(st.floats(0.1, 5.0), min_size=m * m, max_size=m * m))).reshape(m, m)
    np.fill_diagonal(rates, 0.0)
    return build_qmatrix(rates, offdiagonal=True)


# -- construction ------------------------------------------------------------

def test_offdiagonal_rates_fill_diagonal():
    q = build_qmatrix([[np.nan, 1.0], [2.0, np.nan]])
    assert np.array_equal(q.rates, np.array(Q2))
    q = build_qmatrix([[0.0, 1.0], [2.0, 0.0]], offdiagonal=True)
    assert np.array_equal(q.rates, np.array(Q2))


def test_absorbing_state_is_reducible():
    with pytest.raises(Reducible):
        build_qmatrix([[-1.0, 1.0], [0.0, 0.0]])


def test_three_state_accepted():
    # edges 0->1, 0->2, 1->0, 2->0: both BFS from 0 reach every node
    q = build_qmatrix(Q3)
    assert q.size == 3 and is_irreducible(q.rates)


def test_rejects_bad_rows_and_rates():
    with pytest.raises(NonConservative):
        build_qmatrix([[-1.0, 2.0], [1.0, -1.0]])
    with pytest.raises(NegativeRate):
        build_qmatrix([[1.0, -1.0], [1.0, -1.0]])
    with pytest.raises(ValueError):
        build_qmatrix([[1.0, 2.0, 3.0]])


def test_single_state_chain_is_trivial():
    q = build_qmatrix([[0.0]])
    assert np.array_equal(invariant_measure(q), [1.0])
    path = sample_path(q, 0, 5.0, 1.0, derive_stream(1, "c"))
    assert len(path) == 0


# -- invariant measure ---------------------------------------------------------

def test_invariant_two_state():
    assert np.allclose(invariant_measure(build_qmatrix(Q2)), [2 / 3, 1 / 3], atol=1e-14)


def test_invariant_three_state_hand_solution():
    # columns of pi Q = 0: pi1 = pi0, pi2 = pi0 / 3, normalised -> (3, 3, 1) / 7
    pi = invariant_measure(build_qmatrix(Q3))
    assert np.allclose(pi, [3 / 7, 3 / 7, 1 / 7], atol=1e-14)


@pytest.mark.parametrize("m", [2, 3, 6])
def test_symmetric_chain_uniform(m):
    rates = np.full((m, m), 0.7)
    np.fill_diagonal(rates, 0.0)
    assert np.allclose(invariant_measure(build_qmatrix(rates, offdiagonal=True)), 1.0 / m, atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(generators())
def test_invariant_residual(q):
    pi = invariant_measure(q)
    assert np.all(pi >= 0) and abs(pi.sum() - 1) < 1e-12
    assert np.abs(pi @ q.rates).max() <= 1e-10


# -- transition semigroup ---------------------------------------------------

@pytest.mark.parametrize("t", [0.1, 1.0, 10.0])
@pytest.mark.parametrize("a,b", [(1.0, 2.0), (0.3, 5.0)])
def test_two_state_closed_form(a, b, t):
    p = transition_matrix(two_state(a, b), t)
    pi1, pi2 = b / (a + b), a / (a + b)
    assert abs(p[0, 0] - (pi1 + pi2 * math.exp(-(a + b) * t))) <= 1e-10


def test_identity_at_zero():
    assert np.array_equal(transition_matrix(build_qmatrix(Q3), 0.0), np.eye(3))


def test_matches_scipy_expm():
    q = build_qmatrix(Q3)
    for t in (0.05, 0.7, 3.0):
        assert np.abs(transition_matrix(q, t) - expm(q.rates * t)).max() < 1e-12


@settings(max_examples=40, deadline=None)
@given(generators(), st.floats(0.0, 5.0), st.floats(0.0, 5.0))
def test_semigroup_and_stochasticity(q, s, t):
    ps, pt, pst = transition_matrix(q, s), transition_matrix(q, t), transition_matrix(q, s + t)
    for p in (ps, pt, pst):
        assert p.min() >= -1e-14
        assert np.abs(p.sum(axis=1) - 1).max() <= 1e-12
    assert np.linalg.norm(pst - ps @ pt) <= 1e-10
    pi = invariant_measure(q)
    assert np.abs(pi @ pt - pi).max() <= 1e-10


# -- total variation ---------------------------------------------------------

def test_tv_examples():
    assert tv_distance([0.3, 0.7], [0.3, 0.7]) == 0.0
    assert tv_distance([1.0, 0.0], [0.0, 1.0]) == 2.0
    assert tv_distance([0.5, 0.5], [0.75, 0.25]) == 0.5
    with pytest.raises(LengthMismatch):
        tv_distance([1.0], [0.5, 0.5])


prob = st.lists(st.floats(0.0, 1.0), min_size=4, max_size=4).filter(lambda v: sum(v) > 0.1).map(
    lambda v: np.array(v) / sum(v))


@given(prob, prob, prob)
def test_tv_metric(p, q, r):
    assert tv_distance(p, q) == pytest.approx(tv_distance(q, p), abs=1e-15)
    assert tv_distance(p, r) <= tv_distance(p, q) + tv_distance(q, r) + 1e-12


# -- ergodic profile -----------------------------------------------------------

def test_profile_closed_form_and_tail():
    a, b = 1.0, 2.0
    grid = np.linspace(0.0, 40.0 / (a + b), 81)
    prof = ergodic_profile(two_state(a, b), grid)
    pi = np.array([b, a]) / (a + b)
    decay = np.exp(-(a + b) * grid)
    assert np.abs(prof.tv[0] - 2 * pi[1] * decay).max() <= 1e-8
    assert np.abs(prof.tv[1] - 2 * pi[0] * decay).max() <= 1e-8
    assert prof.tv[:, 0] == pytest.approx([2 * pi[1], 2 * pi[0]])
    assert prof.tv[:, -1].max() < 1e-8
    assert prof.decay_rate == pytest.approx(a + b, rel=1e-3)
    assert len(list(prof.rows())) == 2 * len(grid)


def test_profile_at_zero_three_state():
    q = build_qmatrix(Q3)
    prof = ergodic_profile(q, [0.0, 1.0, 2.0])
    pi = invariant_measure(q)
    for i in range(3):
        assert prof.tv[i, 0] == pytest.approx(np.abs(np.eye(3)[i] - pi).sum(), abs=1e-14)


# -- chain paths ---------------------------------------------------------------

def test_path_validation():
    with pytest.raises(ValueError):
        ChainPath(0, [0.5, 0.4], [1, 0], 1.0)
    with pytest.raises(ValueError):
        ChainPath(0, [0.5], [0], 1.0)
    with pytest.raises(LengthMismatch):
        ChainPath(0, [0.5], [1, 0], 1.0)


def test_path_is_right_continuous():
    path = ChainPath(0, [0.5, 0.8], [1, 0], 1.0)
    assert path.state_at(0.0) == 0
    assert path.state_at(0.4999) == 0
    assert path.state_at(0.5) == 1
    assert path.state_at(0.8) == 0
    assert np.allclose(path.occupation(2), [0.7, 0.3])


def test_long_hold_gives_constant_path():
    q = build_qmatrix(Q2)
    path = sample_path(q, 0, 1e-6, 1.0, derive_stream(3, "hold"))
    assert len(path) == 0 and path.state_at(1e-6) == 0


def test_sample_path_reproducible():
    q = build_qmatrix(Q3)
    a = sample_path(q, 0, 20.0, 1.0, derive_stream(11, ("omega0", 0)))
    b = sample_path(q, 0, 20.0, 1.0, derive_stream(11, ("omega0", 0)))
    assert a == b and len(a) > 0


def test_time_scale_is_exact_rescaling():
    q = build_qmatrix(Q2)
    slow = sample_path(q, 0, 50.0, 1.0, derive_stream(5, "x"))
    fast = sample_path(q, 0, 0.5, 0.01, derive_stream(5, "x"))
    assert np.allclose(fast.jump_times / 0.01, slow.jump_times, rtol=1e-12)
    assert np.array_equal(fast.states, slow.states)


@pytest.fixture(scope="module")
def many_paths():
    q = build_qmatrix(Q2)
    rng = derive_stream(2024, "many").generator()
    return q, rng


def test_occupation_matches_invariant_law(many_paths):
    q, rng = many_paths
    pi = invariant_measure(q)
    finals = np.array([sample_path(q, 0, 50.0, 1.0, rng).state_at(50.0) for _ in range(10_000)])
    frac = np.mean(finals == 0)
    se = math.sqrt(pi[0] * pi[1] / len(finals))
    assert abs(frac - pi[0]) <= 3 * se


def test_halving_eps_doubles_jump_count(many_paths):
    q, rng = many_paths
    counts = {eps: np.mean([len(sample_path(q, 0, 1.0, eps, rng)) for _ in range(10_000)]) for eps in (0.2, 0.1)}
    assert 1.9 < counts[0.1] / counts[0.2] < 2.1


def test_rescaled_jump_count_law(many_paths):
    q, rng = many_paths
    a = [len(sample_path(q, 0, 2.0, 1.0, rng)) for _ in range(10_000)]
    b = [len(sample_path(q, 0, 0.2, 0.1, rng)) for _ in range(10_000)]
    top = 6
    ca = np.bincount(np.minimum(a, top), minlength=top + 1)
    cb = np.bincount(np.minimum(b, top), minlength=top + 1)
    _, p, _, _ = stats.chi2_contingency(np.vstack([ca, cb]))
    assert p > 0.001
