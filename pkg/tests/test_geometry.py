import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trace_diag.errors import DegenerateInputError, UndefinedCKAError
from trace_diag.geometry import (
    effective_rank,
    feature_variance,
    format_pct,
    geometry_report,
    linear_cka,
    pct_delta,
    round_half_away,
)


def with_spectrum(sv, n=40, d=12, seed=0):
    """n x d matrix whose centered singular values are exactly ``sv``."""
    r = np.random.default_rng(seed)
    k = len(sv)
    A = r.normal(size=(n, k))
    A -= A.mean(axis=0)  # columns orthogonal to the ones vector
    U, _ = np.linalg.qr(A)
    V, _ = np.linalg.qr(r.normal(size=(d, k)))
    return U @ np.diag(sv) @ V.T + r.normal(size=d)  # row offset vanishes under centering


def entropy_oracle(sv):
    p = np.asarray(sv, float) / np.sum(sv)
    return float(np.exp(-np.sum(p * np.log(p))))


@pytest.mark.parametrize("k", [1, 2, 4, 7])
def test_uniform_spectrum(k):
    assert effective_rank(with_spectrum([3.0] * k)) == pytest.approx(k, abs=1e-9)


def test_two_one_one():
    assert effective_rank(with_spectrum([2.0, 1.0, 1.0])) == pytest.approx(2.8284, abs=1e-4)
    assert entropy_oracle([2, 1, 1]) == pytest.approx(np.exp(0.5 * np.log(2) + 0.5 * np.log(4)))


def test_rank_one():
    x = np.random.default_rng(3).normal(size=(30, 1))
    assert effective_rank(x @ np.ones((1, 5))) == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.1, 10.0), min_size=1, max_size=8), st.integers(0, 1000))
def test_matches_entropy_oracle(sv, seed):
    X = with_spectrum(sv, seed=seed)
    r = effective_rank(X)
    assert r == pytest.approx(entropy_oracle(sv), rel=1e-7)
    assert 1 - 1e-9 <= r <= np.linalg.matrix_rank(X - X.mean(axis=0)) + 1e-9


def test_effective_rank_invariances(rng):
    X = rng.normal(size=(25, 6)) @ rng.normal(size=(6, 6))
    base = effective_rank(X)
    Q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    assert effective_rank(X @ Q) == pytest.approx(base, rel=1e-9)
    assert effective_rank(X[rng.permutation(25)][:, rng.permutation(6)]) == pytest.approx(base, rel=1e-9)
    assert effective_rank(7.5 * X) == pytest.approx(base, rel=1e-9)
    assert effective_rank(X - X.mean(axis=0)) == pytest.approx(base, rel=1e-12)


def test_constant_matrix_degenerate():
    with pytest.raises(DegenerateInputError):
        effective_rank(np.full((5, 3), 2.0))


def test_feature_variance_examples():
    assert feature_variance(np.full((4, 3), 9.0)) == 0.0
    assert feature_variance(np.array([[1.0], [-1.0]])) == 1.0


def variance_brute(X):
    n, d = X.shape
    total = 0.0
    for j in range(d):
        mean = sum(X[i, j] for i in range(n)) / n
        for i in range(n):
            total += (X[i, j] - mean) ** 2
    return total / (n * d)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 10_000), st.floats(0.1, 20))
def test_feature_variance_brute_force_and_homogeneity(n, d, seed, s):
    X = np.random.default_rng(seed).normal(size=(n, d))
    assert feature_variance(X) == pytest.approx(variance_brute(X), abs=1e-12)
    assert feature_variance(s * X) == pytest.approx(s * s * feature_variance(X), rel=1e-9)


def test_cka_worked_example():
    X = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
    assert linear_cka(X, X[:, :1]) == pytest.approx(4 / (2 * np.sqrt(2) * 2), abs=1e-12)
    assert linear_cka(X, X[:, :1]) == pytest.approx(0.7071, abs=1e-4)


def cka_oracle(X, Y):
    X = X - X.mean(axis=0)
    Y = Y - Y.mean(axis=0)
    return np.linalg.norm(X.T @ Y) ** 2 / (np.linalg.norm(X.T @ X) * np.linalg.norm(Y.T @ Y))


@pytest.mark.parametrize("n,d1,d2", [(30, 5, 8), (10, 40, 25)])
def test_cka_matches_oracle_and_symmetry(rng, n, d1, d2):
    X, Y = rng.normal(size=(n, d1)), rng.normal(size=(n, d2))
    assert linear_cka(X, Y) == pytest.approx(cka_oracle(X, Y), rel=1e-9)
    assert linear_cka(X, Y) == pytest.approx(linear_cka(Y, X), rel=1e-12)
    assert 0 <= linear_cka(X, Y) <= 1


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_cka_invariance(seed, c):
    r = np.random.default_rng(seed)
    X = r.normal(size=(20, 6))
    Y = X @ r.normal(size=(6, 4)) + 0.3 * r.normal(size=(20, 4))
    Q1, _ = np.linalg.qr(r.normal(size=(6, 6)))
    Q2, _ = np.linalg.qr(r.normal(size=(4, 4)))
    base = linear_cka(X, Y)
    assert linear_cka(c * X @ Q1, Y @ Q2) == pytest.approx(base, abs=1e-6)
    assert linear_cka(X, c * X @ Q1) == pytest.approx(1.0, abs=1e-9)


def test_cka_zero_operand():
    with pytest.raises(UndefinedCKAError):
        linear_cka(np.ones((5, 2)), np.random.default_rng(0).normal(size=(5, 2)))


@pytest.mark.parametrize("pre,post,shown", [
    (871.3, 350.5, "-59.8%"),
    (3.77e-1, 1.00e-3, "-99.7%"),
    (10.0, 10.0, "+0.0%"),
    (1.0, 1.5, "+50.0%"),
])
def test_delta_display(pre, post, shown):
    assert format_pct(pct_delta(pre, post)) == shown


def test_round_half_away_from_zero():
    assert round_half_away(0.25, 1) == 0.3
    assert round_half_away(-0.25, 1) == -0.3
    assert round_half_away(2.675, 2) == 2.68


def test_identity_report(rng):
    X = rng.normal(size=(50, 10))
    rep = geometry_report(X, X)
    assert rep.eff_rank_delta_pct == 0.0 and rep.var_delta_pct == 0.0
    assert rep.cka == pytest.approx(1.0)
    d = rep.to_dict()
    assert d["display"]["eff_rank_delta"] == "+0.0%" and d["display"]["cka"] == "1.000"


def test_report_row_mismatch(rng):
    with pytest.raises(ValueError):
        geometry_report(rng.normal(size=(5, 2)), rng.normal(size=(6, 2)))
