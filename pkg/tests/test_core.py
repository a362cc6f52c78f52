import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from rdpcalc.core import (ChannelMatrix, ConvergenceTrace, CostMatrix, DiscreteSource,
                          DistortionMatrix, DomainError, PerceptionMeasure,
                          ReconstructionDist, ConfigurationError, SolverConfig,
                          entropy_term, expected_distortion, mutual_information,
                          output_marginal, perception_kl, perception_tv)


def mi_loop(p, w, r):
    total = 0.0
    for i in range(len(p)):
        for j in range(len(r)):
            if p[i] * w[i][j] > 0:
                total += w[i][j] * p[i] * (math.log(w[i][j]) - math.log(r[j]))
    return total


def kl_loop(p, r):
    return sum(pi * (math.log(pi) - math.log(ri)) for pi, ri in zip(p, r) if pi > 0)


def simplex(n, min_value=0.0):
    return arrays(float, n, elements=st.floats(0.01, 1.0)).map(lambda x: x / x.sum())


# -- types -----------------------------------------------------------------

def test_source_drops_zero_atoms():
    src = DiscreteSource([0.0, 1.0, 2.0], [0.5, 0.0, 0.5])
    assert src.size == 2
    np.testing.assert_array_equal(src.points, [0.0, 2.0])


def test_source_rejects_bad_input():
    with pytest.raises(DomainError):
        DiscreteSource([0.0, 1.0], [0.5, 0.6])
    with pytest.raises(DomainError):
        DiscreteSource([1.0, 0.0], [0.5, 0.5])
    with pytest.raises(DomainError):
        DiscreteSource([0.0, 1.0], [-0.5, 1.5])


def test_source_bernoulli():
    src = DiscreteSource.bernoulli(0.1)
    np.testing.assert_allclose(src.p, [0.1, 0.9])
    with pytest.raises(ConfigurationError):
        DiscreteSource.bernoulli(1.0)


def test_types_are_read_only():
    src = DiscreteSource.from_probs([0.25, 0.75])
    with pytest.raises(ValueError):
        src.p[0] = 0.5


def test_channel_rows_must_sum_to_one():
    ChannelMatrix([[0.5, 0.5], [0.2, 0.8]])
    with pytest.raises(DomainError):
        ChannelMatrix([[0.5, 0.6], [0.2, 0.8]])
    with pytest.raises(DomainError):
        ChannelMatrix([[1.5, -0.5], [0.2, 0.8]])


def test_reconstruction_on_simplex():
    with pytest.raises(DomainError):
        ReconstructionDist([0.5, 0.6])


def test_matrices_reject_negative_entries():
    with pytest.raises(DomainError):
        DistortionMatrix([[0.0, -1.0], [1.0, 0.0]])
    with pytest.raises(DomainError):
        CostMatrix([[0.0, np.inf], [1.0, 0.0]])


def test_tv_cost_matrix():
    np.testing.assert_array_equal(CostMatrix.tv(3).c, 1 - np.eye(3))


def test_perception_measure_validation():
    with pytest.raises(ConfigurationError):
        PerceptionMeasure("hellinger")
    with pytest.raises(ConfigurationError):
        PerceptionMeasure("wasserstein")
    with pytest.raises(DomainError):
        PerceptionMeasure("tv").cost_matrix(2, 3)


def test_solver_config_validation():
    with pytest.raises(ConfigurationError):
        SolverConfig(epsilon=0.0)
    with pytest.raises(ConfigurationError):
        SolverConfig(max_outer=0)


def test_trace_descent_and_tsv():
    tr = ConvergenceTrace()
    for f in (1.0, 0.5, 0.5 + 1e-13, 0.6):
        tr.append(f, 0.1, 0.2, 3)
    assert len(tr) == 4
    assert tr.descent_violations() == [3]
    lines = tr.to_tsv().splitlines()
    assert lines[0] == "iter\tobjective\tdistortion\tperception"
    assert lines[1].split("\t")[0] == "1"
    assert len(lines) == 5


# -- functionals -----------------------------------------------------------

def test_mi_perfect_channel():
    assert mutual_information([0.5, 0.5], np.eye(2), [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-15)


def test_mi_independent_channel_is_zero():
    w = [[0.3, 0.7], [0.3, 0.7]]
    assert mutual_information([0.1, 0.9], w, [0.3, 0.7]) == pytest.approx(0.0, abs=1e-16)


def test_mi_matches_scalar_loop():
    p = [0.1, 0.9]
    w = [[0.9, 0.1], [0.2, 0.8]]
    r = list(np.array(p) @ np.array(w))
    assert mutual_information(p, w, r) == pytest.approx(mi_loop(p, w, r), abs=1e-15)


def test_mi_zero_r_with_mass_is_domain_error():
    with pytest.raises(DomainError):
        mutual_information([0.5, 0.5], np.eye(2), [1.0, 0.0])


def test_mi_zero_r_without_mass_is_fine():
    w = [[1.0, 0.0], [1.0, 0.0]]
    assert mutual_information([0.5, 0.5], w, [1.0, 0.0]) == 0.0


def test_mi_dimension_mismatch():
    with pytest.raises(DomainError):
        mutual_information([0.5, 0.5], np.eye(3), [1 / 3] * 3)
    with pytest.raises(DomainError):
        mutual_information([0.5, 0.5], np.eye(2), [1 / 3] * 3)


def test_expected_distortion_examples():
    ham = 1 - np.eye(2)
    assert expected_distortion([0.3, 0.7], np.eye(2), ham) == 0.0
    assert expected_distortion([0.5, 0.5], np.full((2, 2), 0.5), ham) == pytest.approx(0.5)
    assert expected_distortion([0.1, 0.9], [[1, 0], [0.5, 0.5]], ham) == pytest.approx(0.45, abs=1e-15)
    with pytest.raises(DomainError):
        expected_distortion([0.5, 0.5], np.eye(2), np.zeros((2, 3)))


def test_perception_kl_examples():
    assert perception_kl([0.3, 0.7], [0.3, 0.7]) == 0.0
    expected = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
    assert perception_kl([0.5, 0.5], [0.25, 0.75]) == pytest.approx(expected, abs=1e-15)
    with pytest.raises(DomainError):
        perception_kl([0.5, 0.5], [1.0, 0.0])
    with pytest.raises(DomainError):
        perception_kl([0.5, 0.5], [0.2, 0.3, 0.5])


def test_perception_kl_random_matches_loop():
    rng = np.random.default_rng(7)
    p, r = rng.dirichlet(np.ones(4)), rng.dirichlet(np.ones(4))
    assert perception_kl(p, r) == pytest.approx(kl_loop(p, r), abs=1e-15)


def test_perception_tv_examples():
    assert perception_tv([0.4, 0.6], [0.4, 0.6]) == 0.0
    assert perception_tv([1.0, 0.0], [0.0, 1.0]) == 1.0
    assert perception_tv([0.1, 0.9], [0.12, 0.88]) == pytest.approx(0.02, abs=1e-15)


def test_output_marginal_and_entropy_term():
    np.testing.assert_allclose(output_marginal([0.1, 0.9], [[1, 0], [0.5, 0.5]]), [0.55, 0.45])
    pi = np.array([[0.5, 0.0], [0.0, 0.5]])
    assert entropy_term(pi) == pytest.approx(math.log(0.5))


# -- properties ------------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(st.integers(2, 5), st.integers(2, 5), st.data())
def test_mi_nonnegative_with_true_marginal(m, n, data):
    p = data.draw(simplex(m))
    w = np.stack([data.draw(simplex(n)) for _ in range(m)])
    r = p @ w
    val = mutual_information(p, w, r)
    assert val >= -1e-15
    assert val == pytest.approx(mi_loop(p, w, r), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 5), st.data())
def test_mi_zero_iff_rows_equal_r(n, data):
    p = data.draw(simplex(3))
    row = data.draw(simplex(n))
    w = np.tile(row, (3, 1))
    assert abs(mutual_information(p, w, row)) < 1e-14


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 6), st.data())
def test_kl_nonnegative_zero_iff_equal(n, data):
    p = data.draw(simplex(n))
    r = data.draw(simplex(n))
    assert perception_kl(p, r) >= -1e-15
    assert perception_kl(p, p) == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 5), st.data())
def test_functionals_invariant_under_column_permutation(n, data):
    p = data.draw(simplex(3))
    w = np.stack([data.draw(simplex(n)) for _ in range(3)])
    d = data.draw(arrays(float, (3, n), elements=st.floats(0, 5)))
    perm = data.draw(st.permutations(range(n)))
    r = p @ w
    assert mutual_information(p, w[:, perm], r[perm]) == pytest.approx(
        mutual_information(p, w, r), abs=1e-13)
    assert expected_distortion(p, w[:, perm], d[:, perm]) == pytest.approx(
        expected_distortion(p, w, d), abs=1e-13)
