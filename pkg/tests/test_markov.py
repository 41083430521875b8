from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from longrun.models.markov import (
    DimensionError,
    ErgodicityError,
    InvariantMeasure,
    LyapunovWeight,
    StateSpace,
    StochasticityError,
    TransitionKernel,
    WeightedFn,
    compose,
    dobrushin_delta,
    fpv_profile,
    identity_kernel,
    invariant_measure,
    kartashov_rho,
    kernel_power,
    span_seminorm,
    v_norm_fn,
    v_norm_measure_diff,
)
from tests.strategies import ergodic_kernels, permuted

TWO_STATE = [[0.9, 0.1], [0.2, 0.8]]


@pytest.fixture
def two_state():
    return TransitionKernel(space=StateSpace.indexed(2), rows=TWO_STATE)


def test_compose_two_state(two_state):
    K2 = compose(two_state, two_state)
    np.testing.assert_allclose(
        K2.rows, [[0.83, 0.17], [0.34, 0.66]], atol=1e-15
    )
    assert K2.step == 2


def test_compose_with_identity_is_neutral(two_state):
    K = compose(identity_kernel(two_state.space), two_state)
    np.testing.assert_array_equal(K.rows, two_state.rows)
    assert K.step == two_state.step


def test_compose_rejects_other_space(two_state):
    other = TransitionKernel(space=StateSpace.indexed(3), rows=np.eye(3))
    with pytest.raises(DimensionError):
        compose(two_state, other)


def test_kernel_power_matches_repeated_compose(two_state):
    K = two_state
    for _ in range(3):
        K = compose(K, two_state)
    P4 = kernel_power(two_state, 4)
    np.testing.assert_allclose(P4.rows, K.rows, atol=1e-15)
    assert P4.step == 4


def test_kernel_keeps_fractional_steps():
    K = TransitionKernel(
        space=StateSpace.indexed(2), rows=TWO_STATE, step=Fraction(1, 8)
    )
    assert kernel_power(K, 8).step == 1


def test_rejects_rows_not_summing_to_one():
    with pytest.raises(StochasticityError):
        TransitionKernel(space=StateSpace.indexed(2), rows=[[0.9, 0.0], [0, 1]])


def test_rejects_negative_entries():
    with pytest.raises(StochasticityError):
        TransitionKernel(
            space=StateSpace.indexed(2), rows=[[1.1, -0.1], [0.5, 0.5]]
        )


def test_renormalizes_tiny_deviation():
    K = TransitionKernel(
        space=StateSpace.indexed(2), rows=[[0.9 + 1e-11, 0.1], [0.5, 0.5]]
    )
    np.testing.assert_allclose(K.rows.sum(axis=1), 1.0, atol=1e-15)


def test_rejects_non_square():
    with pytest.raises(DimensionError):
        TransitionKernel(space=StateSpace.indexed(2), rows=[[1.0, 0.0]])


def test_rows_are_read_only(two_state):
    with pytest.raises(ValueError):
        two_state.rows[0, 0] = 0.5


def test_apply_and_push(two_state):
    np.testing.assert_allclose(two_state.apply([0.0, 1.0]), [0.1, 0.8])
    np.testing.assert_allclose(two_state.push([1.0, 0.0]), [0.9, 0.1])


def test_invariant_measure_two_state(two_state):
    mu = invariant_measure(two_state)
    np.testing.assert_allclose(mu.weights, [2 / 3, 1 / 3], atol=1e-12)
    assert mu.integrate([0.0, 1.0]) == pytest.approx(1 / 3, abs=1e-12)


def test_invariant_measure_power_method_agrees(two_state):
    mu = invariant_measure(two_state, method="power")
    np.testing.assert_allclose(mu.weights, [2 / 3, 1 / 3], atol=1e-11)


@given(ergodic_kernels())
def test_solve_and_power_iteration_agree(K):
    solved = invariant_measure(K).weights
    iterated = invariant_measure(K, method="power").weights
    np.testing.assert_allclose(solved, iterated, atol=1e-8)


def test_invariant_measure_single_state():
    K = TransitionKernel(space=StateSpace.indexed(1), rows=[[1.0]])
    assert invariant_measure(K).weights.tolist() == [1.0]


def test_reducible_chain_raises():
    K = TransitionKernel(space=StateSpace.indexed(2), rows=np.eye(2))
    with pytest.raises(ErgodicityError) as info:
        invariant_measure(K)
    assert info.value.condition == "ERd"


def test_periodic_chain_raises():
    K = TransitionKernel(
        space=StateSpace.indexed(2), rows=[[0.0, 1.0], [1.0, 0.0]]
    )
    with pytest.raises(ErgodicityError):
        invariant_measure(K)


def test_transient_state_gets_no_mass():
    K = TransitionKernel(
        space=StateSpace.indexed(3),
        rows=[[0.5, 0.5, 0.0], [0.5, 0.5, 0.0], [0.3, 0.3, 0.4]],
    )
    mu = invariant_measure(K)
    np.testing.assert_allclose(mu.weights, [0.5, 0.5, 0.0], atol=1e-12)


@given(ergodic_kernels())
def test_invariant_measure_is_stationary(K):
    mu = invariant_measure(K).weights
    np.testing.assert_allclose(K.push(mu), mu, atol=1e-12)
    assert mu.sum() == pytest.approx(1.0, abs=1e-12)


@given(ergodic_kernels(), st.randoms())
def test_invariant_measure_follows_relabeling(K, rnd):
    perm = np.array(rnd.sample(range(K.n), K.n))
    mu = invariant_measure(K).weights
    mu_perm = invariant_measure(permuted(K, perm)).weights
    np.testing.assert_allclose(mu_perm, mu[perm], atol=1e-11)


def test_dobrushin_and_kartashov_two_state(two_state):
    assert dobrushin_delta(two_state) == pytest.approx(0.7)
    V = LyapunovWeight.constant(2)
    assert kartashov_rho(two_state, V) == pytest.approx(0.7)


def test_dobrushin_identical_rows_is_zero():
    K = TransitionKernel(
        space=StateSpace.indexed(3), rows=[[0.2, 0.3, 0.5]] * 3
    )
    assert dobrushin_delta(K) == 0.0


@given(ergodic_kernels())
def test_rho_equals_delta_for_unit_weight(K):
    V = LyapunovWeight.constant(K.n)
    assert kartashov_rho(K, V) == pytest.approx(dobrushin_delta(K), abs=1e-12)


def test_v_norms():
    V = LyapunovWeight(values=[1.0, 2.0, 4.0])
    assert v_norm_fn(WeightedFn(values=[1.0, -4.0, 2.0], weight=V)) == 2.0
    gap = v_norm_measure_diff([0.5, 0.5, 0.0], [0.5, 0.0, 0.5], V)
    assert gap == pytest.approx(3.0)
    assert span_seminorm([3.0, -1.0, 2.0]) == 4.0


def test_v_norm_two_point_examples():
    V = LyapunovWeight(values=[1.0, 2.0])
    assert v_norm_fn(WeightedFn(values=[2.0, 3.0], weight=V)) == 2.0
    assert v_norm_measure_diff([1.0, 0.0], [0.0, 1.0], LyapunovWeight(values=[1.0, 3.0])) == 4.0


@given(
    st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=10),
    st.floats(-1e6, 1e6),
)
def test_span_ignores_shifts(values, shift):
    g = np.array(values)
    assert span_seminorm(g) >= 0.0
    assert span_seminorm(g + shift) == pytest.approx(span_seminorm(g), abs=1e-6)
    assert span_seminorm(np.full(len(values), shift)) == 0.0


@given(ergodic_kernels(min_n=3, max_n=3), ergodic_kernels(min_n=3, max_n=3))
def test_compose_is_associative(A, B):
    left = compose(compose(A, B), A)
    right = compose(A, compose(B, A))
    np.testing.assert_allclose(left.rows, right.rows, atol=1e-14)
    assert left.step == right.step == 3


@given(ergodic_kernels())
def test_dobrushin_is_submultiplicative(K):
    assert dobrushin_delta(kernel_power(K, 2)) <= dobrushin_delta(K) ** 2 + 1e-12


def test_weight_must_be_at_least_one():
    with pytest.raises(ValueError):
        LyapunovWeight(values=[0.5, 2.0])


def test_invariant_measure_validates_mass():
    with pytest.raises(ValueError):
        InvariantMeasure(space=StateSpace.indexed(2), weights=[0.5, 0.6])


def test_fpv_profile_unit_weight_is_one(two_state):
    profile = fpv_profile(two_state, LyapunovWeight.constant(2), 10)
    np.testing.assert_allclose(profile, [1.0, 1.0])


def test_fpv_profile_tracks_weight_growth(two_state):
    V = LyapunovWeight(values=[1.0, 3.0])
    profile = fpv_profile(two_state, V, 5)
    # from state 0, P V = 0.9 + 0.3 = 1.2 and later powers approach mu(V)
    assert profile[0] >= 1.2
    assert profile[1] <= 1.0 + 1e-12


def test_state_space_grid_labels_and_index():
    space = StateSpace.grid([0.0, 0.5, 1.0])
    assert space.labels == ("0", "0.5", "1")
    assert space.index("0.5") == 1
    assert space.dim == 1
    with pytest.raises(DimensionError):
        space.index("2")


def test_state_space_rejects_duplicates():
    with pytest.raises(ValueError):
        StateSpace(labels=["a", "a"])
