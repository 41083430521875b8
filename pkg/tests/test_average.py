import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from longrun.exceptions import ConfigError
from longrun.models.average import (
    RewardBoundError,
    RewardFunction,
    _lag1_autocorrelation,
    average_reward_exact,
    average_reward_mc,
    convergence_sweep,
    evaluate_exact,
    stability_sweep,
    unit_aggregate_exact,
)
from longrun.models.chain import CHAIN_CONTROLS, chain_model, substep_kernel
from longrun.models.markov import StateSpace, TransitionKernel, invariant_measure
from longrun.models.sde import (
    ControlFamily,
    ControlSet,
    DiscretizationLevel,
    MarkovControl,
    ou_model,
    reflected_bm_model,
)
from tests.strategies import ergodic_kernels

WIDE = ControlSet.interval(-10.0, 10.0)
BASE = [[0.9, 0.1], [0.2, 0.8]]
ALTERNATE = [[0.5, 0.5], [0.5, 0.5]]


@pytest.fixture
def two_state():
    return TransitionKernel(space=StateSpace.indexed(2), rows=BASE)


def test_exact_average_two_state(two_state):
    result = average_reward_exact(two_state, [0.0, 1.0])
    assert result.value == pytest.approx(1 / 3, abs=1e-12)
    assert result.method == "exact-invariant"
    assert result.std_error == 0.0


@given(ergodic_kernels(), st.floats(-10, 10))
def test_constant_reward_averages_to_itself(K, c):
    result = average_reward_exact(K, np.full(K.n, c))
    assert result.value == pytest.approx(c, abs=1e-10)


def test_doubly_stochastic_kernel_averages_uniformly():
    K = TransitionKernel(
        space=StateSpace.indexed(3),
        rows=[[0.5, 0.25, 0.25], [0.25, 0.5, 0.25], [0.25, 0.25, 0.5]],
    )
    assert average_reward_exact(K, [1.0, 2.0, 3.0]).value == pytest.approx(2.0)


def test_aggregate_size_must_match(two_state):
    with pytest.raises(ConfigError):
        average_reward_exact(two_state, [1.0, 2.0, 3.0])


def test_unit_aggregate_averages_substeps(two_state):
    c = np.array([0.0, 1.0])
    np.testing.assert_allclose(unit_aggregate_exact(two_state, c, 0), c)
    np.testing.assert_allclose(
        unit_aggregate_exact(two_state, c, 1),
        0.5 * (c + two_state.apply(c)),
    )


def test_chain_levels_share_the_substep_average():
    model = chain_model(BASE, alternate=ALTERNATE)
    control = MarkovControl.constant(0.3, CHAIN_CONTROLS)
    reward = RewardFunction.table([0.0, 1.0])
    P = substep_kernel(model, control, DiscretizationLevel(m=0))
    expected = invariant_measure(P).integrate([0.0, 1.0])
    for m in range(4):
        evaluation = evaluate_exact(
            model, control, reward, DiscretizationLevel(m=m), seed=0
        )
        assert evaluation.result.value == pytest.approx(expected, abs=1e-12)
        assert evaluation.result.level == m


def test_reward_bound_is_enforced():
    reward = RewardFunction.coordinate(0, bound=1.0)
    with pytest.raises(RewardBoundError):
        reward(np.array([[2.0]]), np.zeros((1, 1)))


def test_quadratic_reward_is_weight_dominated():
    reward = RewardFunction.quadratic(center=1.0, control_weight=2.0)
    values = reward(np.array([[3.0], [1.0]]), np.array([[1.0], [0.5]]))
    np.testing.assert_allclose(values, [6.0, 0.5])
    np.testing.assert_allclose(reward.weight(np.array([[3.0]])), [5.0])


def test_table_reward_on_states():
    reward = RewardFunction.table([4.0, -1.0, 2.0])
    control = MarkovControl.constant(0.0, CHAIN_CONTROLS)
    values = reward.on_states(StateSpace.indexed(3), control)
    np.testing.assert_allclose(values, [4.0, -1.0, 2.0])
    assert reward.bound == 4.0


def test_lag1_autocorrelation_signs():
    assert _lag1_autocorrelation(np.ones((3, 6))) == 0.0
    alternating = np.tile([1.0, -1.0], (2, 5))
    assert _lag1_autocorrelation(alternating) < 0
    trending = np.tile(np.arange(10.0), (2, 1))
    assert _lag1_autocorrelation(trending) > 0.5


def test_mc_constant_reward_is_exact():
    result = average_reward_mc(
        ou_model(),
        MarkovControl.constant(0.0, WIDE),
        RewardFunction.constant(2.0),
        DiscretizationLevel(m=2, inner_substeps=2),
        horizon=10.0,
        replicates=8,
        seed=1,
    )
    assert result.value == pytest.approx(2.0, abs=1e-12)
    assert result.std_error == pytest.approx(0.0, abs=1e-12)


def test_mc_agrees_with_exact_on_chain():
    model = chain_model(BASE)
    control = MarkovControl.constant(0.0, CHAIN_CONTROLS)
    result = average_reward_mc(
        model,
        control,
        RewardFunction.table([0.0, 1.0]),
        DiscretizationLevel(m=0),
        horizon=2000.0,
        replicates=32,
        seed=5,
    )
    assert result.std_error > 0
    assert abs(result.value - 1 / 3) <= 4 * result.std_error


def test_mc_result_does_not_depend_on_threads():
    kwargs = dict(
        model=reflected_bm_model(),
        control=MarkovControl.constant(0.0, WIDE),
        reward=RewardFunction.coordinate(0, bound=1.0),
        level=DiscretizationLevel(m=1, inner_substeps=2),
        horizon=5.0,
        replicates=40,
        seed=3,
    )
    one = average_reward_mc(threads=1, **kwargs)
    many = average_reward_mc(threads=4, **kwargs)
    assert one.value == many.value
    assert one.std_error == many.std_error


def test_mc_rejects_burn_in_of_whole_horizon():
    with pytest.raises(ConfigError):
        average_reward_mc(
            ou_model(),
            MarkovControl.constant(0.0, WIDE),
            RewardFunction.constant(1.0),
            DiscretizationLevel(m=0),
            horizon=1.0,
            replicates=2,
            seed=0,
            burn_in=1.0,
        )


def test_exact_sde_evaluation_needs_a_grid():
    with pytest.raises(ConfigError):
        evaluate_exact(
            reflected_bm_model(),
            MarkovControl.constant(0.0, WIDE),
            RewardFunction.constant(1.0),
            DiscretizationLevel(m=0),
            seed=0,
        )


def test_exact_sde_evaluation_on_symmetric_grid():
    evaluation = evaluate_exact(
        reflected_bm_model(),
        MarkovControl.constant(0.0, WIDE),
        RewardFunction.coordinate(0, bound=1.0),
        DiscretizationLevel(m=1, inner_substeps=4),
        seed=6,
        grid=StateSpace.grid(np.linspace(0.0, 1.0, 11)),
        samples_per_state=200,
    )
    assert abs(evaluation.result.value - 0.5) < 0.05
    assert evaluation.result.std_error > 0


def test_convergence_sweep_levels_must_increase():
    with pytest.raises(ConfigError):
        convergence_sweep(
            chain_model(BASE),
            MarkovControl.constant(0.0, CHAIN_CONTROLS),
            RewardFunction.table([0.0, 1.0]),
            [2, 1],
            "exact",
            seed=0,
        )


def test_chain_convergence_sweep_exact():
    table = convergence_sweep(
        chain_model(BASE, alternate=ALTERNATE),
        MarkovControl.constant(0.5, CHAIN_CONTROLS),
        RewardFunction.table([0.0, 1.0]),
        [0, 1, 2],
        "exact",
        seed=0,
    )
    assert [r.m for r in table.rows] == [0, 1, 2]
    assert all(r.method == "exact-invariant" for r in table.rows)
    np.testing.assert_allclose(table.differences, 0.0, atol=1e-12)
    assert table.difference_errors == [0.0, 0.0]
    np.testing.assert_allclose(table.measure_gaps, 0.0, atol=1e-12)


def test_reflected_bm_differences_shrink_from_level_zero(reflected_bm_case):
    case = reflected_bm_case
    table = convergence_sweep(
        case["model"],
        case["control"],
        case["reward"],
        [0, 1, 2, 3, 4, 5],
        "exact",
        seed=case["config"].seed,
        grid=case["grid"],
        samples_per_state=case["samples_per_state"],
        inner_substeps=case["config"].inner_substeps,
    )
    assert len(table.differences) == len(table.difference_errors) == 5
    assert table.decreasing()
    assert table.resolved()
    # grid points follow an AR(1) recursion with J^h = 0.1 / (2 - h)
    assert table.rows[0].value == pytest.approx(0.1, abs=0.005)
    assert table.rows[-1].value == pytest.approx(0.1 / (2 - 1 / 32), abs=0.003)


def test_monte_carlo_difference_errors_are_paired():
    table = convergence_sweep(
        ou_model(theta=1.0, sigma=1.0),
        MarkovControl.constant(1.0, WIDE),
        RewardFunction.quadratic(center=0.0),
        [2, 3],
        "monte-carlo",
        seed=4,
        horizon=20.0,
        replicates=16,
        inner_substeps=2,
    )
    unpaired = math.hypot(table.rows[0].std_error, table.rows[1].std_error)
    assert 0 < table.difference_errors[0] < unpaired


def test_stability_sweep_approaches_limit():
    limit = MarkovControl.constant(0.01, CHAIN_CONTROLS)
    family = ControlFamily(limit=limit, indices=(1, 10, 100, 1000, 10000))
    table = stability_sweep(
        chain_model(BASE, alternate=ALTERNATE),
        family,
        RewardFunction.table([0.0, 1.0]),
        DiscretizationLevel(m=0),
        seed=0,
    )
    assert [r.sweep_var for r in table.rows][-1] == float("inf")
    assert table.decreasing()
    assert table.differences[-1] <= 1e-6
    assert len(table.measure_gaps) == 5
    assert table.measure_gaps[-1] <= 1e-5


def test_mc_forgets_its_start_state():
    kwargs = dict(
        model=ou_model(theta=1.0, sigma=1.0),
        control=MarkovControl.constant(1.0, WIDE),
        reward=RewardFunction.quadratic(center=0.0),
        level=DiscretizationLevel(m=3, inner_substeps=4),
        horizon=100.0,
        replicates=16,
        seed=21,
    )
    low = average_reward_mc(start=[-3.0], **kwargs)
    high = average_reward_mc(start=[3.0], **kwargs)
    # shared noise; the start gap has decayed by e^-20 before averaging
    assert low.value == pytest.approx(high.value, abs=1e-6)
    assert low.std_error == pytest.approx(high.std_error, abs=1e-6)
