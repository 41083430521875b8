import numpy as np
import pytest
from scipy.stats import chisquare

from longrun.exceptions import ConfigError
from longrun.models.chain import (
    CHAIN_CONTROLS,
    chain_model,
    simulate_chain_path,
    substep_kernel,
    unit_kernel,
)
from longrun.models.markov import StochasticityError, kernel_power
from longrun.models.sde import ControlError, DiscretizationLevel, MarkovControl
from longrun.utils.rng_utils import replicate_streams

BASE = [[0.9, 0.1], [0.2, 0.8]]
ALTERNATE = [[0.5, 0.5], [0.5, 0.5]]


@pytest.fixture
def model():
    return chain_model(BASE, alternate=ALTERNATE)


def test_substep_kernel_mixes_rows(model):
    control = MarkovControl.constant(0.5, CHAIN_CONTROLS)
    P = substep_kernel(model, control, DiscretizationLevel(m=2))
    np.testing.assert_allclose(P.rows, [[0.7, 0.3], [0.35, 0.65]])
    assert P.step == DiscretizationLevel(m=2).h


def test_unit_kernel_is_power_of_substep(model):
    control = MarkovControl.constant(0.25, CHAIN_CONTROLS)
    level = DiscretizationLevel(m=3)
    K = unit_kernel(model, control, level)
    expected = kernel_power(substep_kernel(model, control, level), 8)
    np.testing.assert_allclose(K.rows, expected.rows, atol=1e-15)
    assert K.step == 1


def test_base_only_chain_ignores_control():
    model = chain_model(BASE)
    control = MarkovControl.constant(1.0, CHAIN_CONTROLS)
    P = substep_kernel(model, control, DiscretizationLevel(m=0))
    np.testing.assert_allclose(P.rows, BASE)


def test_control_outside_unit_interval_raises(model):
    control = MarkovControl.constant(1.5, CHAIN_CONTROLS)
    with pytest.raises(ControlError):
        substep_kernel(model, control, DiscretizationLevel(m=0))


def test_rejects_non_stochastic_base():
    with pytest.raises(StochasticityError):
        chain_model([[0.5, 0.2], [0.5, 0.5]])


def test_rejects_mismatched_alternate():
    with pytest.raises(ConfigError):
        chain_model(BASE, alternate=np.full((3, 3), 1 / 3))


def test_path_visits_valid_states_and_is_reproducible(model):
    control = MarkovControl.constant(0.3, CHAIN_CONTROLS)
    level = DiscretizationLevel(m=1)
    a = simulate_chain_path(model, control, level, 50.0, seed=4)
    b = simulate_chain_path(model, control, level, 50.0, seed=4)
    np.testing.assert_array_equal(a.states, b.states)
    assert set(np.unique(a.states)) <= {0.0, 1.0}
    assert a.states.shape == (101, 1)
    np.testing.assert_allclose(a.controls_applied, 0.3)


def test_one_step_frequencies_match_kernel(model):
    control = MarkovControl.constant(0.0, CHAIN_CONTROLS)
    R = 4000
    batch = model.run_batch(
        control,
        DiscretizationLevel(m=0),
        np.zeros((R, 1)),
        1,
        replicate_streams(11, 0, R),
    )
    share = float((batch.final[:, 0] == 1.0).mean())
    assert share == pytest.approx(0.1, abs=0.025)
    counts = np.bincount(batch.final[:, 0].astype(int), minlength=2)
    assert chisquare(counts, f_exp=[0.9 * R, 0.1 * R]).pvalue > 1e-4


def test_locate_returns_state_indices(model):
    idx = model.locate(np.array([[1.0], [0.0]]), model.space)
    assert idx.tolist() == [1, 0]
