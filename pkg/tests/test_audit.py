import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from longrun.exceptions import ConfigError
from longrun.models.audit import (
    ConditionViolation,
    KernelFamily,
    aggregate_cauchy_gap,
    audit,
    control_continuity_gap,
    equivalence_ratio,
    invariant_measure_gap,
    kernel_convergence_gap,
    tilted_variation_gap,
    verify_geometric_bound,
)
from longrun.models.average import RewardFunction
from longrun.models.chain import CHAIN_CONTROLS, chain_model, substep_kernel
from longrun.models.markov import (
    DimensionError,
    LyapunovWeight,
    StateSpace,
    TransitionKernel,
    kernel_power,
)
from longrun.models.sde import (
    ControlFamily,
    ControlSet,
    DiscretizationLevel,
    MarkovControl,
    reflected_bm_model,
    sample_unit_blocks,
)
from tests.strategies import ergodic_kernels, permuted

BASE = [[0.9, 0.1], [0.2, 0.8]]
LIMIT = [[0.6, 0.4], [0.3, 0.7]]


def kernel(rows) -> TransitionKernel:
    rows = np.asarray(rows, dtype=float)
    return TransitionKernel(space=StateSpace.indexed(len(rows)), rows=rows)


def converging_family(levels=(0, 1, 2, 3)) -> KernelFamily:
    """K_m = (1 - 2^-m) LIMIT + 2^-m BASE."""
    base, limit = np.array(BASE), np.array(LIMIT)
    kernels = {
        m: kernel((1 - 2.0**-m) * limit + 2.0**-m * base) for m in levels
    }
    return KernelFamily(kernels=kernels, limit=kernel(limit))


def test_two_state_certificate():
    cert = audit(KernelFamily.single(kernel(BASE)), LyapunovWeight.constant(2))
    assert cert.delta == pytest.approx(0.7)
    assert cert.rho == pytest.approx(0.7)
    assert cert.equiv_ratio == pytest.approx(8.0)
    assert cert.fpv_bound == pytest.approx(1.0)
    assert cert.all_pass
    assert cert.passes("uUE") and cert.passes("uEquiv")


def test_identical_rows_have_zero_contraction():
    cert = audit(
        KernelFamily.single(kernel([[0.2, 0.3, 0.5]] * 3)),
        LyapunovWeight.constant(3),
    )
    assert cert.delta == 0.0
    assert cert.equiv_ratio == pytest.approx(1.0)


def test_disconnected_chain_fails():
    cert = audit(KernelFamily.single(kernel(np.eye(2))), LyapunovWeight.constant(2))
    assert cert.delta == pytest.approx(1.0)
    assert math.isinf(cert.equiv_ratio)
    assert cert.violations
    assert not cert.passes("uUE")
    assert not cert.passes("uEquiv")
    assert not cert.all_pass


def test_equivalence_ratio_ignores_common_zeros():
    K = kernel([[0.5, 0.5, 0.0], [0.25, 0.75, 0.0], [0.5, 0.5, 0.0]])
    value, violations = equivalence_ratio(K, 1)
    assert violations == []
    assert value == pytest.approx(2.0)


def test_equivalence_ratio_uses_k_steps():
    K = kernel([[0.0, 1.0], [0.5, 0.5]])
    value, violations = equivalence_ratio(K, 1)
    assert math.isinf(value) and violations == [(1, 0, 0)]
    value, violations = equivalence_ratio(K, 2)
    assert violations == []
    assert math.isfinite(value)


def test_unknown_condition_raises():
    cert = audit(KernelFamily.single(kernel(BASE)), LyapunovWeight.constant(2))
    with pytest.raises(KeyError):
        cert.passes("nope")


def test_audit_rejects_bad_k_and_weight():
    family = KernelFamily.single(kernel(BASE))
    with pytest.raises(ConfigError):
        audit(family, LyapunovWeight.constant(2), k=0)
    with pytest.raises(DimensionError):
        audit(family, LyapunovWeight.constant(3))


def test_family_validation():
    with pytest.raises(ConfigError):
        KernelFamily(kernels={})
    with pytest.raises(DimensionError):
        KernelFamily(kernels={0: kernel(BASE), 1: kernel(np.eye(3) * 0 + 1 / 3)})
    half_step = TransitionKernel(
        space=StateSpace.indexed(2), rows=BASE, step=Fraction(1, 2)
    )
    with pytest.raises(ConfigError):
        KernelFamily(kernels={0: half_step})


@given(ergodic_kernels(), st.randoms())
def test_certificate_ignores_state_order(K, rnd):
    perm = np.array(rnd.sample(range(K.n), K.n))
    V = LyapunovWeight.constant(K.n)
    a = audit(KernelFamily.single(K), V)
    b = audit(KernelFamily.single(permuted(K, perm)), V)
    assert b.delta == pytest.approx(a.delta, abs=1e-12)
    assert b.rho == pytest.approx(a.rho, abs=1e-12)
    assert b.equiv_ratio == pytest.approx(a.equiv_ratio, rel=1e-12)


def test_limit_coefficients_are_bounded_by_family():
    cert = audit(converging_family(), LyapunovWeight.constant(2))
    assert cert.delta == pytest.approx(0.7)
    assert cert.limit_delta == pytest.approx(0.3)
    assert cert.limit_equiv_ratio == pytest.approx(2.0)
    names = [check.name for check in cert.checks()]
    assert "limit_delta" in names and "limit_equiv_ratio" in names
    assert cert.all_pass


def test_kernel_convergence_gap_shrinks():
    report = kernel_convergence_gap(
        converging_family(), LyapunovWeight.constant(2), 4
    )
    assert report.gaps.shape == (4, 4, 2)
    assert report.monotone
    # one-step gap is 2^-m * |BASE - LIMIT| row sums
    np.testing.assert_allclose(report.gaps[:, 0, 0], 0.6 * 2.0 ** -np.arange(4))
    assert report.sup_by_level()[-1] < report.sup_by_level()[0]


def test_kernel_convergence_gap_needs_limit():
    family = KernelFamily.single(kernel(BASE))
    with pytest.raises(ConfigError):
        kernel_convergence_gap(family, LyapunovWeight.constant(2), 3)


def test_geometric_bound_two_state():
    report = verify_geometric_bound(
        kernel(BASE), LyapunovWeight.constant(2), x_star=0, n_max=20
    )
    assert report.all_pass
    assert report.decay_rate == pytest.approx(0.7, abs=1e-9)


@given(ergodic_kernels())
def test_geometric_bound_holds_for_unit_weight(K):
    report = verify_geometric_bound(
        K, LyapunovWeight.constant(K.n), x_star=0, n_max=15
    )
    assert report.all_pass


def test_geometric_bound_needs_contraction():
    with pytest.raises(ConditionViolation) as info:
        verify_geometric_bound(
            kernel(np.eye(2)), LyapunovWeight.constant(2), x_star=0, n_max=5
        )
    assert info.value.condition == "UEd"


def test_tilted_gap_with_zero_reward_is_kernel_gap():
    model = chain_model(BASE, alternate=LIMIT)
    control = MarkovControl.constant(0.5, CHAIN_CONTROLS)
    substeps = {
        m: substep_kernel(model, control, DiscretizationLevel(m=m))
        for m in (0, 1)
    }
    limit_substep = substep_kernel(model, control, DiscretizationLevel(m=3))
    family = KernelFamily(
        kernels={m: kernel_power(P, 2**m) for m, P in substeps.items()},
        limit=kernel_power(limit_substep, 8),
        substeps=substeps,
        limit_substep=limit_substep,
        limit_level=3,
    )
    gaps = tilted_variation_gap(
        family, RewardFunction.constant(0.0), control, alpha=-1.0
    )
    for m, gap in gaps.items():
        expected = np.abs(family.kernels[m].rows - family.limit.rows).sum(axis=1)
        np.testing.assert_allclose(gap, expected, atol=1e-12)


def test_tilted_gap_needs_substeps():
    with pytest.raises(ConfigError):
        tilted_variation_gap(
            converging_family(),
            RewardFunction.constant(0.0),
            MarkovControl.constant(0.0, CHAIN_CONTROLS),
            alpha=1.0,
        )


def test_sampled_tilted_gaps_shrink_toward_the_limit():
    model = reflected_bm_model(sigma=0.1)

    def toward_center(points):
        return 0.5 - points

    control = MarkovControl(
        fn=toward_center, control_set=ControlSet.interval(-1.0, 1.0)
    )
    reward = RewardFunction.quadratic(center=0.5, scale=10.0)
    grid = StateSpace.grid(np.linspace(0.0, 1.0, 21))

    def blocks(m: int):
        return sample_unit_blocks(
            model, control, grid, DiscretizationLevel(m=m, inner_substeps=1),
            200, seed=9, reward=reward, noise_level=6,
        )

    sampled = {m: blocks(m) for m in (0, 2, 4)}
    limit = blocks(6)
    family = KernelFamily(
        kernels={m: b.kernel() for m, b in sampled.items()},
        limit=limit.kernel(),
        blocks=sampled,
        limit_blocks=limit,
        limit_level=6,
    )
    gaps = tilted_variation_gap(family, reward, control, alpha=-1.0)
    means = [float(gaps[m].mean()) for m in (0, 2, 4)]
    assert means[0] > means[1] > means[2] > 0.0


def test_family_blocks_must_match_levels():
    blocks = sample_unit_blocks(
        reflected_bm_model(),
        MarkovControl.constant(0.0, ControlSet.interval(-1.0, 1.0)),
        StateSpace.grid([0.0, 1.0]),
        DiscretizationLevel(m=0, inner_substeps=2),
        10,
        seed=1,
    )
    with pytest.raises(ConfigError):
        KernelFamily(kernels={0: blocks.kernel()}, blocks={1: blocks})
    with pytest.raises(ConfigError):
        KernelFamily(kernels={0: blocks.kernel()}, limit_blocks=blocks)


def test_control_continuity_gap_decreases_along_family():
    model = chain_model(BASE, alternate=LIMIT)
    family = ControlFamily(
        limit=MarkovControl.constant(0.5, CHAIN_CONTROLS), indices=(1, 10, 100)
    )
    level = DiscretizationLevel(m=0)
    kernels = [substep_kernel(model, family.member(n), level) for n in family.indices]
    limit = substep_kernel(model, family.limit, level)
    report = control_continuity_gap(kernels, limit, LyapunovWeight.constant(2), k=2)
    assert report.one_step.shape == (3, 2)
    # |u_n - u| * |BASE - LIMIT| row sums
    np.testing.assert_allclose(report.one_step[:, 0], [0.3, 0.03, 0.003])
    assert np.all(np.diff(report.k_step.max(axis=1)) < 0)


def test_invariant_measure_gap():
    V = LyapunovWeight.constant(2)
    assert invariant_measure_gap(kernel(BASE), kernel(BASE), V) == pytest.approx(
        0.0, abs=1e-12
    )
    # mu(BASE) = (2/3, 1/3) and mu(LIMIT) = (3/7, 4/7)
    gap = invariant_measure_gap(kernel(BASE), kernel(LIMIT), V)
    assert gap == pytest.approx(2 * (2 / 3 - 3 / 7))


def test_aggregate_cauchy_gap():
    gaps = aggregate_cauchy_gap([[0.0, 1.0], [0.5, 1.0], [0.5, 1.25]])
    assert gaps == pytest.approx([0.5, 0.25])
