import logging
import math
from collections.abc import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from longrun.exceptions import ConfigError, NumericalError
from longrun.models.markov import (
    DimensionError,
    LyapunovWeight,
    TransitionKernel,
    dobrushin_delta,
    fpv_profile,
    invariant_measure,
    kartashov_rho,
    kernel_power,
    v_norm_measure_diff,
)
from longrun.models.sde import MarkovControl, UnitBlocks
from longrun.models.tilted import (
    TiltedKernel,
    tilted_kernel_exact,
    tilted_kernel_from_blocks,
    variation_gap,
)

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

BOUND_SLACK = 1e-12
EQUIV_SLACK = 1e-9
DEFAULT_FPV_STEPS = 20


class ConditionViolation(NumericalError):
    def __init__(self, message: str, condition: str, states=()):
        super().__init__(f"({condition}) {message}")
        self.condition = condition
        self.states = tuple(states)


class KernelFamily(BaseModel):
    """
    Unit-time kernels indexed by level m, with an optional limit kernel.

    substeps / limit_substep hold the exact 2^-m-step kernels when they are
    known (finite chains). Sampled families keep their unit blocks in
    blocks / limit_blocks instead; tilted comparisons need one or the other.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    kernels: dict[int, TransitionKernel]
    limit: TransitionKernel | None = None
    substeps: dict[int, TransitionKernel] | None = None
    limit_substep: TransitionKernel | None = None
    blocks: dict[int, UnitBlocks] | None = None
    limit_blocks: UnitBlocks | None = None
    limit_level: int | None = None

    @field_validator("kernels")
    @classmethod
    def _nonempty(cls, value):
        if not value:
            raise ConfigError("kernel family is empty")
        return value

    @model_validator(mode="after")
    def _same_space(self):
        first = next(iter(self.kernels.values()))
        others = list(self.kernels.values())
        if self.limit is not None:
            others.append(self.limit)
        for K in others:
            if K.space != first.space:
                logger.error("Kernel family mixes state spaces")
                raise DimensionError("family kernels live on different spaces")
            if K.step != 1:
                raise ConfigError(f"family kernel has step {K.step}, not 1")
        if self.limit_substep is not None and self.limit_level is None:
            raise ConfigError("limit_substep needs limit_level")
        if self.limit_blocks is not None and self.limit_level is None:
            raise ConfigError("limit_blocks needs limit_level")
        if self.blocks is not None and set(self.blocks) != set(self.kernels):
            raise ConfigError("blocks must cover the same levels as kernels")
        return self

    @property
    def levels(self) -> list[int]:
        return sorted(self.kernels)

    @property
    def n(self) -> int:
        return next(iter(self.kernels.values())).n

    @classmethod
    def single(cls, K: TransitionKernel) -> "KernelFamily":
        return cls(kernels={0: K})


class ConditionCheck(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    value: float
    threshold: float
    passed: bool


class ErgodicityCertificate(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    delta: float
    rho: float
    equiv_ratio: float
    k: int
    fpv_bound: float
    fpv_by_state: np.ndarray
    violations: tuple[tuple[int, int, int], ...] = ()
    limit_delta: float | None = None
    limit_rho: float | None = None
    limit_equiv_ratio: float | None = None

    def checks(self) -> list[ConditionCheck]:
        rows = [
            ConditionCheck(
                name="delta", value=self.delta, threshold=1.0,
                passed=self.delta < 1.0,
            ),
            ConditionCheck(
                name="rho", value=self.rho, threshold=1.0,
                passed=self.rho < 1.0,
            ),
            ConditionCheck(
                name="equiv_ratio", value=self.equiv_ratio, threshold=math.inf,
                passed=math.isfinite(self.equiv_ratio) and not self.violations,
            ),
            ConditionCheck(
                name="fpv_bound", value=self.fpv_bound, threshold=math.inf,
                passed=math.isfinite(self.fpv_bound),
            ),
        ]
        if self.limit_delta is not None:
            rows += [
                ConditionCheck(
                    name="limit_delta", value=self.limit_delta,
                    threshold=self.delta,
                    passed=self.limit_delta <= self.delta + BOUND_SLACK,
                ),
                ConditionCheck(
                    name="limit_rho", value=self.limit_rho,
                    threshold=self.rho,
                    passed=self.limit_rho <= self.rho + BOUND_SLACK,
                ),
                ConditionCheck(
                    name="limit_equiv_ratio", value=self.limit_equiv_ratio,
                    threshold=self.equiv_ratio,
                    passed=self.limit_equiv_ratio
                    <= self.equiv_ratio + EQUIV_SLACK,
                ),
            ]
        return rows

    def passes(self, condition: str) -> bool:
        names = {
            "uUE": "delta",
            "UEd": "rho",
            "uEquiv": "equiv_ratio",
            "FPV": "fpv_bound",
        }
        name = names.get(condition, condition)
        for check in self.checks():
            if check.name == name:
                return check.passed
        raise KeyError(condition)

    @property
    def all_pass(self) -> bool:
        return all(check.passed for check in self.checks())


def equivalence_ratio(
    K: TransitionKernel, k: int
) -> tuple[float, list[tuple[int, int, int]]]:
    """
    max over x, x', y of P_k(x, y) / P_k(x', y) over positive denominators.

    Entries with a positive numerator over a zero denominator are returned
    as (x, x', y) violations; 0/0 entries are ignored.
    """
    P = kernel_power(K, k).rows
    num = np.broadcast_to(P[:, None, :], (K.n, K.n, K.n))
    den = np.broadcast_to(P[None, :, :], (K.n, K.n, K.n))
    positive = den > 0
    ratios = np.divide(num, den, out=np.zeros_like(num), where=positive)
    bad = np.argwhere((num > 0) & ~positive)
    violations = [tuple(int(i) for i in row) for row in bad]
    value = math.inf if violations else float(ratios.max())
    return value, violations


def audit(
    family: KernelFamily,
    V: LyapunovWeight,
    k: int = 1,
    fpv_steps: int = DEFAULT_FPV_STEPS,
) -> ErgodicityCertificate:
    if k < 1:
        raise ConfigError("step count k must be >= 1")
    if V.values.shape[0] != family.n:
        raise DimensionError("weight and family sizes differ")

    delta = rho = 0.0
    equiv = 1.0
    violations: list[tuple[int, int, int]] = []
    fpv = np.zeros(family.n)
    for m in family.levels:
        K = family.kernels[m]
        delta = max(delta, dobrushin_delta(K))
        rho = max(rho, kartashov_rho(K, V))
        ratio, bad = equivalence_ratio(K, k)
        equiv = max(equiv, ratio)
        violations += bad
        fpv = np.maximum(fpv, fpv_profile(K, V, fpv_steps))

    if violations:
        x, x2, y = violations[0]
        logger.warning(
            f"Equivalence ratio undefined: P_{k}({x}, {y}) > 0 but "
            f"P_{k}({x2}, {y}) = 0 ({len(violations)} such entries)"
        )
    if delta >= 1.0:
        logger.warning(f"Dobrushin coefficient {delta} is not below 1")

    limits = {}
    if family.limit is not None:
        limit_ratio, _ = equivalence_ratio(family.limit, k)
        limits = {
            "limit_delta": dobrushin_delta(family.limit),
            "limit_rho": kartashov_rho(family.limit, V),
            "limit_equiv_ratio": limit_ratio,
        }
    fpv.setflags(write=False)
    return ErgodicityCertificate(
        delta=delta,
        rho=rho,
        equiv_ratio=equiv,
        k=k,
        fpv_bound=float(fpv.max()),
        fpv_by_state=fpv,
        violations=tuple(violations),
        **limits,
    )


class KernelGapReport(BaseModel):
    """gaps[i, j - 1, x] = ||P_j^{(m_i)}(x, .) - P_j^limit(x, .)||_V."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    levels: list[int]
    gaps: np.ndarray
    monotone: bool

    def sup_by_level(self) -> np.ndarray:
        return self.gaps.max(axis=(1, 2))


def kernel_convergence_gap(
    family: KernelFamily, V: LyapunovWeight, n: int
) -> KernelGapReport:
    if family.limit is None:
        logger.error("Kernel convergence gap requested without a limit")
        raise ConfigError("kernel family has no limit kernel")
    if n < 1:
        raise ConfigError("horizon n must be >= 1")
    levels = family.levels
    gaps = np.zeros((len(levels), n, family.n))
    limit_powers = [family.limit.rows]
    for _ in range(n - 1):
        limit_powers.append(limit_powers[-1] @ family.limit.rows)

    for i, m in enumerate(levels):
        P = family.kernels[m].rows
        Pj = P
        for j in range(n):
            if j:
                Pj = Pj @ P
            gaps[i, j] = np.abs(Pj - limit_powers[j]) @ V.values

    monotone = bool(np.all(np.diff(gaps, axis=0) <= BOUND_SLACK))
    return KernelGapReport(levels=levels, gaps=gaps, monotone=monotone)


class GeometricBoundRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    n: int
    lhs: float
    rhs: float
    passed: bool


class GeometricBoundReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    rho: float
    rows: list[GeometricBoundRow]
    decay_rate: float | None

    @property
    def all_pass(self) -> bool:
        return all(row.passed for row in self.rows)


def verify_geometric_bound(
    K: TransitionKernel, V: LyapunovWeight, x_star: int, n_max: int
) -> GeometricBoundReport:
    """
    Check sup_x ||P^n(x, .) - mu||_V / V(x) <= rho^n (1 + (PV(x*) +
    rho V(x*)) / (1 - rho)) for n = 1..n_max.

    decay_rate is exp of the slope of ln(lhs) against n, fitted over the
    values above round-off.
    """
    rho = kartashov_rho(K, V)
    if rho >= 1.0:
        logger.error(f"Kartashov coefficient {rho} is not below 1")
        raise ConditionViolation(
            f"geometric bound needs rho < 1, got {rho}", "UEd"
        )
    v = V.values
    mu = invariant_measure(K).weights
    PV = K.apply(v)
    constant = 1.0 + (PV[x_star] + rho * v[x_star]) / (1.0 - rho)

    rows = []
    Pn = np.eye(K.n)
    for n in range(1, n_max + 1):
        Pn = Pn @ K.rows
        lhs = float((np.abs(Pn - mu[None, :]) @ v / v).max())
        rhs = rho**n * constant
        rows.append(
            GeometricBoundRow(
                n=n, lhs=lhs, rhs=rhs, passed=lhs <= rhs + BOUND_SLACK
            )
        )

    ns = np.array([row.n for row in rows if row.lhs > 1e-12], dtype=float)
    decay_rate = None
    if len(ns) >= 2:
        lhs = np.array([row.lhs for row in rows if row.lhs > 1e-12])
        slope = np.polyfit(ns, np.log(lhs), 1)[0]
        decay_rate = float(math.exp(slope))
    return GeometricBoundReport(rho=rho, rows=rows, decay_rate=decay_rate)


def tilted_gaps(
    tilted: dict[int, TiltedKernel], limit: TiltedKernel
) -> dict[int, np.ndarray]:
    return {m: variation_gap(M, limit) for m, M in sorted(tilted.items())}


def tilted_variation_gap(
    family: KernelFamily,
    reward,
    control: MarkovControl,
    alpha: float,
) -> dict[int, np.ndarray]:
    """
    Per level m and state x, sum_y |M^{(m)}(x, y) - M^limit(x, y)|.

    Exact substep kernels are used when the family has them; otherwise the
    tilted kernels are read off the sampled unit blocks, whose reward sums
    already fix the reward and control.
    """
    if alpha == 0:
        raise ConfigError("alpha must be nonzero")
    if family.substeps is None or family.limit_substep is None:
        if family.blocks is None or family.limit_blocks is None:
            logger.error("Tilted comparison has no substeps or unit blocks")
            raise ConfigError(
                "tilted variation gap needs substep kernels or unit blocks, "
                "and a limit level"
            )
        limit = tilted_kernel_from_blocks(family.limit_blocks, alpha)
        tilted = {
            m: tilted_kernel_from_blocks(b, alpha)
            for m, b in family.blocks.items()
        }
        return tilted_gaps(tilted, limit)
    space = family.limit_substep.space
    c_u = reward.on_states(space, control)
    limit = tilted_kernel_exact(
        family.limit_substep, c_u, alpha, family.limit_level
    )
    tilted = {
        m: tilted_kernel_exact(K, c_u, alpha, m)
        for m, K in family.substeps.items()
    }
    return tilted_gaps(tilted, limit)


class ContinuityReport(BaseModel):
    """Row n: per-state V-norm gaps between the kernels of u_n and u."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    one_step: np.ndarray
    k_step: np.ndarray


def control_continuity_gap(
    kernels_n: Sequence[TransitionKernel],
    kernel_limit: TransitionKernel,
    V: LyapunovWeight,
    k: int = 1,
) -> ContinuityReport:
    limit_k = kernel_power(kernel_limit, k).rows
    one, many = [], []
    for K in kernels_n:
        if K.space != kernel_limit.space:
            raise DimensionError("kernels live on different spaces")
        one.append(np.abs(K.rows - kernel_limit.rows) @ V.values)
        many.append(np.abs(kernel_power(K, k).rows - limit_k) @ V.values)
    return ContinuityReport(one_step=np.array(one), k_step=np.array(many))


def invariant_measure_gap(
    K1: TransitionKernel, K2: TransitionKernel, V: LyapunovWeight
) -> float:
    if K1.space != K2.space:
        raise DimensionError("kernels live on different spaces")
    mu1 = invariant_measure(K1).weights
    mu2 = invariant_measure(K2).weights
    return v_norm_measure_diff(mu1, mu2, V)


def aggregate_cauchy_gap(aggregates: Sequence) -> list[float]:
    """sup_x |C_m(x) - C_{m+1}(x)| for consecutive aggregates."""
    arrays = [np.asarray(a, dtype=float) for a in aggregates]
    return [float(np.abs(b - a).max()) for a, b in zip(arrays, arrays[1:])]
