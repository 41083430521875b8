import logging
import math
from collections.abc import Callable, Sequence
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from longrun.exceptions import ConfigError, NumericalError
from longrun.models.chain import ChainModel, substep_kernel
from longrun.models.markov import (
    InvariantMeasure,
    LyapunovWeight,
    StateSpace,
    TransitionKernel,
    invariant_measure,
    kernel_power,
    v_norm_measure_diff,
)
from longrun.models.sde import (
    ControlFamily,
    DiscretizationLevel,
    MarkovControl,
    UnitBlocks,
    sample_unit_blocks,
)
from longrun.utils.parallel import ordered_map
from longrun.utils.rng_utils import BOOTSTRAP_KEY, replicate_streams, stream

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

BURN_IN_FRACTION = 0.2
AUTOCORRELATION_BLOCKS = 10
AUTOCORRELATION_LIMIT = 0.5
# replicate group size is fixed so results do not depend on thread count
REPLICATE_GROUP = 16
PAIRED_RESAMPLES = 50

Method = Literal["exact", "monte-carlo"]


class RewardBoundError(NumericalError):
    pass


class RewardFunction(BaseModel):
    """
    Reward c(x, a) on batches of states (R, d) and controls (R, k).

    bound is the declared sup of |c|, or of |c| / V when weight is set
    (V-dominated rewards); every evaluation is checked against it.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    bound: float | None = None
    weight: Callable[[np.ndarray], np.ndarray] | None = None
    name: str = "c"

    def __call__(self, x: np.ndarray, a: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        values = np.asarray(self.fn(x, a), dtype=float).reshape(x.shape[0])
        if self.bound is not None:
            scale = 1.0 if self.weight is None else self.weight(x)
            excess = np.abs(values) - self.bound * scale
            if np.any(excess > 1e-12):
                bad = int(np.argmax(excess))
                logger.error(
                    f"Reward {self.name} = {values[bad]} at {x[bad]} exceeds "
                    f"its declared bound {self.bound}"
                )
                raise RewardBoundError(
                    f"reward {self.name} exceeds its declared bound at {x[bad]}"
                )
        return values

    def on_states(
        self, space: StateSpace, control: MarkovControl
    ) -> np.ndarray:
        """c_u(x) = c(x, u(x)) for every state of a finite space."""
        points = space.points()
        return self(points, control(points))

    @classmethod
    def constant(cls, value: float) -> "RewardFunction":
        def fn(x, a):
            return np.full(x.shape[0], float(value))

        return cls(fn=fn, bound=abs(float(value)), name=f"const({value})")

    @classmethod
    def coordinate(cls, index: int = 0, bound: float | None = None):
        def fn(x, a):
            return x[:, index]

        return cls(fn=fn, bound=bound, name=f"x[{index}]")

    @classmethod
    def quadratic(
        cls,
        center: float | Sequence[float] = 0.0,
        scale: float = 1.0,
        control_weight: float = 0.0,
    ) -> "RewardFunction":
        """scale * |x - center|^2 + control_weight * |a|^2, V-dominated."""
        center = np.atleast_1d(np.asarray(center, dtype=float))

        def fn(x, a):
            value = scale * ((x - center) ** 2).sum(axis=1)
            if control_weight:
                value = value + control_weight * (np.asarray(a) ** 2).sum(
                    axis=1
                )
            return value

        def weight(x):
            return 1.0 + ((x - center) ** 2).sum(axis=1)

        return cls(fn=fn, name="quadratic", weight=weight, bound=None)

    @classmethod
    def table(cls, values: Sequence[float]) -> "RewardFunction":
        """Per-state values of a finite chain (states are their indices)."""
        table = np.asarray(values, dtype=float)

        def fn(x, a):
            return table[np.asarray(x[:, 0], dtype=np.int64)]

        return cls(fn=fn, bound=float(np.abs(table).max()), name="table")


class AverageRewardResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    value: float
    method: Literal["exact-invariant", "monte-carlo"]
    std_error: float = 0.0
    level: int | None = None
    control_id: str = "u"
    replicate_values: tuple[float, ...] = Field(
        default=(), exclude=True, repr=False
    )

    @field_validator("std_error")
    @classmethod
    def _nonnegative(cls, value: float) -> float:
        if value < 0:
            raise ValueError("std_error must be nonnegative")
        return value


def average_reward_exact(
    K: TransitionKernel,
    aggregate,
    level: int | None = None,
    control_id: str = "u",
    measure: InvariantMeasure | None = None,
) -> AverageRewardResult:
    """J^m = sum_x mu_m(x) C_m(x) for the unit-time kernel at level m."""
    aggregate = np.asarray(aggregate, dtype=float)
    if aggregate.shape != (K.n,):
        raise ConfigError("aggregate does not match the kernel size")
    mu = invariant_measure(K) if measure is None else measure
    return AverageRewardResult(
        value=mu.integrate(aggregate),
        method="exact-invariant",
        std_error=0.0,
        level=level,
        control_id=control_id,
    )


def unit_aggregate_exact(K_substep: TransitionKernel, c_u, m: int):
    """C_m = sum_{i < 2^m} 2^-m P^i c_u for the 2^-m-step kernel P."""
    v = np.asarray(c_u, dtype=float)
    total = np.zeros_like(v)
    for _ in range(2**m):
        total += v
        v = K_substep.apply(v)
    return total * 2.0**-m


def _lag1_autocorrelation(blocks: np.ndarray) -> float:
    centered = blocks - blocks.mean(axis=1, keepdims=True)
    denominator = float((centered**2).sum())
    if denominator == 0.0:
        return 0.0
    return float((centered[:, :-1] * centered[:, 1:]).sum() / denominator)


def average_reward_mc(
    model,
    control: MarkovControl,
    reward: RewardFunction,
    level: DiscretizationLevel,
    horizon: float,
    replicates: int,
    seed: int,
    start=None,
    burn_in: float = BURN_IN_FRACTION,
    noise_level: int | None = None,
    threads: int = 1,
) -> AverageRewardResult:
    """
    Time average of h * c over [burn_in * T, T], averaged over replicates.

    Each replicate is split into blocks after burn-in; a large lag-1
    autocorrelation of the block means is logged as a sign that T is
    not long against the mixing time.
    """
    if replicates < 1:
        raise ConfigError("replicates must be >= 1")
    n_intervals = level.intervals(horizon)
    skip = int(math.floor(burn_in * n_intervals))
    kept = n_intervals - skip
    if kept < 1:
        raise ConfigError("burn-in leaves no intervals to average")
    pieces = [
        len(p)
        for p in np.array_split(np.arange(kept), AUTOCORRELATION_BLOCKS)
        if len(p)
    ]
    start = model.default_start() if start is None else start
    start = np.asarray(start, dtype=float).reshape(1, -1)
    rngs = replicate_streams(seed, 0, replicates)
    groups = [
        range(g, min(g + REPLICATE_GROUP, replicates))
        for g in range(0, replicates, REPLICATE_GROUP)
    ]

    def run(group: range) -> np.ndarray:
        group_rngs = [rngs[r] for r in group]
        x = np.tile(start, (len(group), 1))
        if skip:
            x = model.run_batch(
                control, level, x, skip, group_rngs, noise_level=noise_level
            ).final
        block_sums = []
        for length in pieces:
            batch = model.run_batch(
                control,
                level,
                x,
                length,
                group_rngs,
                reward=reward,
                noise_level=noise_level,
            )
            x = batch.final
            block_sums.append(batch.reward_sums)
        return np.stack(block_sums, axis=1)

    block_sums = np.concatenate(ordered_map(run, groups, threads), axis=0)
    h = 2.0**-level.m
    values = block_sums.sum(axis=1) / (kept * h)

    block_means = block_sums / (np.asarray(pieces) * h)
    if len(pieces) > 2:
        rho = _lag1_autocorrelation(block_means)
        if rho > AUTOCORRELATION_LIMIT:
            logger.warning(
                f"Block means have lag-1 autocorrelation {rho:.3f}; "
                f"horizon {horizon} may be short against the mixing time"
            )

    se = values.std(ddof=1) / math.sqrt(replicates) if replicates > 1 else 0.0
    return AverageRewardResult(
        value=float(values.mean()),
        method="monte-carlo",
        std_error=float(se),
        level=level.m,
        control_id=control.name,
        replicate_values=tuple(values.tolist()),
    )


class SweepRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    sweep_var: float
    value: float
    std_error: float
    method: str
    m: int
    seed: int


class SweepTable(BaseModel):
    model_config = ConfigDict(frozen=True)

    rows: list[SweepRow]
    differences: list[float]
    difference_errors: list[float]
    measure_gaps: list[float] | None = None

    def decreasing(self) -> bool:
        d = self.differences
        return all(b < a for a, b in zip(d, d[1:]))

    def resolved(self) -> bool:
        """Every difference exceeds its own error bar."""
        return all(
            d > e for d, e in zip(self.differences, self.difference_errors)
        )


class ExactEvaluation(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    result: AverageRewardResult
    measure: InvariantMeasure
    aggregate: np.ndarray
    blocks: UnitBlocks | None = None


def blocks_value(blocks: UnitBlocks) -> float:
    """J read off one batch of unit blocks: mu(K) applied to the aggregate."""
    return invariant_measure(blocks.kernel()).integrate(blocks.aggregate()[0])


def paired_difference_errors(
    blocks: Sequence[UnitBlocks],
    pairs: Sequence[tuple[int, int]],
    statistic: Callable[[UnitBlocks], float],
    seed: int,
    resamples: int = PAIRED_RESAMPLES,
) -> list[float]:
    """
    Bootstrap standard errors of statistic(blocks[j]) - statistic(blocks[i])
    for every pair (i, j).

    Sample column s of every state comes from the same stream at every
    level, so one draw of resampled columns is applied to all blocks.
    """
    shape = blocks[0].end_index.shape
    if any(b.end_index.shape != shape for b in blocks):
        raise ConfigError("paired blocks need the same grid and sample count")
    n, k = shape
    if not pairs:
        return []
    if k < 2 or resamples < 2:
        return [0.0] * len(pairs)
    rng = stream(seed, BOOTSTRAP_KEY, 1)
    draws = np.empty((resamples, len(blocks)))
    for r in range(resamples):
        idx = rng.integers(0, k, size=(n, k))
        draws[r] = [statistic(b.resample(idx)) for b in blocks]
    return [float((draws[:, j] - draws[:, i]).std(ddof=1)) for i, j in pairs]


def paired_replicate_errors(
    results: Sequence[AverageRewardResult], pairs: Sequence[tuple[int, int]]
) -> list[float]:
    """Standard error of the mean per-replicate difference for every pair."""
    errs = []
    for i, j in pairs:
        a = np.asarray(results[i].replicate_values)
        b = np.asarray(results[j].replicate_values)
        if len(a) < 2 or len(a) != len(b):
            errs.append(math.hypot(results[i].std_error, results[j].std_error))
            continue
        errs.append(float((b - a).std(ddof=1) / math.sqrt(len(a))))
    return errs


def evaluate_exact(
    model,
    control: MarkovControl,
    reward: RewardFunction,
    level: DiscretizationLevel,
    seed: int,
    grid: StateSpace | None = None,
    samples_per_state: int = 1000,
    noise_level: int | None = None,
    threads: int = 1,
) -> ExactEvaluation:
    """
    Invariant-measure evaluation at one level.

    Finite chains use their exact substep kernel; SDE models use the grid
    kernel and the aggregate read off one batch of unit-time simulations
    (the standard error then covers the aggregate only).
    """
    blocks = None
    if isinstance(model, ChainModel):
        P = substep_kernel(model, control, level)
        K = kernel_power(P, level.intervals_per_unit)
        aggregate = unit_aggregate_exact(
            P, reward.on_states(model.space, control), level.m
        )
        se = 0.0
    else:
        if grid is None:
            raise ConfigError("exact evaluation of an SDE model needs a grid")
        blocks = sample_unit_blocks(
            model,
            control,
            grid,
            level,
            samples_per_state,
            seed,
            reward=reward,
            noise_level=noise_level,
            threads=threads,
        )
        K = blocks.kernel()
        aggregate, aggregate_se = blocks.aggregate()
    mu = invariant_measure(K)
    if blocks is not None:
        se = float(np.sqrt(((mu.weights * aggregate_se) ** 2).sum()))
    result = average_reward_exact(
        K, aggregate, level=level.m, control_id=control.name, measure=mu
    )
    result = result.model_copy(update={"std_error": se})
    return ExactEvaluation(
        result=result, measure=mu, aggregate=aggregate, blocks=blocks
    )


def _difference_errors(
    evaluations, pairs: list[tuple[int, int]], seed: int
) -> list[float]:
    if all(isinstance(e, AverageRewardResult) for e in evaluations):
        return paired_replicate_errors(evaluations, pairs)
    blocks = [e.blocks for e in evaluations]
    if all(b is None for b in blocks):
        return [0.0] * len(pairs)
    return paired_difference_errors(blocks, pairs, blocks_value, seed)


def _result(evaluation) -> AverageRewardResult:
    if isinstance(evaluation, ExactEvaluation):
        return evaluation.result
    return evaluation


def convergence_sweep(
    model,
    control: MarkovControl,
    reward: RewardFunction,
    m_list: Sequence[int],
    method: Method,
    seed: int,
    horizon: float = 100.0,
    replicates: int = 32,
    grid: StateSpace | None = None,
    samples_per_state: int = 1000,
    start=None,
    inner_substeps: int | None = None,
    weight: LyapunovWeight | None = None,
    threads: int = 1,
) -> SweepTable:
    """
    J^{2^-m} for every m, plus successive differences between levels.

    All levels draw Brownian increments at the finest requested level so
    consecutive rows share their noise; difference_errors are paired
    over that shared noise.
    """
    m_list = list(m_list)
    if not m_list or m_list != sorted(set(m_list)):
        raise ConfigError("m_list must be nonempty and increasing")
    noise_level = max(m_list)
    extra = {} if inner_substeps is None else {"inner_substeps": inner_substeps}

    def cell(m: int):
        level = DiscretizationLevel(m=m, **extra)
        logger.info(f"Average-reward sweep: level m={m} ({method})")
        if method == "exact":
            return evaluate_exact(
                model,
                control,
                reward,
                level,
                seed,
                grid=grid,
                samples_per_state=samples_per_state,
                noise_level=noise_level,
            )
        return average_reward_mc(
            model,
            control,
            reward,
            level,
            horizon,
            replicates,
            seed,
            start=start,
            noise_level=noise_level,
        )

    cells = ordered_map(cell, m_list, threads)
    rows = [
        SweepRow(
            sweep_var=m,
            value=_result(c).value,
            std_error=_result(c).std_error,
            method=_result(c).method,
            m=m,
            seed=seed,
        )
        for m, c in zip(m_list, cells)
    ]
    values = [r.value for r in rows]
    pairs = [(i, i + 1) for i in range(len(rows) - 1)]

    measure_gaps = None
    if method == "exact":
        measures = [c.measure.weights for c in cells]
        V = weight or LyapunovWeight.constant(len(measures[0]))
        measure_gaps = [
            v_norm_measure_diff(a, b, V)
            for a, b in zip(measures, measures[1:])
        ]
    return SweepTable(
        rows=rows,
        differences=[abs(b - a) for a, b in zip(values, values[1:])],
        difference_errors=_difference_errors(cells, pairs, seed),
        measure_gaps=measure_gaps,
    )


def stability_sweep(
    model,
    family: ControlFamily,
    reward: RewardFunction,
    level: DiscretizationLevel,
    seed: int,
    method: Method = "exact",
    horizon: float = 100.0,
    replicates: int = 32,
    grid: StateSpace | None = None,
    samples_per_state: int = 1000,
    start=None,
    weight: LyapunovWeight | None = None,
    threads: int = 1,
) -> SweepTable:
    """
    J^m(u_n) for every n of the family, then the limit row J^m(u).

    differences[i] is |J^m(u_n) - J^m(u)| for the i-th n; in exact mode
    measure_gaps[i] is ||mu^{u_n} - mu^u||_V. Every member reuses the
    same random streams, so rows are coupled and their errors paired.
    """
    controls = [family.member(n) for n in family.indices] + [family.limit]

    def cell(control: MarkovControl):
        logger.info(f"Average-reward stability: control {control.name}")
        if method == "exact":
            return evaluate_exact(
                model,
                control,
                reward,
                level,
                seed,
                grid=grid,
                samples_per_state=samples_per_state,
            )
        return average_reward_mc(
            model,
            control,
            reward,
            level,
            horizon,
            replicates,
            seed,
            start=start,
        )

    cells = ordered_map(cell, controls, threads)
    sweep_vars = [float(n) for n in family.indices] + [math.inf]
    rows = [
        SweepRow(
            sweep_var=var,
            value=_result(c).value,
            std_error=_result(c).std_error,
            method=_result(c).method,
            m=level.m,
            seed=seed,
        )
        for var, c in zip(sweep_vars, cells)
    ]
    limit = rows[-1]
    last = len(rows) - 1
    diffs = [abs(r.value - limit.value) for r in rows[:-1]]

    measure_gaps = None
    if method == "exact":
        limit_mu = cells[-1].measure.weights
        V = weight or LyapunovWeight.constant(len(limit_mu))
        measure_gaps = [
            v_norm_measure_diff(c.measure.weights, limit_mu, V)
            for c in cells[:-1]
        ]
    return SweepTable(
        rows=rows,
        differences=diffs,
        difference_errors=_difference_errors(
            cells, [(i, last) for i in range(last)], seed
        ),
        measure_gaps=measure_gaps,
    )
