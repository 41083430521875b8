import logging
import math
from collections.abc import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.special import logsumexp

from longrun.exceptions import ConfigError, NumericalError
from longrun.models.audit import (
    ConditionViolation,
    ErgodicityCertificate,
    KernelFamily,
    audit,
)
from longrun.models.average import (
    REPLICATE_GROUP,
    RewardFunction,
    paired_difference_errors,
)
from longrun.models.chain import ChainModel, substep_kernel
from longrun.models.markov import (
    LyapunovWeight,
    StateSpace,
    TransitionKernel,
    kernel_power,
    span_seminorm,
)
from longrun.models.sde import (
    ControlFamily,
    DiscretizationLevel,
    MarkovControl,
    UnitBlocks,
    sample_unit_blocks,
)
from longrun.models.tilted import (
    TiltedKernel,
    build_tilted_kernel,
    psi_apply,
    tilted_kernel_exact,
    tilted_kernel_from_blocks,
)
from longrun.utils.parallel import ordered_map
from longrun.utils.rng_utils import BOOTSTRAP_KEY, replicate_streams, stream

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

__all__ = [
    "TiltedKernel",
    "build_tilted_kernel",
    "psi_apply",
    "RiskParams",
    "PoissonSolution",
    "solve_poisson",
    "perron_oracle",
    "finite_horizon_gap",
    "iterate_span_bound",
    "iterate_spans",
    "risk_mc",
    "risk_convergence_sweep",
    "risk_stability_sweep",
]

ORACLE_TOL = 1e-13
ORACLE_MAX_ITERATIONS = 1_000_000
BOOTSTRAP_RESAMPLES = 200
ESS_WARNING = 10.0
# ratios averaged for the reported contraction factor
CONTRACTION_WINDOW = 50


class PoissonConvergenceError(NumericalError):
    def __init__(self, message: str, residual: float, contraction: float):
        super().__init__(message)
        self.residual = residual
        self.contraction = contraction


class OracleError(NumericalError):
    pass


class RiskParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    alpha: float
    tolerance: float = 1e-10
    max_iterations: int = 100_000
    x_ref: int = 0

    @field_validator("alpha")
    @classmethod
    def _alpha(cls, value: float) -> float:
        if value == 0:
            raise ValueError("alpha must be nonzero")
        return value

    @field_validator("tolerance")
    @classmethod
    def _tolerance(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("tolerance must be positive")
        return value

    @field_validator("max_iterations")
    @classmethod
    def _iterations(cls, value: int) -> int:
        if value < 1:
            raise ValueError("max_iterations must be >= 1")
        return value

    @field_validator("x_ref")
    @classmethod
    def _x_ref(cls, value: int) -> int:
        if value < 0:
            raise ValueError("x_ref must be a state index")
        return value


class PoissonSolution(BaseModel):
    model_config = ConfigDict(
        frozen=True, arbitrary_types_allowed=True, populate_by_name=True
    )

    lambda_: float = Field(alias="lambda")
    w: np.ndarray
    span_w: float
    iterations: int
    residual: float
    contraction: float | None = None


def _contraction(ratios: list[float]) -> float | None:
    tail = [r for r in ratios[-CONTRACTION_WINDOW:] if r > 0]
    if not tail:
        return None
    return float(math.exp(np.mean(np.log(tail))))


def solve_poisson(
    M: TiltedKernel,
    params: RiskParams,
    certificate: ErgodicityCertificate | None = None,
) -> PoissonSolution:
    """
    Relative fixed-point iteration g <- Psi g - (Psi g)(x_ref).

    Stops once ||Psi g - g||_sp <= tolerance and returns w = g with
    lambda = (Psi w)(x_ref) - w(x_ref).
    """
    if params.alpha != M.alpha:
        raise ConfigError(
            f"params alpha {params.alpha} differs from the kernel's {M.alpha}"
        )
    if params.x_ref >= M.n:
        raise ConfigError(f"x_ref {params.x_ref} is not a state index")
    if certificate is not None and not (
        certificate.passes("uUE") and certificate.passes("uEquiv")
    ):
        logger.warning(
            "Solving the Poisson equation although the ergodicity audit "
            f"failed (delta={certificate.delta}, "
            f"K_u={certificate.equiv_ratio})"
        )

    x_ref = params.x_ref
    g = np.zeros(M.n)
    ratios: list[float] = []
    previous = None
    for iteration in range(1, params.max_iterations + 1):
        psi = psi_apply(M, g)
        diff = psi - g
        residual = span_seminorm(diff)
        if residual <= params.tolerance:
            lam = float(diff[x_ref])
            g.setflags(write=False)
            return PoissonSolution(
                lambda_=lam,
                w=g,
                span_w=span_seminorm(g),
                iterations=iteration,
                residual=float(np.abs(diff - lam).max()),
                contraction=_contraction(ratios),
            )
        if previous is not None and previous > 0:
            ratios.append(residual / previous)
        previous = residual
        g = psi - psi[x_ref]

    contraction = _contraction(ratios)
    logger.error(
        f"Poisson iteration stalled after {params.max_iterations} steps: "
        f"span residual {residual:.3e}, contraction {contraction}"
    )
    raise PoissonConvergenceError(
        f"no convergence in {params.max_iterations} iterations "
        f"(residual {residual:.3e}, measured contraction {contraction})",
        residual=residual,
        contraction=math.nan if contraction is None else contraction,
    )


def perron_oracle(
    M: TiltedKernel,
    tol: float = ORACLE_TOL,
    max_iterations: int = ORACLE_MAX_ITERATIONS,
) -> float:
    """(1/alpha) ln of the spectral radius of M, by L1 power iteration."""
    A = M.entries
    v = np.arange(1, M.n + 1, dtype=float)
    v /= v.sum()
    for _ in range(max_iterations):
        u = A @ v
        r = float(u.sum())
        u /= r
        if np.abs(u - v).sum() <= tol:
            return (M.log_scale + math.log(r)) / M.alpha
        v = u
    logger.error("Perron power iteration did not settle")
    raise OracleError(
        "power iteration did not converge; the tilted kernel may be "
        "periodic or reducible"
    )


class FiniteHorizonRow(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    k: int
    estimates: np.ndarray
    gap: float
    bound: float
    passed: bool


def finite_horizon_gap(
    M: TiltedKernel, solution: PoissonSolution, k_list: Sequence[int]
) -> list[FiniteHorizonRow]:
    """
    estimate(k, x) = (1/(alpha k)) ln (M^k 1)(x) against lambda, with the
    bound 2 ||w||_sp / k.
    """
    k_list = sorted(set(int(k) for k in k_list))
    if not k_list or k_list[0] < 1:
        raise ConfigError("horizons k must be positive")
    rows = []
    v = np.ones(M.n)
    log_acc = 0.0
    done = 0
    for k in k_list:
        while done < k:
            v = M.entries @ v
            top = float(v.max())
            v /= top
            log_acc += M.log_scale + math.log(top)
            done += 1
        estimates = (log_acc + np.log(v)) / (M.alpha * k)
        gap = float(np.abs(estimates - solution.lambda_).max())
        bound = 2.0 * solution.span_w / k
        rows.append(
            FiniteHorizonRow(
                k=k,
                estimates=estimates,
                gap=gap,
                bound=bound,
                passed=gap <= bound + 1e-12,
            )
        )
    return rows


def iterate_span_bound(
    k: int, c_span: float, K_u: float, alpha: float
) -> float:
    """k ||c||_sp + ln(K_u) / |alpha|."""
    return k * c_span + math.log(K_u) / abs(alpha)


class IterateSpanRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    iteration: int
    span: float
    bound: float
    passed: bool


def iterate_spans(
    M: TiltedKernel, c_span: float, K_u: float, k: int, iterations: int
) -> list[IterateSpanRow]:
    """Spans of Psi^j 0 for j = 1..iterations against the k-step bound."""
    bound = iterate_span_bound(k, c_span, K_u, M.alpha)
    g = np.zeros(M.n)
    rows = []
    for j in range(1, iterations + 1):
        g = psi_apply(M, g)
        g = g - g[0]
        span = span_seminorm(g)
        rows.append(
            IterateSpanRow(
                iteration=j, span=span, bound=bound, passed=span <= bound + 1e-9
            )
        )
    return rows


class RiskMCResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    value: float
    std_error: float
    ess: float
    level: int
    alpha: float


def risk_mc(
    model,
    control: MarkovControl,
    reward: RewardFunction,
    level: DiscretizationLevel,
    alpha: float,
    horizon: float,
    replicates: int,
    seed: int,
    start=None,
    noise_level: int | None = None,
    resamples: int = BOOTSTRAP_RESAMPLES,
    threads: int = 1,
) -> RiskMCResult:
    """
    (1/(alpha T)) ln mean_r exp(alpha S_r) over replicate reward sums S_r.

    The standard error is a bootstrap over replicates drawn from a stream
    of its own; ess is the effective sample size of the exp(alpha S_r)
    weights.
    """
    if alpha == 0:
        raise ConfigError("alpha must be nonzero")
    if replicates < 1:
        raise ConfigError("replicates must be >= 1")
    n_intervals = level.intervals(horizon)
    start = model.default_start() if start is None else start
    start = np.asarray(start, dtype=float).reshape(1, -1)
    rngs = replicate_streams(seed, 0, replicates)
    groups = [
        range(g, min(g + REPLICATE_GROUP, replicates))
        for g in range(0, replicates, REPLICATE_GROUP)
    ]

    def run(group: range) -> np.ndarray:
        batch = model.run_batch(
            control,
            level,
            np.tile(start, (len(group), 1)),
            n_intervals,
            [rngs[r] for r in group],
            reward=reward,
            noise_level=noise_level,
        )
        return batch.reward_sums

    sums = np.concatenate(ordered_map(run, groups, threads))
    s = alpha * sums
    value = (logsumexp(s) - math.log(replicates)) / (alpha * horizon)

    weights = np.exp(s - s.max())
    ess = float(weights.sum() ** 2 / (weights**2).sum())
    if ess < ESS_WARNING:
        logger.warning(
            f"Risk-sensitive estimate rests on few replicates: ESS {ess:.2f} "
            f"of {replicates}"
        )

    se = 0.0
    if replicates > 1 and resamples > 1:
        rng = stream(seed, BOOTSTRAP_KEY)
        idx = rng.integers(0, replicates, size=(resamples, replicates))
        boot = (logsumexp(s[idx], axis=1) - math.log(replicates)) / (
            alpha * horizon
        )
        se = float(boot.std(ddof=1))
    return RiskMCResult(
        value=float(value), std_error=se, ess=ess, level=level.m, alpha=alpha
    )


class RiskSweepRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    sweep_var: float
    lambda_: float
    span_w: float
    iterations: int
    residual: float
    oracle_lambda: float
    oracle_gap: float
    m: int
    alpha: float


class RiskSweepTable(BaseModel):
    model_config = ConfigDict(frozen=True)

    rows: list[RiskSweepRow]
    differences: list[float]
    difference_errors: list[float]

    def decreasing(self) -> bool:
        d = self.differences
        return all(b < a for a, b in zip(d, d[1:]))

    def resolved(self) -> bool:
        return all(
            d > e for d, e in zip(self.differences, self.difference_errors)
        )


def _tilted_for(
    model,
    control: MarkovControl,
    reward: RewardFunction,
    level: DiscretizationLevel,
    alpha: float,
    seed: int,
    method: str,
    grid: StateSpace | None,
    samples_per_state: int,
    noise_level: int | None = None,
) -> tuple[TiltedKernel, UnitBlocks | None]:
    if isinstance(model, ChainModel) and method == "exact":
        P = substep_kernel(model, control, level)
        M = tilted_kernel_exact(
            P, reward.on_states(model.space, control), alpha, level.m
        )
        return M, None
    if grid is None:
        if not isinstance(model, ChainModel):
            raise ConfigError("sampled tilted kernels need a grid")
        grid = model.space
    blocks = sample_unit_blocks(
        model,
        control,
        grid,
        level,
        samples_per_state,
        seed,
        reward=reward,
        noise_level=noise_level,
    )
    return tilted_kernel_from_blocks(blocks, alpha), blocks


def _solve_row(
    M: TiltedKernel,
    params: RiskParams,
    sweep_var: float,
    m: int,
    certificate: ErgodicityCertificate | None = None,
) -> RiskSweepRow:
    solution = solve_poisson(M, params, certificate)
    try:
        oracle = perron_oracle(M)
    except OracleError:
        logger.warning(f"Oracle failed at sweep value {sweep_var}")
        oracle = math.nan
    return RiskSweepRow(
        sweep_var=sweep_var,
        lambda_=solution.lambda_,
        span_w=solution.span_w,
        iterations=solution.iterations,
        residual=solution.residual,
        oracle_lambda=oracle,
        oracle_gap=abs(oracle - solution.lambda_),
        m=m,
        alpha=params.alpha,
    )


def _lambda_errors(
    blocks: list[UnitBlocks | None],
    pairs: list[tuple[int, int]],
    params: RiskParams,
    seed: int,
) -> list[float]:
    """Paired bootstrap errors of lambda differences; zero for exact kernels."""
    if any(b is None for b in blocks):
        return [0.0] * len(pairs)

    def statistic(b: UnitBlocks) -> float:
        return solve_poisson(
            tilted_kernel_from_blocks(b, params.alpha), params
        ).lambda_

    return paired_difference_errors(blocks, pairs, statistic, seed)


def risk_convergence_sweep(
    model,
    control: MarkovControl,
    reward: RewardFunction,
    params: RiskParams,
    m_list: Sequence[int],
    seed: int,
    method: str = "exact",
    grid: StateSpace | None = None,
    samples_per_state: int = 1000,
    inner_substeps: int | None = None,
    certificate: ErgodicityCertificate | None = None,
    threads: int = 1,
) -> RiskSweepTable:
    """
    lambda^{(m)} per level with successive differences.

    Sampled kernels at every level share their noise; difference_errors
    come from a bootstrap paired over the shared sample columns.
    """
    m_list = list(m_list)
    if not m_list or m_list != sorted(set(m_list)):
        raise ConfigError("m_list must be nonempty and increasing")
    noise_level = max(m_list)
    extra = {} if inner_substeps is None else {"inner_substeps": inner_substeps}

    def cell(m: int) -> tuple[RiskSweepRow, UnitBlocks | None]:
        logger.info(f"Risk sweep: level m={m}, alpha={params.alpha}")
        level = DiscretizationLevel(m=m, **extra)
        M, blocks = _tilted_for(
            model, control, reward, level, params.alpha, seed, method,
            grid, samples_per_state, noise_level,
        )
        return _solve_row(M, params, float(m), m, certificate), blocks

    cells = ordered_map(cell, m_list, threads)
    rows = [row for row, _ in cells]
    values = [row.lambda_ for row in rows]
    pairs = [(i, i + 1) for i in range(len(rows) - 1)]
    return RiskSweepTable(
        rows=rows,
        differences=[abs(b - a) for a, b in zip(values, values[1:])],
        difference_errors=_lambda_errors(
            [b for _, b in cells], pairs, params, seed
        ),
    )


def _unit_kernel_for(
    model, control, level, seed, grid, samples_per_state
) -> TransitionKernel:
    if isinstance(model, ChainModel):
        return kernel_power(
            substep_kernel(model, control, level), level.intervals_per_unit
        )
    return sample_unit_blocks(
        model, control, grid, level, samples_per_state, seed
    ).kernel()


def risk_stability_sweep(
    model,
    family: ControlFamily,
    reward: RewardFunction,
    params: RiskParams,
    level: DiscretizationLevel,
    seed: int,
    method: str = "exact",
    grid: StateSpace | None = None,
    samples_per_state: int = 1000,
    k: int = 1,
    threads: int = 1,
) -> RiskSweepTable:
    """
    lambda^{(m), u_n} per n of the family and the limit row for u.

    The family is audited first: a Dobrushin coefficient of 1 or an
    unbounded equivalence ratio for some member stops the sweep.
    """
    controls = [family.member(n) for n in family.indices] + [family.limit]
    kernels = ordered_map(
        lambda u: _unit_kernel_for(
            model, u, level, seed, grid, samples_per_state
        ),
        controls,
        threads,
    )
    certificate = audit(
        KernelFamily(kernels=dict(enumerate(kernels))),
        LyapunovWeight.constant(kernels[0].n),
        k=k,
    )
    if not certificate.passes("uUE"):
        logger.error(
            f"Control family is not uniformly ergodic: "
            f"sup Delta = {certificate.delta}"
        )
        raise ConditionViolation(
            f"sup over the family of Delta is {certificate.delta}", "uUE"
        )
    if not certificate.passes("uEquiv"):
        logger.error("Control family has no uniform equivalence ratio")
        raise ConditionViolation(
            "equivalence ratio is unbounded over the family",
            "uEquiv",
            states=certificate.violations[:1],
        )

    def cell(item) -> tuple[RiskSweepRow, UnitBlocks | None]:
        sweep_var, control = item
        logger.info(f"Risk stability: control {control.name}")
        M, blocks = _tilted_for(
            model, control, reward, level, params.alpha, seed, method,
            grid, samples_per_state,
        )
        return _solve_row(M, params, sweep_var, level.m, certificate), blocks

    sweep_vars = [float(n) for n in family.indices] + [math.inf]
    cells = ordered_map(cell, list(zip(sweep_vars, controls)), threads)
    rows = [row for row, _ in cells]
    limit = rows[-1].lambda_
    last = len(rows) - 1
    return RiskSweepTable(
        rows=rows,
        differences=[abs(row.lambda_ - limit) for row in rows[:-1]],
        difference_errors=_lambda_errors(
            [b for _, b in cells],
            [(i, last) for i in range(last)],
            params,
            seed,
        ),
    )
