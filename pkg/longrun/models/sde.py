import logging
import math
from collections.abc import Callable, Sequence
from fractions import Fraction
from typing import TYPE_CHECKING, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from longrun.exceptions import ConfigError, NumericalError
from longrun.models.markov import StateSpace, TransitionKernel
from longrun.utils.parallel import ordered_map
from longrun.utils.rng_utils import replicate_streams

if TYPE_CHECKING:
    from longrun.models.average import RewardFunction

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

DEFAULT_INNER_SUBSTEPS = 16
# normals drawn per replicate per chunk; bounds memory on long horizons
CHUNK_STEPS = 1 << 14
CONTROL_TOL = 1e-12


class DivergenceError(NumericalError):
    def __init__(self, time: float, state):
        super().__init__(f"non-finite state {state} at time {time:.6g}")
        self.time = time
        self.state = state


class DomainError(ConfigError):
    pass


class GridError(ConfigError):
    pass


class ControlError(NumericalError):
    pass


class Box(BaseModel):
    """Axis-aligned box with reflecting boundary."""

    model_config = ConfigDict(frozen=True)

    low: tuple[float, ...]
    high: tuple[float, ...]

    @model_validator(mode="after")
    def _widths(self):
        if len(self.low) != len(self.high):
            raise DomainError("box bounds have different dimensions")
        for lo, hi in zip(self.low, self.high):
            if not hi > lo:
                logger.error(f"Degenerate box side [{lo}, {hi}]")
                raise DomainError(f"degenerate box side [{lo}, {hi}]")
        return self

    @property
    def dim(self) -> int:
        return len(self.low)

    def fold(self, x: np.ndarray) -> np.ndarray:
        """Coordinatewise reflection x -> 2 * bound - x until inside."""
        low = np.asarray(self.low)
        width = np.asarray(self.high) - low
        y = np.mod(x - low, 2.0 * width)
        y = np.where(y > width, 2.0 * width - y, y)
        return low + y

    def contains(self, x: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        x = np.atleast_2d(x)
        low = np.asarray(self.low) - tol
        high = np.asarray(self.high) + tol
        return np.all((x >= low) & (x <= high), axis=-1)

    def center(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.low) + np.asarray(self.high))


class ControlSet(BaseModel):
    """Compact control set U: a box or a finite list of points."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["box", "finite"] = "box"
    low: tuple[float, ...] = ()
    high: tuple[float, ...] = ()
    points: tuple[tuple[float, ...], ...] = ()

    @model_validator(mode="after")
    def _shape(self):
        if self.kind == "box":
            if not self.low or len(self.low) != len(self.high):
                raise ValueError("box control set needs matching low/high")
            if not all(map(math.isfinite, self.low + self.high)):
                raise ValueError("control box must be bounded")
            if any(hi < lo for lo, hi in zip(self.low, self.high)):
                raise ValueError("control box has high < low")
        elif not self.points:
            raise ValueError("finite control set needs points")
        return self

    @classmethod
    def interval(cls, low: float, high: float) -> "ControlSet":
        return cls(kind="box", low=(low,), high=(high,))

    @property
    def dim(self) -> int:
        return len(self.low) if self.kind == "box" else len(self.points[0])

    def contains(self, a: np.ndarray) -> np.ndarray:
        a = np.atleast_2d(a)
        if self.kind == "box":
            low = np.asarray(self.low) - CONTROL_TOL
            high = np.asarray(self.high) + CONTROL_TOL
            return np.all((a >= low) & (a <= high), axis=-1)
        pts = np.asarray(self.points)
        close = np.abs(a[:, None, :] - pts[None, :, :]) <= CONTROL_TOL
        return np.any(np.all(close, axis=-1), axis=-1)


class MarkovControl(BaseModel):
    """Feedback map u: state -> U, evaluated on batches of state points."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    fn: Callable[[np.ndarray], np.ndarray]
    control_set: ControlSet
    name: str = "u"

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        a = np.asarray(self.fn(points), dtype=float)
        a = a.reshape(points.shape[0], -1)
        inside = self.control_set.contains(a)
        if not np.all(inside):
            bad = int(np.argmin(inside))
            logger.error(
                f"Control {self.name} gives {a[bad]} at {points[bad]}, "
                "outside U"
            )
            raise ControlError(
                f"control {self.name} left U at state {points[bad]}: {a[bad]}"
            )
        return a

    @classmethod
    def constant(
        cls, value, control_set: ControlSet, name: str | None = None
    ) -> "MarkovControl":
        value = np.atleast_1d(np.asarray(value, dtype=float))

        def fn(points: np.ndarray) -> np.ndarray:
            return np.tile(value, (points.shape[0], 1))

        return cls(fn=fn, control_set=control_set, name=name or f"{value}")


class ControlFamily(BaseModel):
    """
    Sequence u_n(x) = u(x) * (1 - 1/n) converging pointwise to u.

    The members stay in U whenever U is a box containing the segment
    from 0 to every value of u.
    """

    model_config = ConfigDict(frozen=True)

    limit: MarkovControl
    indices: tuple[int, ...]

    @field_validator("indices")
    @classmethod
    def _indices(cls, value: tuple[int, ...]) -> tuple[int, ...]:
        if not value or min(value) < 1:
            raise ValueError("family indices must be positive integers")
        if list(value) != sorted(value):
            raise ValueError("family indices must be increasing")
        return value

    def member(self, n: int) -> MarkovControl:
        scale = 1.0 - 1.0 / n
        base = self.limit.fn

        def fn(points: np.ndarray) -> np.ndarray:
            return scale * np.asarray(base(points), dtype=float)

        return MarkovControl(
            fn=fn,
            control_set=self.limit.control_set,
            name=f"{self.limit.name}[n={n}]",
        )


class DiscretizationLevel(BaseModel):
    model_config = ConfigDict(frozen=True)

    m: int
    inner_substeps: int = DEFAULT_INNER_SUBSTEPS

    @field_validator("m")
    @classmethod
    def _m(cls, value: int) -> int:
        if value < 0:
            raise ValueError("level m must be nonnegative")
        return value

    @field_validator("inner_substeps")
    @classmethod
    def _inner(cls, value: int) -> int:
        if value < 1:
            raise ValueError("inner_substeps must be >= 1")
        return value

    @property
    def h(self) -> Fraction:
        return Fraction(1, 2**self.m)

    @property
    def intervals_per_unit(self) -> int:
        return 2**self.m

    def intervals(self, horizon: float) -> int:
        count = horizon * 2**self.m
        if horizon <= 0 or not math.isclose(count, round(count), abs_tol=1e-9):
            logger.error(f"Horizon {horizon} is not a positive multiple of h")
            raise ConfigError(
                f"horizon {horizon} must be a positive multiple of h = "
                f"2^-{self.m}"
            )
        return int(round(count))


class SamplePath(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    times: np.ndarray
    states: np.ndarray
    controls_applied: np.ndarray
    level: DiscretizationLevel

    def interval_starts(self) -> np.ndarray:
        """Recorded states at the control instants nh."""
        step = (len(self.times) - 1) // len(self.controls_applied)
        return self.states[:-1:step]


class BatchResult(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    final: np.ndarray
    reward_sums: np.ndarray
    path: SamplePath | None = None


class SDEModel(BaseModel):
    """
    dX = b(X, a) dt + sigma(X) dW with a held at u(X_nh) on [nh, (n+1)h).

    drift maps (R, d) states and (R, k) controls to (R, d); diffusion maps
    (R, d) states to (R, d, d). A box domain means reflected dynamics.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    name: str
    dim: int
    drift: Callable[[np.ndarray, np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray], np.ndarray]
    domain: Box | None = None
    growth_constant: float = 1.0
    nondegenerate: bool = True

    @model_validator(mode="after")
    def _domain_dim(self):
        if self.domain is not None and self.domain.dim != self.dim:
            raise DomainError(
                f"box has dimension {self.domain.dim}, model {self.dim}"
            )
        return self

    def default_start(self) -> np.ndarray:
        if self.domain is not None:
            return self.domain.center()
        return np.zeros(self.dim)

    def locate(self, final: np.ndarray, grid: StateSpace) -> np.ndarray:
        return nearest_node(final, grid)

    def run_batch(
        self,
        control: MarkovControl,
        level: DiscretizationLevel,
        starts: np.ndarray,
        n_intervals: int,
        rngs: Sequence[np.random.Generator],
        reward: "RewardFunction | None" = None,
        count_from: int = 0,
        noise_level: int | None = None,
        reflect: bool | None = None,
        record: bool = False,
    ) -> BatchResult:
        """
        Euler-Maruyama over n_intervals control intervals for R paths.

        Each path draws its increments from its own generator at the
        resolution of noise_level, so the same generators give coupled
        Brownian paths at every coarser level.
        """
        starts = np.atleast_2d(np.asarray(starts, dtype=float))
        R, d = starts.shape
        if d != self.dim or len(rngs) != R:
            raise ConfigError("starts and generators do not match the model")
        reflect = self.domain is not None if reflect is None else reflect
        if reflect and self.domain is None:
            raise DomainError(f"model {self.name} has no reflecting box")

        noise_level = level.m if noise_level is None else noise_level
        if noise_level < level.m:
            raise ConfigError("noise_level must be >= the level m")
        inner = level.inner_substeps
        fine = 2 ** (noise_level - level.m)
        h = 2.0**-level.m
        dt = h / inner
        fine_scale = math.sqrt(dt / fine)
        per_interval = inner * fine
        chunk = max(1, CHUNK_STEPS // per_interval)

        x = starts.copy()
        reward_sums = np.zeros(R)
        if record:
            states = [x[0].copy()]
            controls = []

        for first in range(0, n_intervals, chunk):
            count = min(chunk, n_intervals - first)
            noise = np.stack(
                [rng.standard_normal((count * per_interval, d)) for rng in rngs]
            )
            dW = noise.reshape(R, count, inner, fine, d).sum(axis=3)
            dW *= fine_scale
            for i in range(count):
                k = first + i
                a = control(x)
                if reward is not None and k >= count_from:
                    reward_sums += h * reward(x, a)
                if record:
                    controls.append(a[0].copy())
                for j in range(inner):
                    sigma = self.diffusion(x)
                    x = (
                        x
                        + self.drift(x, a) * dt
                        + np.einsum("rij,rj->ri", sigma, dW[:, i, j, :])
                    )
                    if reflect:
                        x = self.domain.fold(x)
                    if not np.all(np.isfinite(x)):
                        bad = int(np.argmin(np.all(np.isfinite(x), axis=1)))
                        time = (k * inner + j + 1) * dt
                        logger.error(
                            f"Model {self.name} diverged at t={time}: {x[bad]}"
                        )
                        raise DivergenceError(time, x[bad].tolist())
                    if record:
                        states.append(x[0].copy())

        path = None
        if record:
            n_steps = n_intervals * inner
            path = SamplePath(
                times=np.arange(n_steps + 1) * dt,
                states=np.array(states),
                controls_applied=np.array(controls).reshape(n_intervals, -1),
                level=level,
            )
        return BatchResult(final=x, reward_sums=reward_sums, path=path)


def nearest_node(points: np.ndarray, grid: StateSpace) -> np.ndarray:
    """Index of the nearest grid node, ties toward the lower index."""
    if grid.embedding is None:
        raise GridError("grid projection needs an embedded state space")
    nodes = grid.embedding
    points = np.atleast_2d(points)
    out = np.empty(points.shape[0], dtype=np.int64)
    step = max(1, (1 << 20) // max(1, nodes.shape[0] * nodes.shape[1]))
    for first in range(0, points.shape[0], step):
        block = points[first : first + step]
        dist = ((block[:, None, :] - nodes[None, :, :]) ** 2).sum(axis=2)
        out[first : first + step] = np.argmin(dist, axis=1)
    return out


def _simulate(model, control, level, horizon, seed, start, noise_level, reflect):
    n_intervals = level.intervals(horizon)
    start = model.default_start() if start is None else np.asarray(start)
    rngs = replicate_streams(seed, 0, 1)
    result = model.run_batch(
        control,
        level,
        np.asarray(start, dtype=float).reshape(1, -1),
        n_intervals,
        rngs,
        noise_level=noise_level,
        reflect=reflect,
        record=True,
    )
    return result.path


def simulate_path(
    model: SDEModel,
    control: MarkovControl,
    level: DiscretizationLevel,
    horizon: float,
    seed: int,
    start=None,
    noise_level: int | None = None,
) -> SamplePath:
    """One free Euler-Maruyama path on [0, horizon]; never folded into a box."""
    return _simulate(
        model, control, level, horizon, seed, start, noise_level, False
    )


def simulate_reflected_path(
    model: SDEModel,
    control: MarkovControl,
    level: DiscretizationLevel,
    horizon: float,
    seed: int,
    start=None,
    noise_level: int | None = None,
) -> SamplePath:
    if model.domain is None:
        logger.error(f"Model {model.name} has no box to reflect in")
        raise DomainError(f"model {model.name} has no reflecting box")
    return _simulate(
        model, control, level, horizon, seed, start, noise_level, True
    )


class UnitBlocks(BaseModel):
    """Unit-time simulations from every grid state: end nodes and rewards."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    space: StateSpace
    level: DiscretizationLevel
    end_index: np.ndarray
    reward_sum: np.ndarray

    @property
    def samples(self) -> int:
        return self.end_index.shape[1]

    def kernel(self) -> TransitionKernel:
        n = self.space.n
        counts = np.zeros((n, n))
        for x in range(n):
            counts[x] = np.bincount(self.end_index[x], minlength=n)
        return TransitionKernel(
            space=self.space, rows=counts / self.samples, step=1
        )

    def aggregate(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-state mean of the unit reward sum and its standard error."""
        mean = self.reward_sum.mean(axis=1)
        if self.samples < 2:
            return mean, np.zeros_like(mean)
        se = self.reward_sum.std(axis=1, ddof=1) / math.sqrt(self.samples)
        return mean, se

    def resample(self, idx: np.ndarray) -> "UnitBlocks":
        """Blocks restricted to per-state sample columns idx (shape n x k)."""
        rows = np.arange(self.space.n)[:, None]
        return UnitBlocks(
            space=self.space,
            level=self.level,
            end_index=self.end_index[rows, idx],
            reward_sum=self.reward_sum[rows, idx],
        )


def _check_grid(model, grid: StateSpace) -> None:
    if getattr(model, "domain", None) is None:
        return
    inside = model.domain.contains(grid.embedding)
    if not np.all(inside):
        bad = int(np.argmin(inside))
        logger.error(f"Grid node {grid.embedding[bad]} outside the domain")
        raise GridError(f"grid node {grid.embedding[bad]} outside the domain")


def sample_unit_blocks(
    model,
    control: MarkovControl,
    grid: StateSpace,
    level: DiscretizationLevel,
    samples_per_state: int,
    seed: int,
    reward: "RewardFunction | None" = None,
    noise_level: int | None = None,
    threads: int = 1,
) -> UnitBlocks:
    if samples_per_state < 1:
        raise ConfigError("samples_per_state must be >= 1")
    starts = grid.points()
    if isinstance(model, SDEModel):
        if grid.embedding is None or grid.dim != model.dim:
            raise GridError("grid embedding does not match the model")
        _check_grid(model, grid)

    n_intervals = level.intervals_per_unit

    def run(state: int) -> tuple[np.ndarray, np.ndarray]:
        rngs = replicate_streams(seed, state, samples_per_state)
        batch = model.run_batch(
            control,
            level,
            np.tile(starts[state], (samples_per_state, 1)),
            n_intervals,
            rngs,
            reward=reward,
            noise_level=noise_level,
        )
        return model.locate(batch.final, grid), batch.reward_sums

    results = ordered_map(run, range(grid.n), threads)
    return UnitBlocks(
        space=grid,
        level=level,
        end_index=np.stack([r[0] for r in results]),
        reward_sum=np.stack([r[1] for r in results]),
    )


def empirical_unit_kernel(
    model,
    control: MarkovControl,
    grid: StateSpace,
    level: DiscretizationLevel,
    samples_per_state: int,
    seed: int,
    noise_level: int | None = None,
    threads: int = 1,
) -> TransitionKernel:
    blocks = sample_unit_blocks(
        model,
        control,
        grid,
        level,
        samples_per_state,
        seed,
        noise_level=noise_level,
        threads=threads,
    )
    return blocks.kernel()


class AggregateEstimate(BaseModel):
    model_config = ConfigDict(frozen=True)

    mean: float
    std_error: float


def unit_reward_aggregate(
    model,
    control: MarkovControl,
    reward: "RewardFunction",
    start,
    level: DiscretizationLevel,
    samples: int,
    seed: int,
    noise_level: int | None = None,
) -> AggregateEstimate:
    """Monte-Carlo C_m(x, u): expected reward collected over one unit."""
    if samples < 1:
        raise ConfigError("samples must be >= 1")
    start = np.asarray(start, dtype=float).reshape(1, -1)
    batch = model.run_batch(
        control,
        level,
        np.tile(start, (samples, 1)),
        level.intervals_per_unit,
        replicate_streams(seed, 0, samples),
        reward=reward,
        noise_level=noise_level,
    )
    sums = batch.reward_sums
    se = sums.std(ddof=1) / math.sqrt(samples) if samples > 1 else 0.0
    return AggregateEstimate(mean=float(sums.mean()), std_error=float(se))


def check_growth(
    model: SDEModel, points: np.ndarray, controls: np.ndarray
) -> float:
    """
    Spot check of |b(x,a)|^2 + ||sigma(x)||^2 <= K (1 + |x|^2).

    Returns the largest observed ratio over the sampled (x, a) pairs; a
    ratio above the declared constant is logged.
    """
    points = np.atleast_2d(points)
    worst = 0.0
    for a in np.atleast_2d(controls):
        a_batch = np.tile(a, (points.shape[0], 1))
        b = model.drift(points, a_batch)
        sigma = model.diffusion(points)
        lhs = (b**2).sum(axis=1) + (sigma**2).sum(axis=(1, 2))
        ratio = lhs / (1.0 + (points**2).sum(axis=1))
        worst = max(worst, float(ratio.max()))
    if worst > model.growth_constant:
        logger.warning(
            f"Model {model.name} exceeds its growth constant: "
            f"{worst:.4g} > {model.growth_constant}"
        )
    return worst


def check_nondegenerate(model: SDEModel, points: np.ndarray) -> bool:
    sigma = model.diffusion(np.atleast_2d(points))
    eig = np.linalg.eigvalsh(np.einsum("rij,rkj->rik", sigma, sigma))
    ok = bool(np.all(eig > 0))
    if model.nondegenerate and not ok:
        logger.warning(f"Model {model.name} is degenerate at sampled points")
    return ok


def ou_model(theta: float = 1.0, sigma: float = 1.0, dim: int = 1) -> SDEModel:
    """b(x, a) = -theta x + a, sigma(x) = sigma I on R^d."""

    def drift(x, a):
        return -theta * x + a

    def diffusion(x):
        return np.broadcast_to(sigma * np.eye(dim), (x.shape[0], dim, dim))

    return SDEModel(
        name="ou",
        dim=dim,
        drift=drift,
        diffusion=diffusion,
        growth_constant=2.0 * (theta**2 + 1.0) + dim * sigma**2,
        nondegenerate=sigma != 0,
    )


def reflected_bm_model(
    low: float = 0.0, high: float = 1.0, sigma: float = 1.0
) -> SDEModel:
    """b(x, a) = a, sigma constant, reflected in [low, high]."""

    def drift(x, a):
        return np.broadcast_to(a, x.shape)

    def diffusion(x):
        return np.full((x.shape[0], 1, 1), sigma)

    return SDEModel(
        name="reflected-bm",
        dim=1,
        drift=drift,
        diffusion=diffusion,
        domain=Box(low=(low,), high=(high,)),
        growth_constant=1.0 + sigma**2,
        nondegenerate=sigma != 0,
    )


def reflected_ou_model(
    theta: float = 1.0,
    sigma: float = 1.0,
    low: float = -1.0,
    high: float = 1.0,
) -> SDEModel:
    """b(x, a) = -theta x + a, sigma constant, reflected in [low, high]."""
    model = ou_model(theta=theta, sigma=sigma, dim=1)
    return model.model_copy(
        update={"name": "reflected-ou", "domain": Box(low=(low,), high=(high,))}
    )


MODEL_REGISTRY: dict[str, Callable[..., SDEModel]] = {
    "ou": ou_model,
    "reflected-bm": reflected_bm_model,
    "reflected-ou": reflected_ou_model,
}
