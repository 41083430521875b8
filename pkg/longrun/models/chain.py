import logging
from collections.abc import Sequence
from typing import TYPE_CHECKING

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from longrun.exceptions import ConfigError
from longrun.models.markov import (
    StateSpace,
    TransitionKernel,
    kernel_power,
)
from longrun.models.sde import (
    BatchResult,
    ControlSet,
    DiscretizationLevel,
    MarkovControl,
    SamplePath,
)
from longrun.utils.rng_utils import replicate_streams

if TYPE_CHECKING:
    from longrun.models.average import RewardFunction

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

CHAIN_CONTROLS = ControlSet.interval(0.0, 1.0)


class ChainModel(BaseModel):
    """
    Finite controlled chain simulated by its own substep kernel.

    One transition per control interval; the row used from state x under
    control a in [0, 1] is (1 - a) * base[x] + a * alternate[x].
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    name: str = "chain"
    space: StateSpace
    base: np.ndarray
    alternate: np.ndarray | None = None

    @field_validator("base", "alternate", mode="before")
    @classmethod
    def _stochastic(cls, value):
        if value is None:
            return None
        # validated as a kernel, kept as a plain read-only matrix
        kernel = TransitionKernel(
            space=StateSpace.indexed(len(value)), rows=value
        )
        return kernel.rows

    @model_validator(mode="after")
    def _sizes(self):
        for arr in (self.base, self.alternate):
            if arr is not None and arr.shape[0] != self.space.n:
                raise ConfigError("chain matrices do not match the space")
        return self

    @property
    def dim(self) -> int:
        return 1

    def default_start(self) -> np.ndarray:
        return np.zeros(1)

    def locate(self, final: np.ndarray, grid: StateSpace) -> np.ndarray:
        return np.asarray(final, dtype=float)[:, 0].astype(np.int64)

    def rows_for(self, states: np.ndarray, a: np.ndarray) -> np.ndarray:
        rows = self.base[states]
        if self.alternate is None:
            return rows
        a = np.asarray(a, dtype=float).reshape(-1, 1)
        return (1.0 - a) * rows + a * self.alternate[states]

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
        starts = np.atleast_2d(np.asarray(starts, dtype=float))
        R = starts.shape[0]
        if len(rngs) != R:
            raise ConfigError("one generator per replicate is required")
        h = 2.0**-level.m
        points = self.space.points()
        x = starts[:, 0].astype(np.int64)
        uniforms = np.stack([rng.random(n_intervals) for rng in rngs])
        reward_sums = np.zeros(R)
        if record:
            visited = [int(x[0])]
            controls = []

        for k in range(n_intervals):
            a = control(points[x])
            if reward is not None and k >= count_from:
                reward_sums += h * reward(points[x], a)
            if record:
                controls.append(a[0].copy())
            cumulative = np.cumsum(self.rows_for(x, a[:, 0]), axis=1)
            x = (uniforms[:, k, None] >= cumulative).sum(axis=1)
            x = np.minimum(x, self.space.n - 1)
            if record:
                visited.append(int(x[0]))

        path = None
        if record:
            path = SamplePath(
                times=np.arange(n_intervals + 1) * h,
                states=np.array(visited, dtype=float).reshape(-1, 1),
                controls_applied=np.array(controls).reshape(n_intervals, -1),
                level=level,
            )
        return BatchResult(
            final=x.astype(float).reshape(-1, 1),
            reward_sums=reward_sums,
            path=path,
        )


def chain_model(
    base, alternate=None, labels: Sequence[str] | None = None
) -> ChainModel:
    base = np.asarray(base, dtype=float)
    space = (
        StateSpace(labels=labels)
        if labels is not None
        else StateSpace.indexed(base.shape[0])
    )
    return ChainModel(space=space, base=base, alternate=alternate)


def substep_kernel(
    model: ChainModel, control: MarkovControl, level: DiscretizationLevel
) -> TransitionKernel:
    """Exact kernel over one control interval of length 2^-m."""
    states = np.arange(model.space.n)
    a = control(model.space.points())
    return TransitionKernel(
        space=model.space,
        rows=model.rows_for(states, a[:, 0]),
        step=level.h,
    )


def unit_kernel(
    model: ChainModel, control: MarkovControl, level: DiscretizationLevel
) -> TransitionKernel:
    return kernel_power(
        substep_kernel(model, control, level), level.intervals_per_unit
    )


def simulate_chain_path(
    model: ChainModel,
    control: MarkovControl,
    level: DiscretizationLevel,
    horizon: float,
    seed: int,
    start: int = 0,
) -> SamplePath:
    n_intervals = level.intervals(horizon)
    result = model.run_batch(
        control,
        level,
        np.array([[float(start)]]),
        n_intervals,
        replicate_streams(seed, start, 1),
        record=True,
    )
    return result.path
