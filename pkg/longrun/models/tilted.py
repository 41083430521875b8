import logging
import math

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy.special import logsumexp

from longrun.exceptions import ConfigError, NumericalError
from longrun.models.markov import DimensionError, StateSpace, TransitionKernel
from longrun.models.sde import UnitBlocks

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

# entries are rescaled into [RESCALE_LOW, RESCALE_HIGH] during products
RESCALE_LOW = 1e-150
RESCALE_HIGH = 1e150


class TiltedKernel(BaseModel):
    """
    Nonnegative matrix M = exp(log_scale) * entries with

        M(x, y) = E_x[exp(alpha * sum_{i < 2^m} 2^-m c(X_i, u(X_i))) 1{X_1 = y}].

    Every row of entries has positive mass.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    space: StateSpace
    entries: np.ndarray
    log_scale: float = 0.0
    alpha: float
    level: int

    @field_validator("entries", mode="before")
    @classmethod
    def _entries(cls, value):
        arr = np.array(value, dtype=float)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise DimensionError(f"tilted kernel must be square: {arr.shape}")
        if not np.all(np.isfinite(arr)) or arr.min() < 0:
            logger.error("Tilted kernel has negative or non-finite entries")
            raise NumericalError("tilted kernel entries must be finite and >= 0")
        if np.any(arr.sum(axis=1) <= 0):
            logger.error("Tilted kernel has a row with no mass")
            raise NumericalError(
                "tilted kernel row underflowed to zero after rescaling"
            )
        arr.setflags(write=False)
        return arr

    @field_validator("alpha")
    @classmethod
    def _alpha(cls, value: float) -> float:
        if value == 0:
            raise ValueError("alpha must be nonzero")
        return value

    @model_validator(mode="after")
    def _size(self):
        if self.entries.shape[0] != self.space.n:
            raise DimensionError("tilted kernel does not match its space")
        if not math.isfinite(self.log_scale):
            raise NumericalError("tilted kernel scale is not finite")
        return self

    @property
    def n(self) -> int:
        return self.space.n

    def matrix(self) -> np.ndarray:
        """The unscaled matrix M; may overflow for large |alpha|."""
        return math.exp(self.log_scale) * self.entries

    def log_row_sums(self) -> np.ndarray:
        """ln E_x[exp(alpha * unit reward sum)] per state."""
        return self.log_scale + np.log(self.entries.sum(axis=1))


def _rescale(M: np.ndarray) -> tuple[np.ndarray, float]:
    top = float(M.max())
    if RESCALE_LOW <= top <= RESCALE_HIGH:
        return M, 0.0
    return M / top, math.log(top)


def tilted_kernel_exact(
    K_substep: TransitionKernel, c_u, alpha: float, m: int
) -> TiltedKernel:
    """
    M = prod_{i < 2^m} (D P) with D = diag(exp(alpha 2^-m c_u)).

    The reward weight sits at the pre-transition state, so the sum covers
    X_0 .. X_{1 - 2^-m} and excludes X_1.
    """
    if alpha == 0:
        raise ConfigError("alpha must be nonzero")
    c_u = np.asarray(c_u, dtype=float)
    if c_u.shape != (K_substep.n,):
        raise DimensionError("reward does not match the kernel size")
    s = alpha * 2.0**-m * c_u
    shift = float(s.max())
    DP = np.exp(s - shift)[:, None] * K_substep.rows

    M = np.eye(K_substep.n)
    log_scale = 0.0
    for _ in range(2**m):
        M, log_top = _rescale(M @ DP)
        log_scale += shift + log_top
    return TiltedKernel(
        space=K_substep.space,
        entries=M,
        log_scale=log_scale,
        alpha=alpha,
        level=m,
    )


def tilted_kernel_from_blocks(blocks: UnitBlocks, alpha: float) -> TiltedKernel:
    """M(x, y) = mean over samples of exp(alpha S) 1{end = y}."""
    if alpha == 0:
        raise ConfigError("alpha must be nonzero")
    n = blocks.space.n
    s = alpha * blocks.reward_sum
    shift = float(s.max())
    weights = np.exp(s - shift)
    entries = np.zeros((n, n))
    for x in range(n):
        entries[x] = np.bincount(
            blocks.end_index[x], weights=weights[x], minlength=n
        )
    entries /= blocks.samples
    entries, log_top = _rescale(entries)
    return TiltedKernel(
        space=blocks.space,
        entries=entries,
        log_scale=shift + log_top,
        alpha=alpha,
        level=blocks.level.m,
    )


def build_tilted_kernel(
    source: TransitionKernel | UnitBlocks,
    alpha: float,
    reward=None,
    control=None,
    m: int | None = None,
) -> TiltedKernel:
    """
    Tilted kernel from an exact 2^-m-step kernel or from sampled blocks.

    Blocks already carry their unit reward sums, so reward and control are
    only needed for the exact kernel.
    """
    if isinstance(source, UnitBlocks):
        return tilted_kernel_from_blocks(source, alpha)
    if reward is None or control is None:
        raise ConfigError("exact tilted kernels need a reward and a control")
    if m is None:
        m = round(math.log2(source.step.denominator))
        if source.step != 2.0**-m:
            raise ConfigError(f"kernel step {source.step} is not 2^-m")
    c_u = reward.on_states(source.space, control)
    return tilted_kernel_exact(source, c_u, alpha, m)


def psi_apply(M: TiltedKernel, g) -> np.ndarray:
    """(Psi g)(x) = (1/alpha) ln sum_y M(x, y) exp(alpha g(y))."""
    g = np.asarray(g, dtype=float)
    if g.shape != (M.n,):
        raise DimensionError("function does not match the tilted kernel")
    if not np.all(np.isfinite(g)):
        raise NumericalError("Psi needs a finite function")
    lse = logsumexp(
        np.broadcast_to(M.alpha * g, M.entries.shape), b=M.entries, axis=1
    )
    return (M.log_scale + lse) / M.alpha


def variation_gap(M1: TiltedKernel, M2: TiltedKernel) -> np.ndarray:
    """Per state, sum_y |M1(x, y) - M2(x, y)|."""
    if M1.space != M2.space:
        raise DimensionError("tilted kernels live on different spaces")
    return np.abs(M1.matrix() - M2.matrix()).sum(axis=1)
