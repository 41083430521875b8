import logging
from fractions import Fraction
from typing import Literal

import numpy as np
import scipy.linalg
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from longrun.exceptions import NumericalError

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

ROW_SUM_TOL = 1e-12
RENORMALIZE_TOL = 1e-9
SOLVE_COND_LIMIT = 1e12
POWER_TOL = 1e-12
POWER_MAX_ITERATIONS = 1_000_000
APERIODIC_TOL = 1e-9


class DimensionError(NumericalError):
    pass


class StochasticityError(NumericalError):
    pass


class ErgodicityError(NumericalError):
    def __init__(self, message: str, condition: str):
        super().__init__(f"({condition}) {message}")
        self.condition = condition


def _frozen_array(value, ndim: int, name: str) -> np.ndarray:
    arr = np.array(value, dtype=float)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got {arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    arr.setflags(write=False)
    return arr


class StateSpace(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    labels: tuple[str, ...]
    embedding: np.ndarray | None = None

    @field_validator("labels", mode="before")
    @classmethod
    def _labels(cls, value):
        labels = tuple(str(label) for label in value)
        if len(labels) == 0:
            raise ValueError("state space needs at least one state")
        if len(set(labels)) != len(labels):
            raise ValueError("state labels must be distinct")
        return labels

    @field_validator("embedding", mode="before")
    @classmethod
    def _embedding(cls, value):
        if value is None:
            return None
        arr = np.array(value, dtype=float)
        if arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        return _frozen_array(arr, 2, "embedding")

    @model_validator(mode="after")
    def _embedding_total(self):
        if self.embedding is not None and len(self.embedding) != self.n:
            raise ValueError(
                f"embedding has {len(self.embedding)} points for "
                f"{self.n} states"
            )
        return self

    @classmethod
    def indexed(cls, n: int) -> "StateSpace":
        return cls(labels=[str(i) for i in range(n)])

    @classmethod
    def grid(cls, points) -> "StateSpace":
        points = np.array(points, dtype=float)
        if points.ndim == 1:
            points = points.reshape(-1, 1)
        labels = [",".join(f"{c:.12g}" for c in p) for p in points]
        return cls(labels=labels, embedding=points)

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int | None:
        return None if self.embedding is None else self.embedding.shape[1]

    def index(self, label: str) -> int:
        try:
            return self.labels.index(str(label))
        except ValueError:
            logger.error(f"Unknown state label {label}")
            raise DimensionError(f"unknown state label {label}") from None

    def points(self) -> np.ndarray:
        """Embedding if present, else the state indices as a column."""
        if self.embedding is not None:
            return self.embedding
        return np.arange(self.n, dtype=float).reshape(-1, 1)

    def __eq__(self, other) -> bool:
        if not isinstance(other, StateSpace):
            return NotImplemented
        if self.labels != other.labels:
            return False
        if self.embedding is None or other.embedding is None:
            return self.embedding is None and other.embedding is None
        return np.array_equal(self.embedding, other.embedding)

    def __hash__(self) -> int:
        return hash(self.labels)


class TransitionKernel(BaseModel):
    """Row-stochastic matrix over a finite state space for a time step."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    space: StateSpace
    rows: np.ndarray
    step: Fraction = Fraction(1)

    @field_validator("rows", mode="before")
    @classmethod
    def _rows(cls, value):
        arr = np.array(value, dtype=float)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise DimensionError(f"kernel must be square, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise StochasticityError("kernel entries must be finite")
        if arr.min() < -ROW_SUM_TOL or arr.max() > 1 + ROW_SUM_TOL:
            logger.error("Kernel entries outside [0, 1]")
            raise StochasticityError("kernel entries must lie in [0, 1]")
        arr = np.clip(arr, 0.0, 1.0)

        deviation = np.abs(arr.sum(axis=1) - 1.0)
        worst = float(deviation.max())
        if worst > RENORMALIZE_TOL:
            row = int(deviation.argmax())
            logger.error(f"Kernel row {row} sums to 1 +- {worst:.3e}")
            raise StochasticityError(
                f"row {row} deviates from 1 by {worst:.3e}"
            )
        if worst > ROW_SUM_TOL:
            logger.warning(f"Renormalizing kernel rows (deviation {worst})")
            arr = arr / arr.sum(axis=1, keepdims=True)
        arr.setflags(write=False)
        return arr

    @field_validator("step", mode="before")
    @classmethod
    def _step(cls, value):
        step = value if isinstance(value, Fraction) else Fraction(value)
        if step <= 0:
            raise ValueError("kernel step must be positive")
        return step

    @model_validator(mode="after")
    def _shape_matches_space(self):
        if self.rows.shape[0] != self.space.n:
            raise DimensionError(
                f"kernel of size {self.rows.shape[0]} over a space of "
                f"{self.space.n} states"
            )
        return self

    @property
    def n(self) -> int:
        return self.space.n

    def apply(self, f) -> np.ndarray:
        """(P f)(x) = sum_y P(x, y) f(y)."""
        return self.rows @ np.asarray(f, dtype=float)

    def push(self, nu) -> np.ndarray:
        """(nu P)(y) = sum_x nu(x) P(x, y)."""
        return np.asarray(nu, dtype=float) @ self.rows


class LyapunovWeight(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    values: np.ndarray

    @field_validator("values", mode="before")
    @classmethod
    def _values(cls, value):
        arr = _frozen_array(value, 1, "weight")
        if arr.size and arr.min() < 1.0:
            raise ValueError("Lyapunov weight must satisfy V(x) >= 1")
        return arr

    @classmethod
    def constant(cls, n: int) -> "LyapunovWeight":
        return cls(values=np.ones(n))


class InvariantMeasure(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    space: StateSpace
    weights: np.ndarray

    @field_validator("weights", mode="before")
    @classmethod
    def _weights(cls, value):
        arr = _frozen_array(value, 1, "measure")
        if arr.min() < 0:
            raise ValueError("invariant measure must be nonnegative")
        if abs(arr.sum() - 1.0) > ROW_SUM_TOL:
            raise ValueError("invariant measure must sum to 1")
        return arr

    def integrate(self, f) -> float:
        return float(self.weights @ np.asarray(f, dtype=float))


class WeightedFn(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    values: np.ndarray
    weight: LyapunovWeight

    @field_validator("values", mode="before")
    @classmethod
    def _values(cls, value):
        return _frozen_array(value, 1, "function")

    @model_validator(mode="after")
    def _same_size(self):
        if self.values.shape != self.weight.values.shape:
            raise DimensionError("function and weight sizes differ")
        return self


def identity_kernel(space: StateSpace, step=Fraction(0)) -> TransitionKernel:
    # step 0 is the neutral element of compose; kernels need step > 0
    kernel = TransitionKernel.model_construct(
        space=space, rows=np.eye(space.n), step=Fraction(step)
    )
    kernel.rows.setflags(write=False)
    return kernel


def compose(K1: TransitionKernel, K2: TransitionKernel) -> TransitionKernel:
    if K1.space != K2.space:
        logger.error(
            f"Cannot compose kernels over {K1.n} and {K2.n} states"
        )
        raise DimensionError("kernels live on different state spaces")
    return TransitionKernel(
        space=K1.space, rows=K1.rows @ K2.rows, step=K1.step + K2.step
    )


def kernel_power(K: TransitionKernel, n: int) -> TransitionKernel:
    if n < 1:
        raise ValueError(f"kernel power must be >= 1, got {n}")
    return TransitionKernel(
        space=K.space,
        rows=np.linalg.matrix_power(K.rows, n),
        step=K.step * n,
    )


def v_norm_fn(f: WeightedFn) -> float:
    return float(np.max(np.abs(f.values) / f.weight.values))


def v_norm_measure_diff(nu1, nu2, V: LyapunovWeight) -> float:
    """||nu1 - nu2||_V, the dual norm sup over ||f||_V <= 1 in closed form."""
    nu1 = np.asarray(nu1, dtype=float)
    nu2 = np.asarray(nu2, dtype=float)
    if nu1.shape != nu2.shape or nu1.shape[-1] != V.values.shape[0]:
        raise DimensionError("measures and weight have different sizes")
    return float(np.abs(nu1 - nu2) @ V.values)


def span_seminorm(g) -> float:
    g = np.asarray(g, dtype=float)
    return float(g.max() - g.min())


def _stationary_by_solve(P: np.ndarray) -> np.ndarray | None:
    n = P.shape[0]
    A = P.T - np.eye(n)
    A[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    if np.linalg.cond(A) > SOLVE_COND_LIMIT:
        return None
    try:
        mu = scipy.linalg.solve(A, b)
    except scipy.linalg.LinAlgError:
        return None
    if mu.min() < -1e-10 or np.abs(mu @ P - mu).sum() > 1e-10:
        return None
    return mu


def _stationary_by_power(
    P: np.ndarray, tol: float, max_iterations: int
) -> np.ndarray:
    n = P.shape[0]
    mu = np.full(n, 1.0 / n)
    for _ in range(max_iterations):
        nxt = mu @ P
        if np.abs(nxt - mu).sum() <= tol:
            return nxt
        mu = nxt
    logger.error(
        f"Power iteration did not converge in {max_iterations} iterations"
    )
    raise ErgodicityError(
        f"power iteration did not converge in {max_iterations} iterations; "
        "the chain is periodic or reducible",
        condition="ERd",
    )


def _check_aperiodic(P: np.ndarray, mu: np.ndarray, min_steps: int) -> None:
    Q = P.copy()
    steps = 1
    while True:
        if np.abs(Q - mu[None, :]).sum(axis=1).max() <= APERIODIC_TOL:
            return
        if steps >= min_steps:
            break
        Q = Q @ Q
        steps *= 2
    logger.error(f"Rows of P^{steps} have not converged to the stationary law")
    raise ErgodicityError(
        f"P^n does not converge to the stationary law within {steps} steps; "
        "the chain is periodic or mixes too slowly",
        condition="ERd",
    )


def invariant_measure(
    K: TransitionKernel,
    method: Literal["solve", "power"] = "solve",
    tol: float = POWER_TOL,
    max_iterations: int = POWER_MAX_ITERATIONS,
) -> InvariantMeasure:
    """
    Unique invariant probability of an irreducible aperiodic kernel.

    The dense linear solve is used first and power iteration when the
    system is numerically singular. Reducibility (more than one
    stationary law) and periodicity raise ErgodicityError.
    """
    P = K.rows
    n = K.n
    if n == 1:
        return InvariantMeasure(space=K.space, weights=[1.0])

    rank = np.linalg.matrix_rank(P.T - np.eye(n))
    if rank < n - 1:
        logger.error(f"Kernel has {n - rank} closed classes")
        raise ErgodicityError(
            f"chain is reducible ({n - rank} stationary laws)",
            condition="ERd",
        )

    mu = _stationary_by_solve(P) if method == "solve" else None
    if mu is None:
        if method == "solve":
            logger.warning("Linear solve ill-conditioned, using power iteration")
        mu = _stationary_by_power(P, tol, max_iterations)

    mu = np.clip(mu, 0.0, None)
    mu = mu / mu.sum()
    _check_aperiodic(P, mu, max_iterations)
    return InvariantMeasure(space=K.space, weights=mu)


def _row_differences(P: np.ndarray) -> np.ndarray:
    return np.abs(P[:, None, :] - P[None, :, :])


def dobrushin_delta(K: TransitionKernel) -> float:
    """max over x, x' of the total variation between rows x and x'."""
    tv = 0.5 * _row_differences(K.rows).sum(axis=2)
    return float(min(tv.max(), 1.0))


def kartashov_rho(K: TransitionKernel, V: LyapunovWeight) -> float:
    """
    max over x, x' of sum_y V(y)|P(x,y) - P(x',y)| / (V(x) + V(x')).
    """
    v = V.values
    if v.shape[0] != K.n:
        raise DimensionError("weight and kernel sizes differ")
    numerator = _row_differences(K.rows) @ v
    denominator = v[:, None] + v[None, :]
    return float((numerator / denominator).max())


def fpv_profile(K: TransitionKernel, V: LyapunovWeight, n: int) -> np.ndarray:
    """Per state, max over j = 1..n of (P^j V)(x) / V(x)."""
    v = V.values
    profile = np.zeros(K.n)
    PjV = v
    for _ in range(n):
        PjV = K.rows @ PjV
        profile = np.maximum(profile, PjV / v)
    return profile
