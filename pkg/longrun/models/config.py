import hashlib
import logging
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

"""
Experiment configs: one YAML file per run, unknown keys rejected.

Every section is optional except model, levels and seed (which may also
come from --seed). See configs/ for worked examples.
"""

MODEL_NAMES = ("ou", "reflected-bm", "reflected-ou", "chain")


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelSpec(Section):
    name: str
    params: dict = Field(default_factory=dict)

    @field_validator("name")
    @classmethod
    def _known(cls, value: str) -> str:
        if value not in MODEL_NAMES:
            raise ValueError(
                f"unknown model {value!r}; expected one of {MODEL_NAMES}"
            )
        return value


class GridSpec(Section):
    """Either explicit nodes or a tensor grid of `points` per axis."""

    low: list[float] | None = None
    high: list[float] | None = None
    points: list[int] | None = None
    nodes: list[list[float]] | None = None

    @model_validator(mode="after")
    def _one_form(self):
        tensor = (self.low, self.high, self.points)
        if self.nodes is not None:
            if any(part is not None for part in tensor):
                raise ValueError("give either nodes or low/high/points")
            return self
        if any(part is None for part in tensor):
            raise ValueError("tensor grids need low, high and points")
        if not len(self.low) == len(self.high) == len(self.points):
            raise ValueError("low, high and points must have equal length")
        if any(p < 1 for p in self.points):
            raise ValueError("points per axis must be >= 1")
        return self


class ControlSpec(Section):
    kind: Literal["constant", "table", "feedback"] = "constant"
    value: list[float] | float | None = None
    values: list[float] | None = None
    gain: float | None = None
    target: float | None = None
    low: list[float] | None = None
    high: list[float] | None = None

    @model_validator(mode="after")
    def _fields_for_kind(self):
        needed = {
            "constant": ["value"],
            "table": ["values"],
            "feedback": ["gain", "target"],
        }[self.kind]
        missing = [name for name in needed if getattr(self, name) is None]
        if missing:
            raise ValueError(f"{self.kind} control needs {', '.join(missing)}")
        return self


class RewardSpec(Section):
    kind: Literal["constant", "coordinate", "quadratic", "table"]
    value: float | None = None
    index: int = 0
    center: list[float] | float = 0.0
    scale: float = 1.0
    control_weight: float = 0.0
    values: list[float] | None = None
    bound: float | None = None

    @model_validator(mode="after")
    def _fields_for_kind(self):
        if self.kind == "constant" and self.value is None:
            raise ValueError("constant reward needs value")
        if self.kind == "table" and self.values is None:
            raise ValueError("table reward needs values")
        return self


class WeightSpec(Section):
    """V on the finite states: constant 1, 1 + scale |x|^2, or a table."""

    kind: Literal["constant", "quadratic", "table"] = "constant"
    scale: float = 1.0
    values: list[float] | None = None

    @model_validator(mode="after")
    def _table(self):
        if self.kind == "table" and self.values is None:
            raise ValueError("table weight needs values")
        return self


class StabilitySpec(Section):
    indices: list[int] = Field(default_factory=lambda: [1, 10, 100, 1000])
    level: int = 0


class AuditSpec(Section):
    k: int = Field(default=1, ge=1)
    fpv_steps: int = Field(default=20, ge=1)
    n_max: int = Field(default=20, ge=1)
    x_star: int = Field(default=0, ge=0)
    # level used as the proxy limit kernel, if any
    limit_level: int | None = None
    gap_horizon: int = Field(default=5, ge=1)


class RiskSpec(Section):
    tolerance: float = Field(default=1e-10, gt=0)
    max_iterations: int = Field(default=100_000, ge=1)
    x_ref: int = Field(default=0, ge=0)
    k_list: list[int] = Field(default_factory=lambda: [1, 2, 4, 8, 16, 32, 64])


class OutputSpec(Section):
    dir: str | None = None


class ExperimentConfig(Section):
    model: ModelSpec
    grid: GridSpec | None = None
    control: ControlSpec = Field(default_factory=lambda: ControlSpec(value=0.0))
    reward: RewardSpec = Field(
        default_factory=lambda: RewardSpec(kind="constant", value=0.0)
    )
    weight: WeightSpec = Field(default_factory=WeightSpec)
    levels: list[int]
    alphas: list[float] = Field(default_factory=lambda: [-1.0])
    horizon: float = Field(default=100.0, gt=0)
    replicates: int = Field(default=32, ge=1)
    samples_per_state: int = Field(default=1000, ge=1)
    inner_substeps: int = Field(default=16, ge=1)
    seed: int | None = Field(default=None, ge=0, lt=2**64)
    method: Literal["exact", "monte-carlo"] = "exact"
    sweep: Literal["convergence", "stability"] = "convergence"
    stability: StabilitySpec = Field(default_factory=StabilitySpec)
    audit: AuditSpec = Field(default_factory=AuditSpec)
    risk: RiskSpec = Field(default_factory=RiskSpec)
    output: OutputSpec = Field(default_factory=OutputSpec)

    @field_validator("levels")
    @classmethod
    def _levels(cls, value: list[int]) -> list[int]:
        if not value:
            raise ValueError("levels must be nonempty")
        if min(value) < 0 or value != sorted(set(value)):
            raise ValueError("levels must be increasing and nonnegative")
        return value

    @field_validator("alphas")
    @classmethod
    def _alphas(cls, value: list[float]) -> list[float]:
        if any(a == 0 for a in value):
            raise ValueError("risk factors must be nonzero")
        return value

    @model_validator(mode="after")
    def _grid_for_sde(self):
        if self.model.name != "chain" and self.grid is None:
            needs_grid = self.method == "exact" or self.sweep == "stability"
            if needs_grid:
                logger.warning(
                    f"Model {self.model.name} has no grid; commands that "
                    "need a finite kernel will fail"
                )
        return self

    def to_yaml(self) -> str:
        return yaml.safe_dump(
            self.model_dump(mode="json"), sort_keys=True, default_flow_style=False
        )

    def digest(self) -> str:
        """Hash of everything that can change the numbers (not output)."""
        payload = yaml.safe_dump(
            self.model_dump(mode="json", exclude={"output"}), sort_keys=True
        )
        return hashlib.sha256(payload.encode()).hexdigest()


class RunManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config_hash: str
    version: str
    seed: int
    created_at: str
    files: dict[str, str]
