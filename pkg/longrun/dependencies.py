import logging
from pathlib import Path

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, ValidationError

from longrun.exceptions import ConfigError, format_validation_error
from longrun.models.audit import KernelFamily
from longrun.models.average import RewardFunction
from longrun.models.chain import (
    CHAIN_CONTROLS,
    ChainModel,
    chain_model,
    substep_kernel,
    unit_kernel,
)
from longrun.models.config import (
    ControlSpec,
    ExperimentConfig,
    GridSpec,
    ModelSpec,
    RewardSpec,
    WeightSpec,
)
from longrun.models.markov import LyapunovWeight, StateSpace
from longrun.models.sde import (
    MODEL_REGISTRY,
    ControlFamily,
    ControlSet,
    DiscretizationLevel,
    MarkovControl,
    sample_unit_blocks,
)
from longrun.utils.settings import Settings

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

RESOLVED_CONFIG = "config.resolved.yaml"

BUILDERS = {**MODEL_REGISTRY, "chain": chain_model}


class RunContext(BaseModel):
    """Global CLI flags, shared by every command through ctx.obj."""

    model_config = ConfigDict(frozen=True)

    config_path: Path | None = None
    seed: int | None = None
    out: Path | None = None
    threads: int = 1

    def load(self) -> ExperimentConfig:
        if self.config_path is None:
            logger.error("No --config given")
            raise ConfigError("this command needs --config <path>")
        return resolve_config(load_config(self.config_path), seed=self.seed)

    def out_dir(self, config: ExperimentConfig | None = None) -> Path:
        if self.out is not None:
            return self.out
        if config is not None and config.output.dir is not None:
            return Path(config.output.dir)
        return Path(Settings().get_out_dir())


def load_config(path: Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        logger.error(f"Config file not found: {path}")
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        logger.error(f"Config {path} is not valid YAML: {e}")
        raise ConfigError(f"config {path} is not valid YAML") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping")
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        message = format_validation_error(e)
        logger.error(f"Invalid config {path}: {message}")
        raise ConfigError(f"invalid config: {message}") from e


def resolve_config(
    config: ExperimentConfig, seed: int | None = None
) -> ExperimentConfig:
    """Apply --seed and require that some seed is set."""
    if seed is not None:
        config = config.model_copy(update={"seed": seed})
    if config.seed is None:
        logger.error("Run has no seed")
        raise ConfigError("seed is required (config entry or --seed)")
    return config


def write_resolved(config: ExperimentConfig, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESOLVED_CONFIG
    path.write_text(config.to_yaml(), encoding="utf-8", newline="\n")
    return path


def build_model(spec: ModelSpec):
    try:
        return BUILDERS[spec.name](**spec.params)
    except TypeError as e:
        logger.error(f"Bad parameters for model {spec.name}: {e}")
        raise ConfigError(f"model {spec.name}: {e}") from e


def build_grid(grid: GridSpec | None, model) -> StateSpace | None:
    if isinstance(model, ChainModel):
        return model.space
    if grid is None:
        return None
    if grid.nodes is not None:
        return StateSpace.grid(grid.nodes)
    axes = [
        np.linspace(lo, hi, p)
        for lo, hi, p in zip(grid.low, grid.high, grid.points)
    ]
    mesh = np.meshgrid(*axes, indexing="ij")
    return StateSpace.grid(np.stack([m.ravel() for m in mesh], axis=1))


def _control_set(spec: ControlSpec, model) -> ControlSet:
    if isinstance(model, ChainModel):
        return CHAIN_CONTROLS
    if spec.low is None or spec.high is None:
        logger.error(f"Control for model {model.name} has no low/high bounds")
        raise ConfigError("SDE controls need a compact box: set low and high")
    if len(spec.low) != model.dim or len(spec.high) != model.dim:
        raise ConfigError(f"control bounds must have {model.dim} entries")
    try:
        return ControlSet(kind="box", low=tuple(spec.low), high=tuple(spec.high))
    except ValidationError as e:
        message = format_validation_error(e)
        logger.error(f"Invalid control box: {message}")
        raise ConfigError(f"invalid control box: {message}") from e


def build_control(spec: ControlSpec, model) -> MarkovControl:
    control_set = _control_set(spec, model)
    if spec.kind == "constant":
        return MarkovControl.constant(spec.value, control_set)

    if spec.kind == "table":
        if not isinstance(model, ChainModel):
            raise ConfigError("table controls need a finite chain model")
        table = np.asarray(spec.values, dtype=float)
        if table.shape != (model.space.n,):
            raise ConfigError("control table does not match the chain size")

        def fn(points):
            return table[np.asarray(points[:, 0], dtype=np.int64)]

        return MarkovControl(fn=fn, control_set=control_set, name="table")

    gain, target = spec.gain, spec.target

    def feedback(points):
        return gain * (target - points)

    return MarkovControl(
        fn=feedback,
        control_set=control_set,
        name=f"feedback({gain:g},{target:g})",
    )


def build_family(config: ExperimentConfig, model) -> ControlFamily:
    return ControlFamily(
        limit=build_control(config.control, model),
        indices=tuple(config.stability.indices),
    )


def build_reward(spec: RewardSpec) -> RewardFunction:
    if spec.kind == "constant":
        return RewardFunction.constant(spec.value)
    if spec.kind == "coordinate":
        return RewardFunction.coordinate(spec.index, bound=spec.bound)
    if spec.kind == "quadratic":
        return RewardFunction.quadratic(
            center=spec.center,
            scale=spec.scale,
            control_weight=spec.control_weight,
        )
    return RewardFunction.table(spec.values)


def build_weight(spec: WeightSpec, space: StateSpace) -> LyapunovWeight:
    if spec.kind == "constant":
        return LyapunovWeight.constant(space.n)
    if spec.kind == "quadratic":
        points = space.points()
        return LyapunovWeight(values=1.0 + spec.scale * (points**2).sum(axis=1))
    if len(spec.values) != space.n:
        raise ConfigError("weight table does not match the state space")
    return LyapunovWeight(values=spec.values)


def require_grid(grid: StateSpace | None, model) -> StateSpace:
    if grid is None:
        logger.error(f"Model {model.name} needs a grid for a finite kernel")
        raise ConfigError(f"model {model.name} needs a grid section")
    return grid


def build_kernel_family(
    config: ExperimentConfig,
    model,
    control: MarkovControl,
    grid: StateSpace | None,
    reward: RewardFunction | None = None,
    threads: int = 1,
) -> KernelFamily:
    """
    Unit-time kernels for every configured level, plus the proxy limit at
    audit.limit_level when it is set.

    Chains get their exact kernels; SDE models get grid kernels from one
    batch of unit blocks per level, all sharing the finest noise. The
    blocks are kept, with reward sums when a reward is given.
    """
    levels = list(config.levels)
    limit_level = config.audit.limit_level
    top = max(levels + ([limit_level] if limit_level is not None else []))

    def level(m: int) -> DiscretizationLevel:
        return DiscretizationLevel(m=m, inner_substeps=config.inner_substeps)

    if isinstance(model, ChainModel):
        kernels = {m: unit_kernel(model, control, level(m)) for m in levels}
        substeps = {m: substep_kernel(model, control, level(m)) for m in levels}
        limit = limit_substep = None
        if limit_level is not None:
            limit = unit_kernel(model, control, level(limit_level))
            limit_substep = substep_kernel(model, control, level(limit_level))
        return KernelFamily(
            kernels=kernels,
            limit=limit,
            substeps=substeps,
            limit_substep=limit_substep,
            limit_level=limit_level,
        )

    grid = require_grid(grid, model)

    def sample(m: int):
        return sample_unit_blocks(
            model,
            control,
            grid,
            level(m),
            config.samples_per_state,
            config.seed,
            reward=reward,
            noise_level=top,
            threads=threads,
        )

    blocks = {m: sample(m) for m in levels}
    limit_blocks = sample(limit_level) if limit_level is not None else None
    return KernelFamily(
        kernels={m: b.kernel() for m, b in blocks.items()},
        limit=limit_blocks.kernel() if limit_blocks is not None else None,
        blocks=blocks,
        limit_blocks=limit_blocks,
        limit_level=limit_level,
    )
