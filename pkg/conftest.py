import os
from pathlib import Path

import hypothesis
import numpy as np
import pytest

from longrun.dependencies import (
    build_control,
    build_model,
    build_reward,
    load_config,
)
from longrun.models.markov import StateSpace

np.seterr(all="warn")

hypothesis.settings.register_profile("default", max_examples=100, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.register_profile(
    "thorough", max_examples=1000, deadline=None
)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

CONFIG_DIR = Path(__file__).resolve().parent / "configs"


@pytest.fixture(scope="session")
def reflected_bm_case():
    """
    Model, control and reward of configs/reflected_bm_grid.yaml on a
    coarser grid with fewer samples per state.
    """
    config = load_config(CONFIG_DIR / "reflected_bm_grid.yaml")
    model = build_model(config.model)
    return {
        "config": config,
        "model": model,
        "control": build_control(config.control, model),
        "reward": build_reward(config.reward),
        "grid": StateSpace.grid(np.linspace(0.0, 1.0, 51)),
        "samples_per_state": 1000,
    }
