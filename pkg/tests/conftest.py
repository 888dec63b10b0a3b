"""Shared fixtures: a small generated dataset reused across test modules."""

import numpy as np
import pytest

from handtraj.config import ModelConfig, toy_config
from handtraj.synthbench import GenConfig, generate_dataset, load_dataset


TINY_GEN = GenConfig(counts=(24, 4, 12), seed=11)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """(path, header, scenarios) for a 40-scenario dataset, generated once."""
    path = tmp_path_factory.mktemp("data") / "tiny.jsonl"
    generate_dataset(TINY_GEN, path)
    header, scenarios = load_dataset(path)
    return path, header, scenarios


@pytest.fixture(scope="session")
def tiny_config() -> ModelConfig:
    """Model config matching the tiny dataset layout, sized for speed."""
    return toy_config(d_model=16, d_sem=8, d_motion=8, d_state=4, n_blocks=2,
                      s_total=40, respacing=5, epochs=2, batch_size=8, seed=3)


def rng_for(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)
