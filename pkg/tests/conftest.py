"""Shared fixtures."""

from pathlib import Path

import numpy as np
import pytest

from src.config.settings import build_experiment_config

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture
def hetrec_dir() -> Path:
    return FIXTURES / "hetrec_toy"


@pytest.fixture
def small_config(tmp_path):
    """A seconds-scale synthetic experiment writing into tmp_path."""
    def make(**overrides):
        data = {
            "rounds": 60,
            "validation_prefix": 20,
            "seeds": [0, 1],
            "output_dir": str(tmp_path / "out"),
            "environment": {"n": 8, "d": 3, "candidates": 5, "graph": "kronecker", "sparsity": 0.3},
            "policies": [{"kind": "G-TS"}, {"kind": "TS-IND"}],
        }
        for key, value in overrides.items():
            if isinstance(value, dict) and isinstance(data.get(key), dict):
                data[key] = {**data[key], **value}
            else:
                data[key] = value
        return build_experiment_config(data)
    return make
