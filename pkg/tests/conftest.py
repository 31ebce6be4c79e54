"""
Pytest Configuration and Shared Fixtures

This file contains pytest configuration and fixtures shared across all test modules.
"""

import pytest
import os
import sys
from pathlib import Path

import numpy as np

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from task_aware_moe.config import ExperimentConfig
from task_aware_moe.moe_layer import MoEConfig
from task_aware_moe.transformer import ModelConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run the slow training-direction checks")


def pytest_configure(config):
    """Configure pytest with custom markers"""
    config.addinivalue_line("markers", "unit: Unit tests")
    config.addinivalue_line("markers", "integration: Integration tests")
    config.addinivalue_line("markers", "e2e: End-to-end tests")
    config.addinivalue_line("markers", "performance: Performance tests")
    config.addinivalue_line("markers", "slow: Slow running tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    """Seeded generator so every test is reproducible"""
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model_cfg():
    """Small enough for finite differences and a few training steps"""
    return ModelConfig(vocab_size=36, max_len=32, d_model=16, d_hidden=24, n_layers=2, n_heads=2, init_std=0.1)


@pytest.fixture
def moe_cfg():
    return MoEConfig(experts_per_group=2, shared_experts=1, top_k=1)


@pytest.fixture
def tiny_experiment_cfg(tmp_path):
    """An ExperimentConfig that trains in seconds"""
    return ExperimentConfig.from_strings({
        "seed": "0",
        "out_dir": str(tmp_path / "run"),
        "model.d_model": "8",
        "model.d_hidden": "8",
        "model.n_layers": "1",
        "model.n_heads": "1",
        "model.max_len": "16",
        "task.min_len": "3",
        "task.max_len": "5",
        "task.train_size": "16",
        "task.val_size": "8",
        "stage1.steps": "3",
        "stage1.batch_size": "4",
        "stage2.steps": "3",
        "stage2.batch_size": "4",
        "eval.samples": "8",
        "expert_load.samples": "4",
        "lora.rank": "2",
    })


@pytest.fixture
def test_env_vars():
    """Set up test environment variables"""
    test_vars = {
        'LOG_LEVEL': 'ERROR',  # Reduce log noise during tests
        'MAX_LOG_SIZE_MB': '1',
        'LOG_BACKUP_COUNT': '2',
    }

    # Save original values
    original_values = {}
    for key, value in test_vars.items():
        original_values[key] = os.environ.get(key)
        os.environ[key] = value

    yield test_vars

    # Restore original values
    for key, value in original_values.items():
        if value is None:
            os.environ.pop(key, None)
        else:
            os.environ[key] = value
