"""Shared fixtures and test-support path setup."""

import sys
from dataclasses import dataclass
from pathlib import Path

import pytest

TESTS_DIR = Path(__file__).parent
REPO_ROOT = TESTS_DIR.parent

# Make tests/support importable as a plain package from any test module.
if str(TESTS_DIR) not in sys.path:
    sys.path.insert(0, str(TESTS_DIR))


@dataclass(frozen=True)
class ReferenceRun:
    """Trained reference pipeline shared across acceptance tests."""

    config: object
    params: object
    losses: list
    train_ds: list
    eval_ds: list


@pytest.fixture(scope="session")
def reference_run():
    """Train the reference model once per session (about five minutes)."""
    from visflow import harness

    config = harness.load_config(REPO_ROOT / "configs" / "reference.json")
    train_ds, eval_ds = harness.make_datasets(config)
    params, losses = harness.run_training(config, train_ds)
    return ReferenceRun(config=config, params=params, losses=losses,
                        train_ds=train_ds, eval_ds=eval_ds)
