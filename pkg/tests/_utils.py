import json
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional
from unittest.mock import Mock

import numpy as np
import pytest
import yaml

from mmaml.config import TrainingConfig
from mmaml.tasks import FunctionMode, RngStream, TaskSample, realize_task, sample_task

__all__ = ("send_request_", "tiny_config", "numeric_grad", "make_task", "make_tiny_config",
           "write_config", "read_jsonl",)


@pytest.fixture()
def send_request_() -> Mock:
    response = 200, {}
    return Mock(return_value=response)


def make_tiny_config(**changes: Any) -> TrainingConfig:
    # 1-2-1 task network, small encoder; every meta-step takes milliseconds
    defaults: Dict[str, Any] = dict(
        hidden_sizes=(2,),
        encoder_hidden=3,
        encoder_input=4,
        generator_hidden=3,
        meta_batch_size=3,
        iterations=3,
        checkpoint_every=0,
        log_every=1,
        seed=7,
    )
    defaults.update(changes)
    return TrainingConfig(**defaults)


@pytest.fixture()
def tiny_config() -> TrainingConfig:
    return make_tiny_config()


def make_task(mode: FunctionMode = FunctionMode.SINUSOIDAL, seed: int = 0, *,
              K: int = 5, L: int = 10, noise_sigma: float = 0.3) -> TaskSample:
    rng = RngStream(seed)
    return realize_task(sample_task((mode,), rng), K, L, noise_sigma, rng)


def numeric_grad(fn: Callable[[np.ndarray], float], value: np.ndarray,
                 eps: float = 1e-6) -> np.ndarray:
    # central differences, one entry at a time
    value = np.array(value, dtype=np.float64)
    estimate = np.zeros_like(value)
    for index in np.ndindex(value.shape):
        upper, lower = value.copy(), value.copy()
        upper[index] += eps
        lower[index] -= eps
        estimate[index] = (fn(upper) - fn(lower)) / (2 * eps)
    return estimate


def write_config(path: Path, raw: Optional[Dict[str, Any]] = None) -> Path:
    path.write_text(yaml.safe_dump(raw or {}), encoding="utf-8")
    return path


def read_jsonl(path: Path) -> List[Dict[str, Any]]:
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]
