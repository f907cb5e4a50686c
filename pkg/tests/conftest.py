"""Shared fixtures for the pyLoRAOver tests."""

import logging

import numpy as np
import pytest

from pyLoRAOver.config import LoraConfig, RunConfig, TaskConfig, TrainConfig
from pyLoRAOver.log_utils import set_debug_trace
from pyLoRAOver.model import AdapterModel
from pyLoRAOver.task import SyntheticTask


@pytest.fixture(autouse=True)
def package_logger():
    """The CLI reconfigures the package logger; give every test a propagating one"""
    yield
    logger = logging.getLogger('LoRAOver')
    for handler in logger.handlers:
        handler.close()
    logger.handlers.clear()
    logger.setLevel(logging.NOTSET)
    logger.propagate = True
    set_debug_trace(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_task():
    """Two blocks of width 8, small enough for finite differences"""
    return SyntheticTask(TaskConfig(layers=2, hidden=8, n_train=128, n_eval=64, calib_batches=2), seed=3)


@pytest.fixture
def small_model(small_task, rng):
    """Adapter model whose B halves are non-zero, so every slot matters"""
    model = AdapterModel(small_task, LoraConfig(rank=2, alpha=4.0, seed=3))
    for slot in model.slots.filter(half='B'):
        slot.set_dense(0.3 * rng.normal(size=slot.shape))
    return model


def small_config(strategy='lora', seed=0, steps=20, **selection):
    """Run configuration of a seconds-scale training run"""
    config = RunConfig(strategy=strategy, seed=seed,
                       task=TaskConfig(layers=2, hidden=8, n_train=256, n_eval=64, calib_batches=2),
                       lora=LoraConfig(rank=2, alpha=2.0),
                       train=TrainConfig(steps=steps, batch_size=16, lr=0.02, eval_every=5))
    for key, value in selection.items():
        setattr(config.selection, key, value)
    config.selection.check()
    return config.resolve()


@pytest.fixture
def make_config():
    return small_config
