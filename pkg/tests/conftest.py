from pathlib import Path

import numpy as np
import pytest
import torch

from servtime._types import ArrivalEvent, QueueTrace
from servtime.core import config as config_module
from servtime.core.config import Config
from servtime.data.eventlog import make_trace
from servtime.sim.datasets import SyntheticSpec, make_dataset


@pytest.fixture
def mock_config(tmp_path: Path, monkeypatch: pytest.MonkeyPatch):
    # fixture to create a Config instance that uses a temp dir
    temp_config_dir = tmp_path / "servtime"
    temp_config_file = temp_config_dir / "config.toml"

    # monkeypatch constants in the config module
    monkeypatch.setattr(config_module, "CONFIG_DIR", temp_config_dir)
    monkeypatch.setattr(config_module, "CONFIG_FILE", temp_config_file)

    # the lru_cache on get_config needs to be cleared so that it doesn't
    # return a cached instance that was created before our patch was applied.
    config_module.get_config.cache_clear()

    # this will now create a Config instance using the tmp_path
    return Config()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def torch_gen() -> torch.Generator:
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def small_trace() -> QueueTrace:
    # five events, the last one still in service at the horizon
    events = [
        ArrivalEvent(0.5, 1.5, (1.0,)),
        ArrivalEvent(1.0, 1.25, (2.0,)),
        ArrivalEvent(2.0, 4.0, (0.0,)),
        ArrivalEvent(3.5, 4.5, (1.0,)),
        ArrivalEvent(5.0, None, (3.0,)),
    ]
    return make_trace(events, 6.0)


@pytest.fixture
def hpt_trace() -> QueueTrace:
    return make_dataset("h-pt", SyntheticSpec(), 60.0, seed=7)


@pytest.fixture
def event_csv(tmp_path: Path) -> Path:
    path = tmp_path / "events.csv"
    path.write_text(
        "arrival_time,departure_time,cov_0\n"
        "1.0,2.0,0.5\n"
        "0.5,,1.5\n"
        "2.5,3.0,-1.0\n",
        encoding="utf-8",
    )
    return path
