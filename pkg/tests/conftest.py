from pathlib import Path
import sys

SRC_PATH = Path(__file__).resolve().parents[1] / "src"
if str(SRC_PATH) not in sys.path:
    sys.path.append(str(SRC_PATH))

import numpy as np
import pytest

from fixtures import DEFAULT_HARDWARE, dataset_for, resolve_network
from utils.cost import HardwareConfig, load_hardware_config
from utils.model import NetworkSpec, load_network_spec


@pytest.fixture
def tiny2x2() -> NetworkSpec:
    return load_network_spec(resolve_network("tiny2x2"))


@pytest.fixture
def tiny4x4() -> NetworkSpec:
    return load_network_spec(resolve_network("tiny4x4"))


@pytest.fixture
def toy_classifier() -> NetworkSpec:
    return load_network_spec(resolve_network("toy_classifier"))


@pytest.fixture
def toy_dataset_path() -> Path:
    return dataset_for("toy_classifier")


@pytest.fixture
def hw() -> HardwareConfig:
    return load_hardware_config(DEFAULT_HARDWARE)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
