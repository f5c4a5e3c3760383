import pathlib
import sys

import pytest

_test_dir = pathlib.Path(__file__).resolve().parent
_root_dir = _test_dir.parent
_package_dir = _root_dir / 'multiscale_anomaly'
sys.path.append(str(_root_dir))

from multiscale_anomaly import Config
from multiscale_anomaly import Instance
from multiscale_anomaly import Label
from multiscale_anomaly import ModelParameters
from multiscale_anomaly import generate_synthetic


@pytest.fixture(scope="session")
def smoke_config():
    """Small widths for a 30-ID, 3-attribute stream."""
    return Config.default.for_smoke_testing().with_values(dimension=30,
                                                          attribute_count=3)


@pytest.fixture(scope="session")
def tiny_stream():
    return generate_synthetic(n_periods=2, period=50, seed=1)


@pytest.fixture
def tiny_model(smoke_config):
    return ModelParameters.initialize(smoke_config.with_values(
        init_scale=0.3))


@pytest.fixture
def toy_instances():
    return [
        Instance([[1, 2], [3], [4, 5, 6]], Label.NORMAL, 0),
        Instance([[7], [], [8, 8]], Label.ANOMALOUS, 1),
        Instance([[9], [10], [11]], Label.NORMAL, 2),
    ]
