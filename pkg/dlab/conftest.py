# Pytest configuration shared by the dlab test suite.
#
# Acceptance-scale training runs are marked ``slow`` and only run with
# ``--run-slow``, the same way remote-data tests are opt-in.
import numpy as np
import pytest
import torch


def pytest_addoption(parser):
    parser.addoption('--run-slow', action='store_true', default=False,
                     help='also run the slow acceptance tests')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: long training runs, enable with --run-slow')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--run-slow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --run-slow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def seeded():
    np.random.seed(42)
    torch.manual_seed(42)


@pytest.fixture(scope='session')
def sprites():
    from .data import generate_dataset
    from .tests.helpers import SMALL_SIZE
    return generate_dataset(8, SMALL_SIZE, SMALL_SIZE, seed=3)
