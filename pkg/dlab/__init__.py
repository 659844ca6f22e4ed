# Licensed under a 3-clause BSD style license - see LICENSE.rst

"""
Unsupervised disentanglement of shape and appearance in images of people.
"""
from astropy import config as _config

__all__ = ['__version__', 'conf', 'test']

try:
    from .version import version as __version__
except ImportError:
    __version__ = ''


class Conf(_config.ConfigNamespace):
    """
    Runtime settings for `dlab`.
    """
    device = _config.ConfigItem(
        'cpu', 'Torch device used for training and inference.')
    deterministic = _config.ConfigItem(
        True, 'Request deterministic torch kernels during training.')
    log_every = _config.ConfigItem(
        100, 'Iterations between progress messages in the training log.')


conf = Conf()


def test(args=None, verbose=False, run_slow=False):
    """
    Run the package tests with `pytest.main`.

    Parameters
    ----------
    args : list of str, optional
        Extra arguments passed to pytest
    verbose : bool, optional
        Same as passing ``-v``
    run_slow : bool, optional
        Also run the acceptance-scale tests marked ``slow``

    Returns
    -------
    exit_code : int
    """
    import os
    import pytest
    arguments = [os.path.dirname(os.path.abspath(__file__))] + list(args or [])
    if verbose:
        arguments.append('-v')
    if run_slow:
        arguments.append('--run-slow')
    return pytest.main(arguments)


from .core import (ModelConfig, TrainConfig, load_config, preset,  # noqa: E402
                   ConfigError, DatasetError, CheckpointError, NonFiniteLossError)
