'''Frozen feature network used by the perceptual reconstruction loss.

The default extractor is a fixed random stack of stride-2 convolutions;
externally converted weights can be imported from a checkpoint container
with a ``perceptual`` section.
'''
import dataclasses

import torch
from torch import nn

from .checkpoint import read_container
from .core import CheckpointError
from .networks import make_activation, reset_parameters

SECTION = 'perceptual'


@dataclasses.dataclass
class FeaturePyramid:
    '''Tapped features (``batch x h_k x w_k x c_k`` each) and their weights'''
    features: list
    layer_weights: list

    def __post_init__(self):
        if len(self.features) < 1:
            raise ValueError('a feature pyramid needs at least one layer')
        if len(self.features) != len(self.layer_weights):
            raise ValueError('{0} feature layers but {1} layer weights'.format(
                len(self.features), len(self.layer_weights)))


class FeatureExtractor(nn.Module):
    '''``num_layers`` stride-2 conv stages, each one tapped'''

    def __init__(self, num_layers=3, base_channels=16, activation='leaky_relu'):
        super().__init__()
        channels = [3] + [base_channels * 2 ** k for k in range(num_layers)]
        self.stages = nn.ModuleList()
        for k in range(num_layers):
            self.stages.append(nn.Sequential(
                nn.Conv2d(channels[k], channels[k + 1], 3, stride=2, padding=1),
                make_activation(activation),
            ))

    def forward(self, x):
        taps = []
        for stage in self.stages:
            x = stage(x)
            taps.append(x)
        return taps

    def freeze(self):
        for parameter in self.parameters():
            parameter.requires_grad_(False)
        return self.eval()


def make_extractor(seed, source='fixed_random', num_layers=3, base_channels=16,
                   activation='leaky_relu', weights_path=None):
    '''Build the frozen feature extractor.

    Parameters
    ----------
    seed : int
        Seed of the random filters
    source : {'fixed_random', 'imported'}
        ``imported`` loads the ``perceptual`` section of ``weights_path``
    num_layers, base_channels : int, optional
        Depth K and width of the first stage
    activation : str, optional
        As in :class:`~dlab.core.ModelConfig`
    weights_path : str, optional
        Checkpoint container holding the imported weights

    Returns
    -------
    extractor : :class:`FeatureExtractor`

    Raises
    ------
    CheckpointError if an imported layer has the wrong shape or is missing
    '''
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        extractor = FeatureExtractor(num_layers, base_channels, activation)
        extractor.apply(reset_parameters)
    if source == 'imported':
        if weights_path is None:
            raise CheckpointError('imported extractor requested without a weight file')
        sections = read_container(weights_path)
        if SECTION not in sections:
            raise CheckpointError('{0} has no {1!r} section'.format(weights_path, SECTION))
        load_arrays(extractor, sections[SECTION].arrays)
    elif source != 'fixed_random':
        raise ValueError('unknown extractor source {0!r}'.format(source))
    return extractor.freeze()


def load_arrays(module, arrays, section=SECTION):
    '''Copy named arrays into a module, checking every layer shape.

    Raises
    ------
    CheckpointError naming ``section`` and the layer that is missing or
    has the wrong shape
    '''
    state = module.state_dict()
    for name, tensor in state.items():
        if name not in arrays:
            raise CheckpointError('{0} layer {1!r} is missing'.format(section, name))
        value = arrays[name]
        if tuple(value.shape) != tuple(tensor.shape):
            raise CheckpointError('{0} layer {1!r} has shape {2}, expected {3}'.format(
                section, name, tuple(value.shape), tuple(tensor.shape)))
        state[name] = torch.as_tensor(value.copy(), dtype=tensor.dtype)
    module.load_state_dict(state)
    return module


def extract_features(images, extractor, layer_weights=None):
    '''Forward pass of the frozen extractor on a ``batch x H x W x 3`` batch.

    Parameters
    ----------
    images : torch.Tensor
    extractor : :class:`FeatureExtractor`
    layer_weights : sequence of float, optional
        Per-layer weights; when empty each layer k gets ``1 / (c_k h_k w_k)``

    Returns
    -------
    pyramid : :class:`FeaturePyramid`
    '''
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ValueError('expected batch x height x width x 3 images, got {0}'.format(
            tuple(images.shape)))
    taps = extractor(images.permute(0, 3, 1, 2))
    if layer_weights:
        weights = [float(w) for w in layer_weights]
    else:
        weights = [1.0 / tap[0].numel() for tap in taps]
    return FeaturePyramid([tap.permute(0, 2, 3, 1) for tap in taps], weights)
