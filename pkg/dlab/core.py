'''Configuration schema, validation and the exception types shared by the
rest of the package.

Image-like values are plain :class:`torch.Tensor` objects with a fixed
layout:

* ``ImageBatch`` -- ``batch x height x width x 3``, values in [-1, 1]
* ``MaskSet`` -- ``batch x num_masks x mask_height x mask_width``, values in [0, 1]
* ``AppearanceFeatureSet`` -- ``batch x num_masks x appearance_dim``
* ``FilteredImageSet`` -- ``batch x num_masks x height x width x 3``
* ``ClassifierScore`` -- ``batch``
'''
import configparser
import dataclasses
import os
import warnings

import numpy as np
import torch


class DlabWarning(UserWarning):
    '''Recoverable problem, e.g. an unreadable image that was skipped'''


class ConfigError(ValueError):
    '''Raised for unknown keys, unparsable values and invariant violations'''


class BatchError(ValueError):
    '''Raised when an image batch does not match the configuration'''


class DatasetError(ValueError):
    '''Raised for datasets that are too small or badly laid out'''


class CheckpointError(ValueError):
    '''Raised for unreadable, corrupt or incompatible checkpoint files'''


class FingerprintError(CheckpointError):
    '''Raised when parameters were built for a different architecture'''


class NonFiniteLossError(FloatingPointError):
    '''Raised when a training step produces a non-finite loss'''


MASK_ACTIVATIONS = ('sigmoid', 'softmax_over_masks')
ADV_LOSS_MODES = ('literal_eq3', 'corrected_eq3')
COLOR_STAT_NORMALIZERS = ('total_pixels', 'mask_mass')
ACTIVATIONS = ('leaky_relu', 'silu')
PERCEPTUAL_SOURCES = ('fixed_random', 'imported')
ABLATIONS = ('base', 'base_disentangle', 'full')
UPDATE_ORDERS = ('classifier_first', 'generator_first')


def _require(condition, key, value, message):
    if not condition:
        raise ConfigError('{0} {1} (got {0} = {2!r})'.format(key, message, value))


def _require_choice(key, value, choices):
    _require(value in choices, key, value,
             'must be one of {0}'.format(', '.join(choices)))


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    '''Shapes and switches that define the network architecture.

    The fields that change the parameter layout also define the
    architecture fingerprint, see :func:`dlab.networks.fingerprint`.
    '''
    image_height: int = 64
    image_width: int = 64
    num_masks: int = 14
    appearance_dim: int = 32
    downsample_factor: int = 4
    decoder_fuse_channels: int = 128
    mask_activation: str = 'sigmoid'
    adv_loss_mode: str = 'corrected_eq3'
    color_stat_normalizer: str = 'total_pixels'
    base_channels: int = 32
    activation: str = 'leaky_relu'
    perceptual_layers: int = 3
    perceptual_channels: int = 16
    perceptual_source: str = 'fixed_random'
    color_stats_per_channel: bool = False

    def __post_init__(self):
        factor = self.downsample_factor
        _require(factor in (1, 2, 4, 8, 16), 'downsample_factor', factor,
                 'must be a power of two no larger than 16')
        for key in ('image_height', 'image_width'):
            value = getattr(self, key)
            _require(value >= 1, key, value, 'must be positive')
            _require(value % factor == 0, key, value,
                     'must be divisible by downsample_factor ({0})'.format(factor))
        for key in ('num_masks', 'appearance_dim', 'decoder_fuse_channels',
                    'base_channels', 'perceptual_layers', 'perceptual_channels'):
            value = getattr(self, key)
            _require(value >= 1, key, value, 'must be >= 1')
        _require(self.base_channels % 2 == 0, 'base_channels', self.base_channels,
                 'must be even')
        _require_choice('mask_activation', self.mask_activation, MASK_ACTIVATIONS)
        _require_choice('adv_loss_mode', self.adv_loss_mode, ADV_LOSS_MODES)
        _require_choice('color_stat_normalizer', self.color_stat_normalizer,
                        COLOR_STAT_NORMALIZERS)
        _require_choice('activation', self.activation, ACTIVATIONS)
        _require_choice('perceptual_source', self.perceptual_source,
                        PERCEPTUAL_SOURCES)
        smallest = min(self.image_height, self.image_width)
        _require(smallest >> self.perceptual_layers >= 1, 'perceptual_layers',
                 self.perceptual_layers, 'is too deep for the image size')

    @property
    def mask_height(self):
        return self.image_height // self.downsample_factor

    @property
    def mask_width(self):
        return self.image_width // self.downsample_factor


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    '''Optimisation settings. Defaults give the full-scale training setup.'''
    lambda_recon: float = 0.01
    lambda_adv: float = 1.0
    lambda_color: float = 1.0
    base_lr: float = 1e-4
    shape_encoder_lr_factor: float = 0.1
    lr_decay_rate: float = 0.05
    lr_decay_every: int = 2500
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    batch_size: int = 12
    total_iters: int = 5000
    seed: int = 0
    ablation: str = 'full'
    checkpoint_every: int = 1000
    update_order: str = 'classifier_first'
    grad_clip_norm: float = 0.0
    freeze_shape_encoder: bool = False
    prior_iters: int = 500
    perceptual_layer_weights: tuple = ()

    def __post_init__(self):
        for key in ('lambda_recon', 'lambda_adv', 'lambda_color', 'grad_clip_norm'):
            value = getattr(self, key)
            _require(value >= 0, key, value, 'must be >= 0')
        for key in ('base_lr', 'shape_encoder_lr_factor'):
            value = getattr(self, key)
            _require(value > 0, key, value, 'must be > 0')
        _require(0 <= self.lr_decay_rate < 1, 'lr_decay_rate', self.lr_decay_rate,
                 'must lie in [0, 1)')
        _require(self.lr_decay_every >= 1, 'lr_decay_every', self.lr_decay_every,
                 'must be >= 1')
        for key in ('adam_beta1', 'adam_beta2'):
            value = getattr(self, key)
            _require(0 <= value < 1, key, value, 'must lie in [0, 1)')
        _require(self.batch_size >= 2, 'batch_size', self.batch_size, 'must be ≥ 2')
        for key in ('total_iters', 'prior_iters'):
            value = getattr(self, key)
            _require(value >= 0, key, value, 'must be >= 0')
        _require(self.checkpoint_every >= 1, 'checkpoint_every',
                 self.checkpoint_every, 'must be >= 1')
        _require_choice('ablation', self.ablation, ABLATIONS)
        _require_choice('update_order', self.update_order, UPDATE_ORDERS)
        for weight in self.perceptual_layer_weights:
            _require(weight >= 0, 'perceptual_layer_weights',
                     self.perceptual_layer_weights, 'must all be >= 0')

    @property
    def init_mode(self):
        '''Parameter initialisation implied by the ablation preset'''
        return 'shape_prior' if self.ablation == 'full' else 'random'


def check_compatible(model_config, train_config):
    '''Checks that span both configs.

    Raises
    ------
    ConfigError if ``perceptual_layer_weights`` is given but does not have
    one entry per perceptual layer
    '''
    weights = train_config.perceptual_layer_weights
    layers = model_config.perceptual_layers
    _require(not weights or len(weights) == layers, 'perceptual_layer_weights', weights,
             'needs one weight per perceptual layer ({0})'.format(layers))


PRESETS = {
    'desk': ({'image_height': 64, 'image_width': 64, 'base_channels': 16,
              'decoder_fuse_channels': 64},
             {'batch_size': 8, 'total_iters': 5000}),
    'paper': ({'image_height': 256, 'image_width': 256},
              {'batch_size': 12, 'total_iters': 100000}),
}


def preset(name):
    '''Return the ``(ModelConfig, TrainConfig)`` pair for a named preset.

    Parameters
    ----------
    name : str
        ``'desk'`` for the small CPU-friendly setup or ``'paper'`` for the
        full-scale 256x256 setup with batch 12.

    Returns
    -------
    model_config, train_config : ModelConfig, TrainConfig

    Raises
    ------
    ConfigError if the preset is unknown
    '''
    try:
        model_values, train_values = PRESETS[name]
    except KeyError:
        raise ConfigError('unknown preset {0!r}, choose from {1}'.format(
            name, ', '.join(sorted(PRESETS))))
    return ModelConfig(**model_values), TrainConfig(**train_values)


def _field_types():
    types = {}
    for cls in (ModelConfig, TrainConfig):
        for field in dataclasses.fields(cls):
            types[field.name] = (cls, field.type)
    return types


_FIELDS = _field_types()


def _parse_value(key, text, kind):
    text = text.strip()
    try:
        if kind in (bool, 'bool'):
            lowered = text.lower()
            if lowered in ('1', 'true', 'yes', 'on'):
                return True
            if lowered in ('0', 'false', 'no', 'off'):
                return False
            raise ValueError(text)
        if kind in (int, 'int'):
            return int(text)
        if kind in (float, 'float'):
            return float(text)
        if kind in (tuple, 'tuple'):
            return tuple(float(part) for part in text.split(',') if part.strip())
    except ValueError:
        raise ConfigError('{0} has an unparsable value {1!r}'.format(key, text))
    return text


def _format_value(value):
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ', '.join(repr(float(v)) for v in value)
    return str(value)


def _merge(model_config, train_config, values):
    model_values, train_values = {}, {}
    for key, text in values:
        try:
            cls, kind = _FIELDS[key]
        except KeyError:
            raise ConfigError('unknown key {0!r} (value {1!r})'.format(key, text))
        value = _parse_value(key, text, kind)
        if cls is ModelConfig:
            model_values[key] = value
        else:
            train_values[key] = value
    model_config = dataclasses.replace(model_config, **model_values)
    train_config = dataclasses.replace(train_config, **train_values)
    check_compatible(model_config, train_config)
    return model_config, train_config


def parse_config(text, base=None):
    '''Parse configuration text on top of ``base`` (defaults if ``None``).

    The text is a flat list of ``key = value`` lines with ``#`` comments.
    '''
    parser = configparser.ConfigParser(interpolation=None,
                                       comment_prefixes=('#',),
                                       inline_comment_prefixes=('#',))
    parser.optionxform = str
    try:
        parser.read_string('[dlab]\n' + text)
    except configparser.Error as err:
        raise ConfigError('could not parse configuration: {0}'.format(err))
    model_config, train_config = base or (ModelConfig(), TrainConfig())
    return _merge(model_config, train_config, parser.items('dlab'))


def load_config(path, preset_name=None, overrides=()):
    '''Load and validate a configuration file.

    Parameters
    ----------
    path : str
        Flat ``key = value`` file. Unspecified keys take their defaults.
    preset_name : str, optional
        Preset applied before the file is read.
    overrides : sequence of str, optional
        ``key=value`` strings applied after the file.

    Returns
    -------
    model_config, train_config : ModelConfig, TrainConfig

    Raises
    ------
    ConfigError for a missing file, an unknown key or an invalid value
    '''
    if not os.path.isfile(path):
        raise ConfigError('configuration file {0!r} does not exist'.format(path))
    with open(path, encoding='utf-8') as infile:
        text = infile.read()
    base = preset(preset_name) if preset_name else None
    configs = parse_config(text, base=base)
    return apply_overrides(*configs, overrides)


def apply_overrides(model_config, train_config, overrides):
    '''Apply ``key=value`` strings, e.g. from repeated ``--set`` flags'''
    values = []
    for item in overrides:
        key, sep, value = item.partition('=')
        if not sep:
            raise ConfigError('override {0!r} is not of the form key=value'.format(item))
        values.append((key.strip(), value))
    return _merge(model_config, train_config, values)


def dump_config(model_config, train_config):
    '''Serialise both configs to the flat ``key = value`` format'''
    lines = ['# model']
    for field in dataclasses.fields(model_config):
        lines.append('{0} = {1}'.format(
            field.name, _format_value(getattr(model_config, field.name))))
    lines.append('# training')
    for field in dataclasses.fields(train_config):
        lines.append('{0} = {1}'.format(
            field.name, _format_value(getattr(train_config, field.name))))
    return '\n'.join(lines) + '\n'


def effective_train_config(train_config):
    '''The ``base`` ablation trains on the reconstruction loss only'''
    if train_config.ablation == 'base':
        return dataclasses.replace(train_config, lambda_adv=0.0, lambda_color=0.0)
    return train_config


def validate_batch(images, config):
    '''Check an image batch against the configuration.

    Parameters
    ----------
    images : torch.Tensor or numpy.ndarray
        ``batch x height x width x 3`` array.
    config : ModelConfig

    Returns
    -------
    None

    Raises
    ------
    BatchError if the layout, the values range or finiteness is wrong
    '''
    data = images.detach().cpu().numpy() if torch.is_tensor(images) else np.asarray(images)
    if data.ndim != 4 or data.shape[-1] != 3:
        raise BatchError('expected a batch x height x width x 3 array, '
                         'got shape {0}'.format(data.shape))
    expected = (config.image_height, config.image_width)
    if data.shape[1:3] != expected:
        raise BatchError('image size {0}x{1} does not match the configured '
                         '{2}x{3}'.format(data.shape[1], data.shape[2], *expected))
    if not np.all(np.isfinite(data)):
        raise BatchError('batch contains non-finite values')
    if data.size and (data.min() < -1 or data.max() > 1):
        raise BatchError('batch values must lie in [-1, 1], found range '
                         '[{0:.4g}, {1:.4g}]'.format(data.min(), data.max()))


def warn(message):
    warnings.warn(message, DlabWarning, stacklevel=2)
