'''The four parametric functions of the model -- shape encoder, appearance
encoder, image decoder and feature classifier -- and the mask
resize/filter mechanics that connect them.

All public functions take and return the channels-last layouts documented
in :mod:`dlab.core`; the convolution stacks work channels-first internally.
'''
import contextlib
import hashlib
import json
import math

import numpy as np
import torch
import torch.nn.functional as F
from astropy import log
from torch import nn

from .core import DatasetError, FingerprintError

LAYOUT_FIELDS = ('image_height', 'image_width', 'num_masks', 'appearance_dim',
                 'downsample_factor', 'decoder_fuse_channels', 'base_channels')


def fingerprint(config):
    '''Hash of the ModelConfig fields that shape the parameter layout'''
    fields = {name: getattr(config, name) for name in LAYOUT_FIELDS}
    text = json.dumps(fields, sort_keys=True)
    return hashlib.sha256(text.encode('utf-8')).hexdigest()[:16]


def make_activation(name):
    if name == 'silu':
        return nn.SiLU()
    return nn.LeakyReLU(0.2)


def _conv_out(size, stride):
    # 3x3 kernel, padding 1
    return (size - 1) // stride + 1


class ShapeEncoder(nn.Module):
    '''Four 3x3 conv blocks emitting ``num_masks`` masks in [0, 1].

    The first ``log2(downsample_factor)`` blocks have stride 2.
    '''

    def __init__(self, config):
        super().__init__()
        width = config.base_channels
        channels = [3, width, 2 * width, 4 * width, config.num_masks]
        n_down = int(math.log2(config.downsample_factor))
        layers = []
        for index in range(4):
            stride = 2 if index < n_down else 1
            layers.append(nn.Conv2d(channels[index], channels[index + 1], 3,
                                    stride=stride, padding=1))
            if index < 3:
                layers.append(make_activation(config.activation))
        self.body = nn.Sequential(*layers)
        self.mask_activation = config.mask_activation

    def forward(self, x):
        logits = self.body(x)
        if self.mask_activation == 'softmax_over_masks':
            return torch.softmax(logits, dim=1)
        return torch.sigmoid(logits)


class AppearanceEncoder(nn.Module):
    '''Four stride-2 conv blocks and a global average pool, shared by all masks'''

    def __init__(self, config):
        super().__init__()
        width = config.base_channels
        channels = [3, width // 2, width, 2 * width, config.appearance_dim]
        layers = []
        for index in range(4):
            layers.append(nn.Conv2d(channels[index], channels[index + 1], 3,
                                    stride=2, padding=1))
            if index < 3:
                layers.append(make_activation(config.activation))
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x).mean(dim=(2, 3))


class ResidualBlock(nn.Module):

    def __init__(self, channels, activation):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = make_activation(activation)

    def forward(self, x):
        return x + self.conv2(self.act(self.conv1(x)))


class ImageDecoder(nn.Module):
    '''1x1 fusion, two residual blocks, transposed-conv upsampling, tanh output'''

    def __init__(self, config):
        super().__init__()
        fuse = config.decoder_fuse_channels
        in_channels = config.num_masks * (config.appearance_dim + 1)
        self.fuse = nn.Conv2d(in_channels, fuse, 1)
        self.act = make_activation(config.activation)
        self.residual = nn.Sequential(ResidualBlock(fuse, config.activation),
                                      ResidualBlock(fuse, config.activation))
        layers = []
        channels = fuse
        for _ in range(int(math.log2(config.downsample_factor))):
            out_channels = channels // 2 if channels >= 16 else channels
            layers.append(nn.ConvTranspose2d(channels, out_channels, 4, stride=2,
                                             padding=1))
            layers.append(make_activation(config.activation))
            channels = out_channels
        self.upsample = nn.Sequential(*layers)
        self.output = nn.Conv2d(channels, 3, 3, padding=1)

    def forward(self, x):
        x = self.act(self.fuse(x))
        x = self.residual(x)
        x = self.upsample(x)
        return torch.tanh(self.output(x))


class FeatureClassifier(nn.Module):
    '''Scores whether masks and appearance vectors come from the same image.

    No output squashing: the scores follow the least-squares convention.
    '''

    def __init__(self, config):
        super().__init__()
        width = config.base_channels
        self.mask_body = nn.Sequential(
            nn.Conv2d(config.num_masks, width, 3, stride=2, padding=1),
            make_activation(config.activation),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            make_activation(config.activation),
        )
        out_h = _conv_out(_conv_out(config.mask_height, 2), 2)
        out_w = _conv_out(_conv_out(config.mask_width, 2), 2)
        in_features = 2 * width * out_h * out_w + config.num_masks * config.appearance_dim
        hidden = 4 * width
        self.head = nn.Sequential(
            nn.Linear(in_features, hidden),
            make_activation(config.activation),
            nn.Linear(hidden, hidden),
            make_activation(config.activation),
            nn.Linear(hidden, 1),
        )

    def forward(self, masks, appearance):
        shape_features = self.mask_body(masks).flatten(1)
        joint = torch.cat([shape_features, appearance.flatten(1)], dim=1)
        return self.head(joint).squeeze(1)


class DisentanglementNet(nn.Module):
    '''Container for the parameters of all four sub-networks.

    Attributes
    ----------
    config : :class:`~dlab.core.ModelConfig`
    fingerprint : str
        Architecture fingerprint of ``config``
    '''

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.fingerprint = fingerprint(config)
        self.shape_encoder = ShapeEncoder(config)
        self.appearance_encoder = AppearanceEncoder(config)
        self.decoder = ImageDecoder(config)
        self.classifier = FeatureClassifier(config)

    def generator_modules(self):
        return {'shape_encoder': self.shape_encoder,
                'appearance_encoder': self.appearance_encoder,
                'decoder': self.decoder}


def check_fingerprint(params, config):
    '''Raise FingerprintError unless ``params`` were built for ``config``'''
    expected = fingerprint(config)
    if params.fingerprint != expected:
        raise FingerprintError('parameters were built for architecture {0}, '
                               'configuration requires {1}'.format(
                                   params.fingerprint, expected))


@contextlib.contextmanager
def frozen(module):
    '''Temporarily stop gradients from reaching the parameters of ``module``'''
    flags = [(p, p.requires_grad) for p in module.parameters()]
    for p, _ in flags:
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, flag in flags:
            p.requires_grad_(flag)


def _to_channels_first(images):
    return images.permute(0, 3, 1, 2)


def _to_channels_last(images):
    return images.permute(0, 2, 3, 1)


def encode_shape(images, params, config=None):
    '''Shape encoder: images to a MaskSet.

    Parameters
    ----------
    images : torch.Tensor
        ``batch x height x width x 3`` in [-1, 1]
    params : :class:`DisentanglementNet`
    config : :class:`~dlab.core.ModelConfig`, optional
        When given, the parameter fingerprint is checked against it

    Returns
    -------
    masks : torch.Tensor
        ``batch x num_masks x height/downsample x width/downsample`` in [0, 1]

    Raises
    ------
    FingerprintError
    '''
    if config is not None:
        check_fingerprint(params, config)
    return params.shape_encoder(_to_channels_first(images))


def resize_broadcast(masks, target_h, target_w):
    '''Bilinearly upsample masks to ``target_h x target_w``.

    Corners are aligned, so the result is a convex combination of the input
    values and stays in [0, 1]. The channel broadcast is left to the
    consumer.

    Raises
    ------
    ValueError if the target is not a positive integer multiple of the
    mask resolution
    '''
    height, width = masks.shape[-2:]
    if (target_h <= 0 or target_w <= 0 or target_h % height or target_w % width):
        raise ValueError('cannot resize {0}x{1} masks to {2}x{3}: the scale '
                         'factor must be a positive integer'.format(
                             height, width, target_h, target_w))
    if (target_h, target_w) == (height, width):
        return masks
    return F.interpolate(masks, size=(target_h, target_w), mode='bilinear',
                         align_corners=True)


def apply_masks(images, masks):
    '''Filter every image with each of its masks.

    Returns
    -------
    filtered : torch.Tensor
        ``batch x num_masks x height x width x 3``

    Raises
    ------
    ValueError for mismatched batch sizes
    '''
    if images.shape[0] != masks.shape[0]:
        raise ValueError('batch size mismatch: {0} images, {1} mask sets'.format(
            images.shape[0], masks.shape[0]))
    upsampled = resize_broadcast(masks, images.shape[1], images.shape[2])
    return images.unsqueeze(1) * upsampled.unsqueeze(-1)


def encode_appearance(filtered, params, config=None):
    '''Appearance encoder applied independently to each filtered image.

    Returns
    -------
    appearance : torch.Tensor
        ``batch x num_masks x appearance_dim``
    '''
    if config is not None:
        check_fingerprint(params, config)
    batch, num_masks, height, width, channels = filtered.shape
    flat = filtered.reshape(batch * num_masks, height, width, channels)
    features = params.appearance_encoder(_to_channels_first(flat))
    return features.reshape(batch, num_masks, -1)


def _check_pairing(masks, appearance):
    if masks.shape[:2] != appearance.shape[:2]:
        raise ValueError('masks {0} and appearance {1} disagree on batch or '
                         'number of masks'.format(tuple(masks.shape),
                                                  tuple(appearance.shape)))


def decode(masks, appearance, params):
    '''Image decoder.

    Each appearance vector is tiled over the mask grid and weighted by its
    mask; the tiled maps and the masks are stacked along channels and
    decoded to an ``batch x height x width x 3`` image in [-1, 1].
    '''
    _check_pairing(masks, appearance)
    batch, num_masks, height, width = masks.shape
    tiled = appearance[:, :, :, None, None] * masks[:, :, None]
    tiled = tiled.reshape(batch, -1, height, width)
    joint = torch.cat([tiled, masks], dim=1)
    return _to_channels_last(params.decoder(joint))


def classify(masks, appearance, params):
    '''Feature classifier score per batch element'''
    _check_pairing(masks, appearance)
    return params.classifier(masks, appearance)


def encode(images, params):
    '''Run both encoders; returns ``(masks, appearance)``'''
    masks = encode_shape(images, params)
    appearance = encode_appearance(apply_masks(images, masks), params)
    return masks, appearance


def transfer(appearance_images, shape_images, params):
    '''Decode the appearance of one batch laid out by the shape of another.

    ``transfer(images, images, params)`` is the reconstruction.
    '''
    _, appearance = encode(appearance_images, params)
    masks = encode_shape(shape_images, params)
    return decode(masks, appearance, params)


def reset_parameters(module):
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
        nn.init.kaiming_normal_(module.weight, a=0.2, nonlinearity='leaky_relu')
        nn.init.zeros_(module.bias)


def init_params(config, seed, init_mode='random', dataset=None, prior_iters=500):
    '''Build freshly initialised network parameters.

    Parameters
    ----------
    config : :class:`~dlab.core.ModelConfig`
    seed : int
        Seed for the variance-scaled initialisation
    init_mode : {'random', 'shape_prior'}
        ``shape_prior`` additionally warm-starts the shape encoder on the
        ground-truth part masks of a synthetic dataset
    dataset : :class:`~dlab.data.ImageDataset`, optional
        Required for ``shape_prior``
    prior_iters : int, optional
        Warm-start iterations

    Returns
    -------
    params : :class:`DisentanglementNet`

    Raises
    ------
    DatasetError if ``shape_prior`` is requested without ground-truth masks
    '''
    if init_mode not in ('random', 'shape_prior'):
        raise ValueError('unknown init_mode {0!r}'.format(init_mode))
    if init_mode == 'shape_prior' and (dataset is None or dataset.part_masks is None):
        raise DatasetError('shape_prior initialisation needs a synthetic dataset '
                           'with ground-truth part masks')
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        params = DisentanglementNet(config)
        params.apply(reset_parameters)
    if init_mode == 'shape_prior':
        pretrain_shape_prior(params, dataset, prior_iters, seed)
    return params


def _area_downsample(part_masks, factor):
    # part_masks: n x parts x H x W
    n, parts, height, width = part_masks.shape
    blocks = part_masks.reshape(n, parts, height // factor, factor,
                                width // factor, factor)
    return blocks.mean(axis=(3, 5))


def pretrain_shape_prior(params, dataset, iters, seed, batch_size=16, lr=1e-3):
    '''Supervised warm start of the shape encoder on ground-truth parts.

    Part ``p`` is fitted by mask ``p % num_masks`` (parts sharing a mask
    are merged) with binary cross-entropy at mask resolution; masks beyond
    the number of parts are left free. Only shape-encoder parameters move.

    Returns
    -------
    params : :class:`DisentanglementNet`
    '''
    config = params.config
    num_masks = config.num_masks
    parts = dataset.part_masks.shape[1]
    targets = np.zeros((len(dataset), min(num_masks, parts), dataset.part_masks.shape[2],
                        dataset.part_masks.shape[3]), dtype=np.float32)
    for part in range(parts):
        slot = part % num_masks
        targets[:, slot] = np.maximum(targets[:, slot], dataset.part_masks[:, part])
    targets = _area_downsample(targets, config.downsample_factor)

    device = next(params.parameters()).device
    dtype = next(params.parameters()).dtype
    images = torch.as_tensor(dataset.images, dtype=dtype)
    targets = torch.as_tensor(targets, dtype=dtype)
    rng = np.random.default_rng(seed)
    optimizer = torch.optim.Adam(params.shape_encoder.parameters(), lr=lr)
    used = targets.shape[1]
    for step in range(iters):
        index = torch.as_tensor(rng.integers(len(dataset), size=batch_size))
        masks = encode_shape(images[index].to(device), params)
        loss = F.binary_cross_entropy(masks[:, :used].clamp(1e-6, 1 - 1e-6),
                                      targets[index].to(device))
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if step % 100 == 0:
            log.debug('shape prior step {0}: bce {1:.4f}'.format(step, loss.item()))
    log.info('shape prior warm start finished after {0} steps'.format(iters))
    return params
