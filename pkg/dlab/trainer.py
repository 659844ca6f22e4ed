'''Alternating optimisation of the feature classifier and the generator
(both encoders plus the decoder), with the learning-rate schedule,
checkpointing and the ablation switches.
'''
import dataclasses
import functools
import json
import math
import os

import numpy as np
import torch
from astropy import log

from . import conf
from .checkpoint import Section, read_container, write_container
from .core import (CheckpointError, DatasetError, FingerprintError, NonFiniteLossError,
                   check_compatible, dump_config, effective_train_config, parse_config,
                   validate_batch, warn)
from .data import sample_pair_batch
from .losses import (LossBreakdown, classifier_adv_loss, color_consistency_loss,
                     encoder_adv_loss, masked_color_stats, reconstruction_loss, total_loss)
from .networks import (DisentanglementNet, classify, decode, encode, fingerprint,
                       frozen, init_params)
from .perceptual import FeatureExtractor, extract_features, load_arrays, make_extractor

ADAM_EPS = 1e-8
NETWORK_GROUPS = ('shape_encoder', 'other')
METRICS_LOG = 'metrics.jsonl'
FINAL_CHECKPOINT = 'final.dlab'
REQUIRED_SECTIONS = ('model', 'optimizer', 'perceptual', 'meta')


@dataclasses.dataclass
class TrainState:
    '''Everything needed to continue training bit-exactly.

    Attributes
    ----------
    net : :class:`~dlab.networks.DisentanglementNet`
    generator_optimizer, classifier_optimizer : torch.optim.Adam
        Hold the first and second moments of every parameter
    iter : int
        Completed training steps
    rng : numpy.random.Generator
        Pair sampling stream
    model_config, train_config : ModelConfig, TrainConfig
    extractor : :class:`~dlab.perceptual.FeatureExtractor`
        Frozen perceptual network
    '''
    net: DisentanglementNet
    generator_optimizer: torch.optim.Optimizer
    classifier_optimizer: torch.optim.Optimizer
    iter: int
    rng: np.random.Generator
    model_config: object
    train_config: object
    extractor: FeatureExtractor

    @property
    def config_hash(self):
        return self.net.fingerprint

    @property
    def dtype(self):
        return next(self.net.parameters()).dtype

    @property
    def device(self):
        return next(self.net.parameters()).device


def lr_at(iteration, config, net='other'):
    '''Step decay of the learning rate.

    Parameters
    ----------
    iteration : int
        Completed steps, >= 0
    config : :class:`~dlab.core.TrainConfig`
    net : {'shape_encoder', 'other'}
        The shape encoder trains with ``shape_encoder_lr_factor`` times the
        rate of the other networks

    Returns
    -------
    lr : float
    '''
    if iteration < 0:
        raise ValueError('iteration must be >= 0 (got {0})'.format(iteration))
    if net not in NETWORK_GROUPS:
        raise ValueError('unknown network group {0!r}'.format(net))
    lr = config.base_lr * (1.0 - config.lr_decay_rate) ** (iteration // config.lr_decay_every)
    if net == 'shape_encoder':
        lr *= config.shape_encoder_lr_factor
    return lr


def _adam(groups, config):
    return torch.optim.Adam(groups, lr=config.base_lr, eps=ADAM_EPS,
                            betas=(config.adam_beta1, config.adam_beta2))


def make_optimizers(net, config):
    '''Adam for the generator (two learning-rate groups) and the classifier.

    With ``freeze_shape_encoder`` the shape encoder group is left out, so
    its parameters are never updated.
    '''
    groups = []
    if not config.freeze_shape_encoder:
        groups.append({'params': list(net.shape_encoder.parameters()),
                       'name': 'shape_encoder'})
    groups.append({'params': list(net.appearance_encoder.parameters())
                   + list(net.decoder.parameters()), 'name': 'other'})
    classifier = [{'params': list(net.classifier.parameters()), 'name': 'other'}]
    return _adam(groups, config), _adam(classifier, config)


def init_state(model_config, train_config, dataset=None, extractor=None,
               perceptual_weights=None):
    '''Fresh training state.

    Parameters
    ----------
    model_config, train_config : ModelConfig, TrainConfig
    dataset : :class:`~dlab.data.ImageDataset`, optional
        Needed for the shape-prior warm start of the ``full`` ablation
    extractor : :class:`~dlab.perceptual.FeatureExtractor`, optional
        Built from the seed (or ``perceptual_weights``) when omitted
    perceptual_weights : str, optional
        Container with imported extractor weights

    Returns
    -------
    state : :class:`TrainState`

    Raises
    ------
    ConfigError if the two configs disagree, see
    :func:`~dlab.core.check_compatible`
    '''
    check_compatible(model_config, train_config)
    seed = train_config.seed
    net = init_params(model_config, seed, train_config.init_mode, dataset,
                      train_config.prior_iters)
    net = net.to(conf.device)
    if extractor is None:
        extractor = make_extractor(seed, model_config.perceptual_source,
                                   model_config.perceptual_layers,
                                   model_config.perceptual_channels,
                                   model_config.activation, perceptual_weights)
    extractor = extractor.to(conf.device)
    generator_optimizer, classifier_optimizer = make_optimizers(net, train_config)
    return TrainState(net, generator_optimizer, classifier_optimizer, 0,
                      np.random.default_rng(seed), model_config, train_config, extractor)


def _check_finite(values):
    for name, value in values:
        if not math.isfinite(value):
            raise NonFiniteLossError('training aborted: loss component {0} is {1}'.format(
                name, value))


def _clip(optimizer, max_norm):
    if max_norm > 0:
        params = [p for group in optimizer.param_groups for p in group['params']]
        torch.nn.utils.clip_grad_norm_(params, max_norm)


def _set_learning_rates(state):
    for optimizer in (state.generator_optimizer, state.classifier_optimizer):
        for group in optimizer.param_groups:
            group['lr'] = lr_at(state.iter, state.train_config, group['name'])


def _classifier_update(state, images_a, images_b, config):
    net = state.net
    with torch.no_grad():
        masks_a, appearance_a = encode(images_a, net)
        _, appearance_b = encode(images_b, net)
    # mixed pair: shape of the element, appearance of its partner
    loss = classifier_adv_loss(classify(masks_a, appearance_a, net),
                               classify(masks_a, appearance_b, net))
    value = loss.item()
    _check_finite([('adv_c', value)])
    state.net.zero_grad(set_to_none=True)
    loss.backward()
    _clip(state.classifier_optimizer, config.grad_clip_norm)
    state.classifier_optimizer.step()
    return {'adv_classifier': value}


def _generator_update(state, images_a, images_b, config):
    net = state.net
    model_config = state.model_config
    masks_a, appearance_a = encode(images_a, net)
    masks_b, appearance_b = encode(images_b, net)
    reconstructed = decode(masks_a, appearance_a, net)
    mixed = decode(masks_b, appearance_a, net)

    pyramidizer = functools.partial(extract_features, extractor=state.extractor,
                                    layer_weights=config.perceptual_layer_weights)
    recon = reconstruction_loss(images_a, reconstructed, pyramidizer)
    with frozen(net.classifier):
        adv = encoder_adv_loss(classify(masks_a, appearance_a, net),
                               classify(masks_a, appearance_b, net),
                               model_config.adv_loss_mode)
    stats = functools.partial(masked_color_stats, normalizer=model_config.color_stat_normalizer,
                              per_channel=model_config.color_stats_per_channel)
    color = color_consistency_loss(stats(mixed, masks_b), stats(images_a, masks_a))
    total = total_loss(recon, adv, color, config)

    values = {'recon': recon.item(), 'adv_encoders': adv.item(),
              'color': color.item(), 'total': total.item()}
    _check_finite([('recon', values['recon']), ('adv_e', values['adv_encoders']),
                   ('color', values['color']), ('total', values['total'])])
    state.net.zero_grad(set_to_none=True)
    total.backward()
    _clip(state.generator_optimizer, config.grad_clip_norm)
    state.generator_optimizer.step()
    return values


def train_step(state, batch):
    '''One classifier update and one generator update.

    The classifier sees the encoder outputs as constants; the generator
    update keeps the classifier parameters out of the graph. Both use
    Adam with the learning rates of :func:`lr_at` for the current
    iteration.

    Parameters
    ----------
    state : :class:`TrainState`
        Updated in place
    batch : :class:`~dlab.data.PairBatch`

    Returns
    -------
    state : :class:`TrainState`
    losses : :class:`~dlab.losses.LossBreakdown`

    Raises
    ------
    NonFiniteLossError naming the first non-finite loss component
    '''
    config = effective_train_config(state.train_config)
    images_a = batch.images_a.to(device=state.device, dtype=state.dtype)
    images_b = batch.images_b.to(device=state.device, dtype=state.dtype)
    _set_learning_rates(state)
    updates = [_classifier_update, _generator_update]
    if config.update_order == 'generator_first':
        updates.reverse()
    values = {}
    for update in updates:
        values.update(update(state, images_a, images_b, config))
    state.iter += 1
    return state, LossBreakdown(values['recon'], values['adv_classifier'],
                                values['adv_encoders'], values['color'], values['total'])


def checkpoint_name(iteration):
    return 'ckpt_{0:07d}.dlab'.format(iteration)


def train(model_config, train_config, dataset, out_dir=None, state=None,
          extractor=None, perceptual_weights=None):
    '''Run training up to ``train_config.total_iters`` steps.

    Parameters
    ----------
    model_config, train_config : ModelConfig, TrainConfig
    dataset : :class:`~dlab.data.ImageDataset`
        At least two images at the configured resolution
    out_dir : str, optional
        Receives ``metrics.jsonl``, a checkpoint every ``checkpoint_every``
        steps and ``final.dlab``
    state : :class:`TrainState`, optional
        Resume from this state instead of initialising a new one
    extractor : :class:`~dlab.perceptual.FeatureExtractor`, optional
    perceptual_weights : str, optional

    Returns
    -------
    state : :class:`TrainState`
    records : list of dict
        One :meth:`~dlab.losses.LossBreakdown.as_record` per step taken

    Raises
    ------
    DatasetError if the dataset holds fewer than two images
    NonFiniteLossError if a step diverges
    '''
    if len(dataset) < 2:
        raise DatasetError('need ≥ 2 samples for pair training (got {0})'.format(len(dataset)))
    validate_batch(dataset.images, model_config)
    torch.use_deterministic_algorithms(bool(conf.deterministic), warn_only=True)
    if state is None:
        state = init_state(model_config, train_config, dataset, extractor, perceptual_weights)
    config = state.train_config

    stream = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        mode = 'a' if state.iter > 0 else 'w'
        stream = open(os.path.join(out_dir, METRICS_LOG), mode, encoding='utf-8')
    records = []
    log.info('training {0} from iteration {1} to {2} (ablation {3})'.format(
        state.config_hash, state.iter, config.total_iters, config.ablation))
    try:
        while state.iter < config.total_iters:
            iteration = state.iter
            batch = sample_pair_batch(dataset, config.batch_size, state.rng)
            state, losses = train_step(state, batch)
            record = losses.as_record(iteration, lr_at(iteration, config))
            records.append(record)
            log.debug('iter {iter}: recon={recon:.5g} adv_c={adv_c:.5g} adv_e={adv_e:.5g} '
                      'color={color:.5g} total={total:.5g}'.format(**record))
            if iteration % int(conf.log_every) == 0:
                log.info('iter {0}/{1}: total loss {2:.5g}'.format(
                    iteration, config.total_iters, losses.total))
            if stream is not None:
                stream.write(json.dumps(record) + '\n')
                stream.flush()
                if state.iter % config.checkpoint_every == 0:
                    save_checkpoint(state, os.path.join(out_dir, checkpoint_name(state.iter)))
    finally:
        if stream is not None:
            stream.close()
    if out_dir is not None:
        save_checkpoint(state, os.path.join(out_dir, FINAL_CHECKPOINT))
    log.info('training finished at iteration {0}'.format(state.iter))
    return state, records


def _module_arrays(module):
    return {name: tensor.detach().cpu().numpy()
            for name, tensor in module.state_dict().items()}


def _optimizer_arrays(prefix, optimizer):
    arrays = {}
    for index, entry in optimizer.state_dict()['state'].items():
        for key, value in entry.items():
            arrays['{0}/{1}/{2}'.format(prefix, index, key)] = \
                torch.as_tensor(value).detach().cpu().numpy()
    return arrays


def save_checkpoint(state, path):
    '''Write the full training state to a single container file.

    Raises
    ------
    OSError if the file cannot be written
    '''
    net = state.net
    optimizer_arrays = _optimizer_arrays('generator', state.generator_optimizer)
    optimizer_arrays.update(_optimizer_arrays('classifier', state.classifier_optimizer))
    extractor = state.extractor
    sections = {
        'model': Section(_module_arrays(net), {'fingerprint': net.fingerprint}),
        'optimizer': Section(optimizer_arrays, {}),
        'perceptual': Section(_module_arrays(extractor), {
            'num_layers': len(extractor.stages),
            'base_channels': extractor.stages[0][0].out_channels,
            'activation': state.model_config.activation,
        }),
        'meta': Section({}, {
            'iter': state.iter,
            'seed': state.train_config.seed,
            'config': dump_config(state.model_config, state.train_config),
            'config_hash': state.config_hash,
            'rng_state': state.rng.bit_generator.state,
        }),
    }
    write_container(path, sections)
    log.info('saved checkpoint {0} at iteration {1}'.format(path, state.iter))
    return path


def _load_optimizer(optimizer, prefix, arrays, device):
    restored = optimizer.state_dict()
    entries = {}
    for name, value in arrays.items():
        owner, index, key = name.split('/')
        if owner != prefix:
            continue
        tensor = torch.from_numpy(value)
        entries.setdefault(int(index), {})[key] = tensor if key == 'step' else tensor.to(device)
    known = {index for group in restored['param_groups'] for index in group['params']}
    if not set(entries) <= known:
        raise CheckpointError('optimizer section has moments for unknown {0} parameters'.format(
            prefix))
    restored['state'] = entries
    optimizer.load_state_dict(restored)


def load_checkpoint(path, model_config=None, override=False):
    '''Restore a :class:`TrainState` written by :func:`save_checkpoint`.

    Parameters
    ----------
    path : str
    model_config : :class:`~dlab.core.ModelConfig`, optional
        Expected architecture; compared with the stored fingerprint
    override : bool, optional
        Load despite a fingerprint mismatch, using the stored configuration

    Returns
    -------
    state : :class:`TrainState`

    Raises
    ------
    CheckpointError for an unreadable container or a missing section
    FingerprintError if ``model_config`` does not match and ``override`` is
    not set
    '''
    sections = read_container(path)
    for name in REQUIRED_SECTIONS:
        if name not in sections:
            raise CheckpointError('{0} has no {1!r} section'.format(path, name))
    meta = sections['meta'].metadata
    try:
        stored_model, stored_train = parse_config(meta['config'])
        iteration = int(meta['iter'])
        rng_state = meta['rng_state']
    except (KeyError, TypeError, ValueError) as err:
        raise CheckpointError('corrupt section {0!r} in {1}: {2}'.format('meta', path, err))
    if fingerprint(stored_model) != meta.get('config_hash'):
        raise CheckpointError('corrupt section {0!r} in {1}: configuration does not match '
                              'its fingerprint'.format('meta', path))
    if model_config is not None and fingerprint(model_config) != meta['config_hash']:
        message = '{0} was written for architecture {1}, configuration requires {2}'.format(
            path, meta['config_hash'], fingerprint(model_config))
        if not override:
            raise FingerprintError(message)
        warn(message + '; using the stored configuration')

    model_arrays = sections['model'].arrays
    if not model_arrays:
        raise CheckpointError('corrupt section {0!r} in {1}: no arrays'.format('model', path))
    dtype = torch.from_numpy(next(iter(model_arrays.values()))).dtype
    net = DisentanglementNet(stored_model).to(dtype)
    load_arrays(net, model_arrays, section='model')
    net = net.to(conf.device)

    perceptual = sections['perceptual']
    try:
        extractor = FeatureExtractor(int(perceptual.metadata['num_layers']),
                                     int(perceptual.metadata['base_channels']),
                                     perceptual.metadata['activation'])
    except (KeyError, ValueError) as err:
        raise CheckpointError('corrupt section {0!r} in {1}: {2}'.format('perceptual', path, err))
    extractor = load_arrays(extractor.to(dtype), perceptual.arrays).freeze().to(conf.device)

    generator_optimizer, classifier_optimizer = make_optimizers(net, stored_train)
    try:
        _load_optimizer(generator_optimizer, 'generator', sections['optimizer'].arrays,
                        conf.device)
        _load_optimizer(classifier_optimizer, 'classifier', sections['optimizer'].arrays,
                        conf.device)
    except (ValueError, KeyError) as err:
        raise CheckpointError('corrupt section {0!r} in {1}: {2}'.format('optimizer', path, err))

    rng = np.random.default_rng()
    try:
        rng.bit_generator.state = rng_state
    except (TypeError, ValueError, KeyError) as err:
        raise CheckpointError('corrupt section {0!r} in {1}: {2}'.format('meta', path, err))
    log.info('loaded checkpoint {0} at iteration {1}'.format(path, iteration))
    return TrainState(net, generator_optimizer, classifier_optimizer, iteration, rng,
                      stored_model, stored_train, extractor)
