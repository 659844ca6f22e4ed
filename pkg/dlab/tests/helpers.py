'''Small configurations and numerical helpers shared by the tests'''
import numpy as np
import torch

from ..core import ModelConfig, TrainConfig
from ..data import PairBatch

SMALL_SIZE = 16


def tiny_model_config(**kwargs):
    '''8x8 images, two masks, four appearance features, one perceptual layer'''
    values = dict(image_height=8, image_width=8, num_masks=2, appearance_dim=4,
                  downsample_factor=2, decoder_fuse_channels=4, base_channels=2,
                  activation='silu', perceptual_layers=1, perceptual_channels=2)
    values.update(kwargs)
    return ModelConfig(**values)


def small_model_config(**kwargs):
    values = dict(image_height=SMALL_SIZE, image_width=SMALL_SIZE, num_masks=3,
                  appearance_dim=4, downsample_factor=2, decoder_fuse_channels=8,
                  base_channels=4, perceptual_layers=2, perceptual_channels=4)
    values.update(kwargs)
    return ModelConfig(**values)


def small_train_config(**kwargs):
    values = dict(batch_size=4, total_iters=6, checkpoint_every=3, prior_iters=5,
                  ablation='base_disentangle', seed=7)
    values.update(kwargs)
    return TrainConfig(**values)


def random_images(batch, height, width, seed=0, dtype=torch.float32):
    rng = np.random.default_rng(seed)
    data = rng.uniform(-1.0, 1.0, size=(batch, height, width, 3))
    return torch.as_tensor(data, dtype=dtype)


def pair_batch(batch, height, width, seed=0, dtype=torch.float32):
    images_a = random_images(batch, height, width, seed, dtype)
    images_b = random_images(batch, height, width, seed + 1, dtype)
    ids = ['img{0}'.format(i) for i in range(batch)]
    return PairBatch(images_a, images_b, ids, ids[::-1])


def state_arrays(state):
    '''Every array of a TrainState, keyed by a readable name'''
    arrays = {'net/' + name: value.detach().cpu().numpy()
              for name, value in state.net.state_dict().items()}
    arrays.update({'perceptual/' + name: value.detach().cpu().numpy()
                   for name, value in state.extractor.state_dict().items()})
    for label in ('generator_optimizer', 'classifier_optimizer'):
        optimizer = getattr(state, label)
        for index, entry in optimizer.state_dict()['state'].items():
            for key, value in entry.items():
                arrays['{0}/{1}/{2}'.format(label, index, key)] = \
                    torch.as_tensor(value).cpu().numpy()
    return arrays


def assert_states_equal(first, second):
    assert first.iter == second.iter
    assert first.config_hash == second.config_hash
    assert first.rng.bit_generator.state == second.rng.bit_generator.state
    left, right = state_arrays(first), state_arrays(second)
    assert sorted(left) == sorted(right)
    for name in left:
        np.testing.assert_array_equal(left[name], right[name], err_msg=name)


def finite_difference_errors(loss_fn, parameters, step=1e-4, floor=1e-6, noise=1e-8):
    '''Compare autograd gradients with central differences.

    ``loss_fn`` takes no arguments and returns a scalar tensor. Entries
    where both gradients are below ``floor`` are ignored, as are entries
    whose absolute disagreement is under the difference noise ``noise``.

    Returns
    -------
    worst : float
        Largest relative error over the compared entries
    compared : int
    '''
    parameters = list(parameters)
    for parameter in parameters:
        parameter.grad = None
    loss_fn().backward()
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
                for p in parameters]
    worst, compared = 0.0, 0
    with torch.no_grad():
        for parameter, grad in zip(parameters, analytic):
            flat = parameter.view(-1)
            for index in range(flat.numel()):
                original = flat[index].item()
                flat[index] = original + step
                upper = loss_fn().item()
                flat[index] = original - step
                lower = loss_fn().item()
                flat[index] = original
                numeric = (upper - lower) / (2.0 * step)
                exact = grad.view(-1)[index].item()
                scale = max(abs(numeric), abs(exact))
                if scale <= floor:
                    continue
                compared += 1
                difference = abs(numeric - exact)
                if difference > noise:
                    worst = max(worst, difference / scale)
    return worst, compared