'''Training objectives: perceptual reconstruction, the least-squares
feature adversarial pair, colour consistency and their weighted sum.

Every loss is reduced with a mean over the batch.
'''
import dataclasses

import torch

from .networks import resize_broadcast

MASK_MASS_EPS = 1e-6


@dataclasses.dataclass(frozen=True)
class ColorStats:
    '''Per-mask colour statistics.

    ``mean`` and ``variance`` are ``batch x num_masks`` tensors, or
    ``batch x num_masks x 3`` for per-channel statistics.
    '''
    mean: torch.Tensor
    variance: torch.Tensor


@dataclasses.dataclass(frozen=True)
class LossBreakdown:
    '''Scalar values of all objectives for one iteration'''
    recon: float
    adv_classifier: float
    adv_encoders: float
    color: float
    total: float

    def as_record(self, iteration, lr):
        '''The JSON-lines record written to ``metrics.jsonl``'''
        return {'iter': int(iteration), 'recon': self.recon,
                'adv_c': self.adv_classifier, 'adv_e': self.adv_encoders,
                'color': self.color, 'total': self.total, 'lr': lr}


def reconstruction_loss(original, reconstructed, pyramidizer):
    '''Weighted sum over tapped layers of the mean absolute feature difference.

    Parameters
    ----------
    original, reconstructed : torch.Tensor
        ``batch x H x W x 3`` images of identical shape
    pyramidizer : callable
        Maps an image batch to a :class:`~dlab.perceptual.FeaturePyramid`

    Returns
    -------
    loss : torch.Tensor
        Scalar, zero iff the pyramids are identical

    Raises
    ------
    ValueError for mismatched shapes
    '''
    if original.shape != reconstructed.shape:
        raise ValueError('cannot compare images of shape {0} and {1}'.format(
            tuple(original.shape), tuple(reconstructed.shape)))
    target = pyramidizer(original)
    output = pyramidizer(reconstructed)
    loss = reconstructed.new_zeros(())
    for weight, expected, actual in zip(output.layer_weights, target.features,
                                        output.features):
        loss = loss + weight * (actual - expected.detach()).abs().mean()
    return loss


def classifier_adv_loss(score_true, score_false):
    '''Least-squares classifier objective: true pairs to 1, mixed pairs to 0'''
    return ((score_true - 1.0) ** 2 + score_false ** 2).mean()


def encoder_adv_loss(score_true, score_false, mode='corrected_eq3'):
    '''Encoder objective against a frozen classifier.

    ``literal_eq3`` is ``(s_true - 1)^2 + s_true^2`` and is minimised at a
    true-pair score of 0.5; ``corrected_eq3`` is ``(s_false - 1)^2``, which
    pushes mixed pairs towards "true". The caller must keep the classifier
    parameters out of the graph, see :func:`dlab.networks.frozen`.
    '''
    if mode == 'literal_eq3':
        return ((score_true - 1.0) ** 2 + score_true ** 2).mean()
    if mode == 'corrected_eq3':
        return ((score_false - 1.0) ** 2).mean()
    raise ValueError('unknown adv_loss_mode {0!r}'.format(mode))


def masked_color_stats(images, masks, normalizer='total_pixels', per_channel=False):
    '''Mean and variance of every mask-filtered patch.

    Parameters
    ----------
    images : torch.Tensor
        ``batch x H x W x 3``
    masks : torch.Tensor
        ``batch x num_masks x h x w``, upsampled to H x W when smaller
    normalizer : {'total_pixels', 'mask_mass'}
        ``total_pixels`` divides the patch sums by H*W. ``mask_mass``
        computes the mask-weighted mean and variance of the intensity,
        dividing by the mask mass (plus 1e-6)
    per_channel : bool, optional
        Keep RGB separate instead of averaging into intensity

    Returns
    -------
    stats : :class:`ColorStats`
    '''
    height, width = images.shape[1:3]
    weights = resize_broadcast(masks, height, width)
    if per_channel:
        values = images.permute(0, 3, 1, 2).unsqueeze(1)
        weights = weights.unsqueeze(2)
    else:
        values = images.mean(dim=-1).unsqueeze(1)
    if normalizer == 'total_pixels':
        patch = values * weights
        count = float(height * width)
        mean = patch.sum(dim=(-2, -1)) / count
        variance = ((patch - mean[..., None, None]) ** 2).sum(dim=(-2, -1)) / count
    elif normalizer == 'mask_mass':
        mass = weights.sum(dim=(-2, -1)) + MASK_MASS_EPS
        mean = (values * weights).sum(dim=(-2, -1)) / mass
        variance = (weights * (values - mean[..., None, None]) ** 2).sum(dim=(-2, -1)) / mass
    else:
        raise ValueError('unknown color_stat_normalizer {0!r}'.format(normalizer))
    return ColorStats(mean, variance)


def color_consistency_loss(stats_mix, stats_src):
    '''Squared difference of mean and variance, averaged over masks and batch'''
    if stats_mix.mean.shape != stats_src.mean.shape:
        raise ValueError('colour statistics disagree on batch or number of masks: '
                         '{0} vs {1}'.format(tuple(stats_mix.mean.shape),
                                             tuple(stats_src.mean.shape)))
    return ((stats_mix.mean - stats_src.mean) ** 2
            + (stats_mix.variance - stats_src.variance) ** 2).mean()


def total_loss(recon, adv_encoders, color, config):
    '''Generator objective ``l1 * recon + l2 * adv + l3 * color``'''
    return (config.lambda_recon * recon + config.lambda_adv * adv_encoders
            + config.lambda_color * color)
