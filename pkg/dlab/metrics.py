'''Quantitative evaluation: reconstruction SSIM, mask IoU against synthetic
ground truth, colour-transfer error and the classifier-balance score.
'''
import dataclasses
import functools
import json
import math
import os

import numpy as np
import torch
from astropy import log
from astropy.table import Table
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from .core import DatasetError
from .data import PART_NAMES, sample_pair_batch
from .losses import masked_color_stats
from .networks import classify, encode, encode_shape, resize_broadcast, transfer

SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5
SSIM_PAD = int(SSIM_TRUNCATE * SSIM_SIGMA + 0.5)
SSIM_WINDOW = 2 * SSIM_PAD + 1
SSIM_K1 = 0.01
SSIM_K2 = 0.03
MASK_THRESHOLD = 0.5
MIN_BALANCE_PAIRS = 10
EVAL_CHUNK = 32


@dataclasses.dataclass
class MetricReport:
    '''One named score with the number of samples it summarises'''
    name: str
    value: float
    n_samples: int
    extra: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        self.value = float(self.value)
        if not math.isfinite(self.value):
            raise ValueError('metric {0} is not finite ({1})'.format(self.name, self.value))
        if self.n_samples < 1:
            raise ValueError('metric {0} summarises no samples'.format(self.name))


def _as_array(data):
    if torch.is_tensor(data):
        return data.detach().cpu().double().numpy()
    return np.asarray(data, dtype=np.float64)


def ssim(x, y):
    '''Structural similarity of two ``H x W x 3`` images in [-1, 1].

    Images are mapped to [0, 1]; local statistics use a Gaussian window
    (sigma 1.5, truncated at 3.5 sigma) with population covariances. The
    index is computed per channel, away from a 5 pixel border, and
    averaged over channels.

    Returns
    -------
    value : float
        In [-1, 1], exactly 1 for identical images

    Raises
    ------
    ValueError if the images differ in shape or are smaller than the window
    '''
    x = (_as_array(x) + 1.0) / 2.0
    y = (_as_array(y) + 1.0) / 2.0
    if x.shape != y.shape:
        raise ValueError('cannot compare images of shape {0} and {1}'.format(x.shape, y.shape))
    pad = SSIM_PAD
    if x.ndim != 3 or min(x.shape[:2]) < SSIM_WINDOW:
        raise ValueError('ssim needs H x W x C images of at least {0}x{0} pixels, the size '
                         'of its Gaussian window, got {1}'.format(SSIM_WINDOW, x.shape))
    window = functools.partial(ndimage.gaussian_filter, sigma=SSIM_SIGMA,
                               truncate=SSIM_TRUNCATE, mode='reflect')
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    values = []
    for channel in range(x.shape[2]):
        a, b = x[..., channel], y[..., channel]
        mu_a, mu_b = window(a), window(b)
        var_a = window(a * a) - mu_a * mu_a
        var_b = window(b * b) - mu_b * mu_b
        cov = window(a * b) - mu_a * mu_b
        index = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)
                 / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
        values.append(index[pad:-pad, pad:-pad].mean())
    return float(np.mean(values))


def _iou(a, b):
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def _assign(scores, optimal):
    if optimal:
        rows, cols = linear_sum_assignment(scores, maximize=True)
        return dict(zip(rows.tolist(), cols.tolist()))
    matches = {}
    used = set()
    for flat in np.argsort(-scores, axis=None, kind='stable'):
        part, mask = np.unravel_index(flat, scores.shape)
        if part in matches or mask in used:
            continue
        matches[int(part)] = int(mask)
        used.add(int(mask))
    return matches


def _mask_iou_single(learned, gt_parts, optimal):
    binary = learned > MASK_THRESHOLD
    gt = gt_parts.astype(bool)
    scores = np.array([[_iou(part, mask) for mask in binary] for part in gt])
    matches = _assign(scores, optimal)
    per_part = [scores[p, matches[p]] if p in matches else 0.0 for p in range(len(gt))]
    silhouette = _iou(binary.any(axis=0), gt.any(axis=0))
    return per_part, silhouette


def mask_iou(learned, gt_parts, optimal=False):
    '''Best-match IoU between learned masks and ground-truth parts.

    Parameters
    ----------
    learned : torch.Tensor or numpy.ndarray
        ``m x h x w`` masks of one image or ``batch x m x h x w``
    gt_parts : numpy.ndarray
        ``parts x H x W`` binary masks, or with a leading batch axis
    optimal : bool, optional
        Use a linear-sum assignment instead of the greedy match by
        descending IoU

    Returns
    -------
    report : :class:`MetricReport`
        Mean over parts (and images); ``extra`` holds the per-part IoUs and
        the IoU of the silhouettes
    '''
    learned = torch.as_tensor(_as_array(learned))
    gt_parts = np.asarray(gt_parts)
    if learned.ndim == 3:
        learned = learned.unsqueeze(0)
        gt_parts = gt_parts[None]
    if learned.shape[0] != gt_parts.shape[0]:
        raise ValueError('{0} mask sets but {1} ground-truth sets'.format(
            learned.shape[0], gt_parts.shape[0]))
    upsampled = resize_broadcast(learned, *gt_parts.shape[-2:]).numpy()
    per_part, silhouettes = [], []
    for masks, gt in zip(upsampled, gt_parts):
        parts, silhouette = _mask_iou_single(masks, gt, optimal)
        per_part.append(parts)
        silhouettes.append(silhouette)
    per_part = np.array(per_part)
    names = PART_NAMES if per_part.shape[1] == len(PART_NAMES) else [
        'part_{0}'.format(p) for p in range(per_part.shape[1])]
    extra = {name: float(value) for name, value in zip(names, per_part.mean(axis=0))}
    extra['silhouette'] = float(np.mean(silhouettes))
    extra['assignment'] = 'optimal' if optimal else 'greedy'
    return MetricReport('mask_iou', per_part.mean(), len(silhouettes), extra)


def color_transfer_error(mix, appearance_src, masks_mix, masks_src,
                         normalizer='total_pixels', per_channel=False):
    '''Mean absolute difference of the per-mask colour means.

    ``mix`` is measured under ``masks_mix`` and ``appearance_src`` under
    ``masks_src``; see :func:`dlab.losses.masked_color_stats`.

    Raises
    ------
    ValueError for inconsistent shapes
    '''
    if mix.shape != appearance_src.shape:
        raise ValueError('image batches differ in shape: {0} vs {1}'.format(
            tuple(mix.shape), tuple(appearance_src.shape)))
    if masks_mix.shape != masks_src.shape or masks_mix.shape[0] != mix.shape[0]:
        raise ValueError('mask sets {0} and {1} do not fit images {2}'.format(
            tuple(masks_mix.shape), tuple(masks_src.shape), tuple(mix.shape)))
    with torch.no_grad():
        stats_mix = masked_color_stats(mix, masks_mix, normalizer, per_channel)
        stats_src = masked_color_stats(appearance_src, masks_src, normalizer, per_channel)
        error = (stats_mix.mean - stats_src.mean).abs()
    return MetricReport('color_transfer_error', error.mean().item(), mix.shape[0],
                        {'max': error.max().item()})


def _tensor(images, state):
    return torch.as_tensor(images).to(device=state.device, dtype=state.dtype)


def _pairs(dataset, n_pairs, seed):
    '''Deterministic pairs of different images, in chunks'''
    rng = np.random.default_rng(seed)
    remaining = n_pairs
    while remaining > 0:
        size = max(2, min(EVAL_CHUNK, remaining))
        batch = sample_pair_batch(dataset, size, rng)
        take = min(size, remaining)
        yield batch.images_a[:take], batch.images_b[:take]
        remaining -= take


def classifier_balance(state, dataset, n_pairs=100, seed=0):
    '''Accuracy of the feature classifier on held-out true and mixed pairs.

    A pair is predicted "true" when its score exceeds 0.5, so ties count
    as "mixed". Values near 0.5 mean the encoders fool the classifier.

    Parameters
    ----------
    state : :class:`~dlab.trainer.TrainState`
    dataset : :class:`~dlab.data.ImageDataset`
        Its held-out split is used when present
    n_pairs : int, optional
        At least 10
    seed : int, optional

    Returns
    -------
    report : :class:`MetricReport`

    Raises
    ------
    ValueError if ``n_pairs < 10``
    DatasetError if fewer than two held-out images exist
    '''
    if n_pairs < MIN_BALANCE_PAIRS:
        raise ValueError('classifier_balance needs at least {0} pairs (got {1})'.format(
            MIN_BALANCE_PAIRS, n_pairs))
    held_out = dataset.held_out()
    if len(held_out) < 2:
        raise DatasetError('classifier_balance needs at least 2 held-out images')
    net = state.net
    true_hits = false_hits = 0
    with torch.no_grad():
        for images_a, images_b in _pairs(held_out, n_pairs, seed):
            masks_a, appearance_a = encode(_tensor(images_a, state), net)
            _, appearance_b = encode(_tensor(images_b, state), net)
            true_hits += int((classify(masks_a, appearance_a, net) > 0.5).sum())
            false_hits += int((classify(masks_a, appearance_b, net) <= 0.5).sum())
    accuracy = (true_hits + false_hits) / (2.0 * n_pairs)
    return MetricReport('classifier_balance', accuracy, n_pairs,
                        {'true_pair_accuracy': true_hits / float(n_pairs),
                         'mixed_pair_accuracy': false_hits / float(n_pairs)})


def reconstruction_ssim(state, dataset):
    '''Mean SSIM between held-out images and their reconstructions'''
    images = dataset.images
    values = []
    with torch.no_grad():
        for start in range(0, len(images), EVAL_CHUNK):
            batch = _tensor(images[start:start + EVAL_CHUNK], state)
            reconstructed = transfer(batch, batch, state.net)
            values.extend(ssim(x, y) for x, y in zip(batch, reconstructed))
    return MetricReport('ssim', np.mean(values), len(values),
                        {'min': float(np.min(values)), 'max': float(np.max(values))})


def transfer_error(state, dataset, n_pairs=100, seed=0):
    '''Colour-transfer error of mixed images over sampled held-out pairs'''
    config = state.model_config
    net = state.net
    errors = []
    with torch.no_grad():
        for images_a, images_b in _pairs(dataset, n_pairs, seed):
            images_a = _tensor(images_a, state)
            images_b = _tensor(images_b, state)
            masks_a = encode_shape(images_a, net)
            masks_b = encode_shape(images_b, net)
            mixed = transfer(images_a, images_b, net)
            report = color_transfer_error(mixed, images_a, masks_b, masks_a,
                                          config.color_stat_normalizer,
                                          config.color_stats_per_channel)
            errors.append((report.value, report.n_samples))
    values, counts = np.array(errors).T
    return MetricReport('color_transfer_error', np.average(values, weights=counts),
                        int(counts.sum()))


def evaluate(state, dataset, n_pairs=100, seed=0, optimal=False):
    '''Run every applicable metric on the held-out split.

    Returns
    -------
    reports : list of :class:`MetricReport`
    notes : dict
        Why a metric was left out, keyed by metric name

    Raises
    ------
    DatasetError if the dataset has no held-out split
    ValueError if ``n_pairs < 10``
    '''
    if dataset.test is None:
        raise DatasetError('evaluation needs a test split')
    held_out = dataset.test
    balance = classifier_balance(state, dataset, n_pairs, seed)
    reports, notes = [], {}
    height, width = held_out.images.shape[1:3]
    if min(height, width) >= SSIM_WINDOW:
        reports.append(reconstruction_ssim(state, held_out))
    else:
        notes['ssim'] = 'omitted: {0}x{1} images are smaller than the {2}x{2} window'.format(
            height, width, SSIM_WINDOW)
    reports += [transfer_error(state, held_out, n_pairs, seed), balance]
    if held_out.has_ground_truth:
        with torch.no_grad():
            masks = torch.cat([encode_shape(_tensor(held_out.images[start:start + EVAL_CHUNK],
                                                    state), state.net)
                               for start in range(0, len(held_out), EVAL_CHUNK)])
        reports.append(mask_iou(masks, held_out.part_masks, optimal))
    else:
        notes['mask_iou'] = 'omitted: the dataset has no ground-truth part masks'
    for report in reports:
        log.info('{0} = {1:.4f} over {2} samples'.format(report.name, report.value,
                                                         report.n_samples))
    return reports, notes


def write_reports(reports, out_dir, notes=None):
    '''Write ``reports.json`` and a one-row-per-metric ``reports.csv``'''
    os.makedirs(out_dir, exist_ok=True)
    records = [dataclasses.asdict(report) for report in reports]
    json_path = os.path.join(out_dir, 'reports.json')
    with open(json_path, 'w', encoding='utf-8') as out:
        json.dump({'reports': records, 'notes': notes or {}}, out, indent=2)
    table = Table(rows=[(r['name'], r['value'], r['n_samples'], json.dumps(r['extra']))
                        for r in records],
                  names=('name', 'value', 'n_samples', 'extra'),
                  dtype=(str, float, int, str))
    csv_path = os.path.join(out_dir, 'reports.csv')
    table.write(csv_path, format='ascii.csv', overwrite=True)
    return json_path, csv_path
