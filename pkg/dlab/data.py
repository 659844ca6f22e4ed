'''Synthetic stick-figure sprites with ground-truth factors, folder-based
image loading and random pair sampling.

Sprites are drawn on a 2x supersampled grid. Parts are painted in the
order arms, legs, torso, head, so later parts cover earlier ones and the
ground-truth masks are disjoint.
'''
import dataclasses
import glob
import json
import os

import numpy as np
import torch
from astropy import log

from .core import DatasetError, warn
from .image import IMAGE_EXTENSIONS, Image, construct_image, save_png, to_uint8

PART_NAMES = ('head', 'torso', 'left_arm', 'right_arm', 'left_leg', 'right_leg')
NUM_PARTS = len(PART_NAMES)
HEAD, TORSO, LEFT_ARM, RIGHT_ARM, LEFT_LEG, RIGHT_LEG = range(NUM_PARTS)
PAINT_ORDER = (LEFT_ARM, RIGHT_ARM, LEFT_LEG, RIGHT_LEG, TORSO, HEAD)
SUPERSAMPLE = 2

# sampling ranges, lengths as fractions of the image height
TORSO_ASPECT_RANGE = (1.2, 2.0)
ARM_ANGLE_RANGE = (0.0, 1.2)
LEG_ANGLE_RANGE = (0.0, 0.5)
LIMB_THICKNESS_RANGE = (0.07, 0.11)
HEAD_RADIUS_RANGE = (0.06, 0.09)
TRANSLATION_RANGE = (-0.06, 0.06)
BACKGROUND_RANGE = (-0.2, 0.2)
STRIPE_FREQUENCY_RANGE = (2.0, 6.0)
STRIPE_PROBABILITY = 0.3
TORSO_WIDTH = 0.2
ARM_LENGTH = 0.26
LEG_LENGTH = 0.24
TOP_MARGIN = 0.06


@dataclasses.dataclass(frozen=True)
class ShapeParams:
    '''Articulation of a sprite. Lengths in pixels, angles in radians.

    Limb angles are measured from hanging straight down, positive outwards,
    ordered left arm, right arm, left leg, right leg.
    '''
    torso_aspect: float
    limb_angles: tuple
    limb_thickness: float
    head_radius: float
    translation: tuple


@dataclasses.dataclass(frozen=True)
class AppearanceParams:
    '''Per-part RGB colours in [-1, 1], background gray and optional stripes.

    Parts listed in ``stripe_parts`` alternate between their own colour and
    ``stripe_color`` in horizontal bands of ``stripe_frequency`` cycles per
    image height.
    '''
    part_colors: tuple
    background: float
    stripe_color: tuple = (0.0, 0.0, 0.0)
    stripe_frequency: float = 0.0
    stripe_parts: tuple = ()


@dataclasses.dataclass(frozen=True)
class SpriteSpec:
    shape_params: ShapeParams
    appearance_params: AppearanceParams

    def factors(self):
        '''JSON-friendly description of the generating factors'''
        return {'shape': dataclasses.asdict(self.shape_params),
                'appearance': dataclasses.asdict(self.appearance_params)}


def _segment_distance(px, py, ax, ay, bx, by):
    dx, dy = bx - ax, by - ay
    t = ((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy)
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(px - (ax + t * dx), py - (ay + t * dy))


def _part_regions(spec, h, w):
    '''Boolean coverage of every part on the supersampled grid'''
    shape = spec.shape_params
    ys = (np.arange(h * SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    xs = (np.arange(w * SUPERSAMPLE) + 0.5) / SUPERSAMPLE - w / 2.0
    py, px = np.meshgrid(ys, xs, indexing='ij')
    tx, ty = shape.translation
    px = px - tx
    py = py - ty

    radius = shape.head_radius
    half_thick = shape.limb_thickness / 2.0
    torso_w = TORSO_WIDTH * w
    torso_h = torso_w * shape.torso_aspect
    head_y = TOP_MARGIN * h + radius
    torso_top = head_y + radius
    torso_bottom = torso_top + torso_h

    regions = {}
    regions[HEAD] = px ** 2 + (py - head_y) ** 2 <= radius ** 2
    regions[TORSO] = ((np.abs(px) <= torso_w / 2.0)
                      & (py >= torso_top) & (py <= torso_bottom))
    limbs = (
        (LEFT_ARM, -1.0, torso_w / 2.0 + half_thick, torso_top + half_thick, ARM_LENGTH),
        (RIGHT_ARM, 1.0, torso_w / 2.0 + half_thick, torso_top + half_thick, ARM_LENGTH),
        (LEFT_LEG, -1.0, torso_w / 4.0, torso_bottom, LEG_LENGTH),
        (RIGHT_LEG, 1.0, torso_w / 4.0, torso_bottom, LEG_LENGTH),
    )
    for (part, side, offset, top, length), angle in zip(limbs, shape.limb_angles):
        ax, ay = side * offset, top
        bx = ax + side * np.sin(angle) * length * h
        by = ay + np.cos(angle) * length * h
        regions[part] = _segment_distance(px, py, ax, ay, bx, by) <= half_thick
    return regions


def render_sprite(spec, h, w, seed=0):
    '''Rasterise a sprite with 2x supersampling.

    Parameters
    ----------
    spec : :class:`SpriteSpec`
    h, w : int
        Output size in pixels
    seed : int, optional
        Sets the phase of the stripe texture

    Returns
    -------
    image : numpy.ndarray
        ``h x w x 3`` float32 in [-1, 1]
    part_masks : numpy.ndarray
        ``6 x h x w`` uint8 in {0, 1}, a pixel belongs to the part covering
        most of it when the figure covers at least half of it

    Raises
    ------
    DatasetError if a part falls completely outside the canvas
    '''
    appearance = spec.appearance_params
    regions = _part_regions(spec, h, w)
    labels = np.full((h * SUPERSAMPLE, w * SUPERSAMPLE), -1, dtype=np.int64)
    for part in PAINT_ORDER:
        if not regions[part].any():
            raise DatasetError('part {0!r} lies completely outside the {1}x{2} '
                               'canvas'.format(PART_NAMES[part], h, w))
        labels[regions[part]] = part

    phase = np.random.default_rng(seed).uniform(0.0, 2.0 * np.pi)
    ys = (np.arange(h * SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    stripe_on = np.sin(2.0 * np.pi * appearance.stripe_frequency * ys / h + phase) < 0
    stripe_on = np.broadcast_to(stripe_on[:, None], labels.shape)

    canvas = np.empty(labels.shape + (3,), dtype=np.float64)
    canvas[...] = appearance.background
    for part in range(NUM_PARTS):
        where = labels == part
        canvas[where] = appearance.part_colors[part]
        if part in appearance.stripe_parts and appearance.stripe_frequency > 0:
            canvas[where & stripe_on] = appearance.stripe_color

    image = canvas.reshape(h, SUPERSAMPLE, w, SUPERSAMPLE, 3).mean(axis=(1, 3))
    coverage = np.stack([(labels == part) for part in range(NUM_PARTS)]).astype(np.float64)
    coverage = coverage.reshape(NUM_PARTS, h, SUPERSAMPLE, w, SUPERSAMPLE).mean(axis=(2, 4))
    figure = coverage.sum(axis=0) >= 0.5
    owner = np.argmax(coverage, axis=0)
    part_masks = np.zeros((NUM_PARTS, h, w), dtype=np.uint8)
    for part in range(NUM_PARTS):
        part_masks[part] = (owner == part) & figure
    return image.astype(np.float32), part_masks


def sample_sprite_spec(rng, h, w):
    '''Draw shape and appearance factors independently from uniform ranges'''
    shape = ShapeParams(
        torso_aspect=float(rng.uniform(*TORSO_ASPECT_RANGE)),
        limb_angles=tuple(float(a) for a in np.concatenate([
            rng.uniform(*ARM_ANGLE_RANGE, size=2), rng.uniform(*LEG_ANGLE_RANGE, size=2)])),
        limb_thickness=float(rng.uniform(*LIMB_THICKNESS_RANGE) * h),
        head_radius=float(rng.uniform(*HEAD_RADIUS_RANGE) * h),
        translation=tuple(float(t) for t in rng.uniform(*TRANSLATION_RANGE, size=2)
                          * np.array([w, h])),
    )
    colors = rng.uniform(-1.0, 1.0, size=(NUM_PARTS, 3))
    striped = rng.uniform(size=NUM_PARTS) < STRIPE_PROBABILITY
    appearance = AppearanceParams(
        part_colors=tuple(tuple(float(c) for c in row) for row in colors),
        background=float(rng.uniform(*BACKGROUND_RANGE)),
        stripe_color=tuple(float(c) for c in rng.uniform(-1.0, 1.0, size=3)),
        stripe_frequency=float(rng.uniform(*STRIPE_FREQUENCY_RANGE)) if striped.any() else 0.0,
        stripe_parts=tuple(int(p) for p in np.flatnonzero(striped)),
    )
    return SpriteSpec(shape, appearance)


class ImageDataset(object):
    '''Read-only collection of normalised images.

    Attributes
    ----------
    images : numpy.ndarray
        ``n x H x W x 3`` float32 in [-1, 1]
    ids : list of str
        Source identifiers, unique within the dataset
    part_masks : numpy.ndarray or None
        ``n x 6 x H x W`` ground truth, synthetic datasets only
    factors : list of :class:`SpriteSpec` or None
    test : :class:`ImageDataset` or None
        Held-out split
    n_skipped : int
        Files that could not be read
    '''

    def __init__(self, images, ids, part_masks=None, factors=None, test=None,
                 n_skipped=0):
        self.images = images
        self.ids = list(ids)
        self.part_masks = part_masks
        self.factors = factors
        self.test = test
        self.n_skipped = n_skipped

    def __len__(self):
        return len(self.ids)

    @property
    def has_ground_truth(self):
        return self.part_masks is not None

    def held_out(self):
        '''The test split when there is one, otherwise the dataset itself'''
        return self.test if self.test is not None else self


def _render_many(n, h, w, rng, prefix):
    images = np.empty((n, h, w, 3), dtype=np.float32)
    masks = np.empty((n, NUM_PARTS, h, w), dtype=np.uint8)
    specs = []
    for index in range(n):
        spec = sample_sprite_spec(rng, h, w)
        images[index], masks[index] = render_sprite(spec, h, w, seed=int(rng.integers(2 ** 31)))
        specs.append(spec)
    ids = ['{0}{1:06d}'.format(prefix, index) for index in range(n)]
    return ImageDataset(images, ids, part_masks=masks, factors=specs)


def generate_dataset(n, h, w, seed=0, n_test=None):
    '''Generate ``n`` training sprites and a held-out split.

    Parameters
    ----------
    n : int
        Training sprites, at least 2
    h, w : int
        Image size
    seed : int, optional
    n_test : int, optional
        Held-out sprites, default ``max(2, n // 5)``

    Returns
    -------
    dataset : :class:`ImageDataset`

    Raises
    ------
    DatasetError if ``n < 2``
    '''
    if n < 2:
        raise DatasetError('need ≥ 2 samples for pair training (got n = {0})'.format(n))
    train_rng, test_rng = [np.random.default_rng(s)
                           for s in np.random.SeedSequence(seed).spawn(2)]
    dataset = _render_many(n, h, w, train_rng, 'sprite-')
    dataset.test = _render_many(n_test or max(2, n // 5), h, w, test_rng, 'sprite-test-')
    log.info('generated {0} sprites ({1} held out) at {2}x{3}'.format(
        n, len(dataset.test), h, w))
    return dataset


def _list_images(directory):
    files = [path for path in glob.glob(os.path.join(directory, '*'))
             if path.lower().endswith(IMAGE_EXTENSIONS)]
    return sorted(files, key=os.path.basename)


def _load_split(directory, h, w, image_class):
    images, ids, skipped = [], [], 0
    for path in _list_images(directory):
        try:
            images.append(construct_image(path, h, w, image_class=image_class))
        except (OSError, ValueError, SyntaxError, RuntimeError) as err:
            warn('Skipping unreadable image {0}: {1}'.format(path, err))
            skipped += 1
            continue
        ids.append(os.path.basename(path))
    return images, ids, skipped


def load_folder(path, h, w, image_class=Image):
    '''Load ``<path>/train`` and ``<path>/test`` image folders.

    Parameters
    ----------
    path : str
        Dataset root
    h, w : int
        Resolution every image is resized to (aspect ratio is not kept)
    image_class : type, optional
        :class:`~dlab.image.Image` or a subclass with custom hooks

    Returns
    -------
    dataset : :class:`ImageDataset`
        The train split with ``test`` holding the test split

    Raises
    ------
    DatasetError if a split is missing or contains no readable image
    '''
    splits = {}
    for split in ('train', 'test'):
        directory = os.path.join(path, split)
        if not os.path.isdir(directory):
            raise DatasetError('dataset {0!r} has no {1}/ split'.format(path, split))
        images, ids, skipped = _load_split(directory, h, w, image_class)
        if not images:
            raise DatasetError('split {0}/ of {1!r} contains no readable images'.format(
                split, path))
        splits[split] = ImageDataset(np.stack(images), ids, n_skipped=skipped)
        log.info('loaded {0} {1} images from {2} ({3} skipped)'.format(
            len(ids), split, directory, skipped))
    dataset = splits['train']
    dataset.test = splits['test']
    return dataset


@dataclasses.dataclass
class PairBatch:
    '''Appearance side ``a`` and shape side ``b`` of a mini-batch'''
    images_a: torch.Tensor
    images_b: torch.Tensor
    meta_a: list
    meta_b: list


def sample_pair_batch(dataset, batch_size, rng, device='cpu'):
    '''Draw a mini-batch of pairs of different images.

    Side ``a`` is drawn uniformly with replacement; side ``b`` is a fresh
    draw in which every collision with ``a`` is redrawn uniformly from the
    remaining images, so that ``a[i] != b[i]``.

    Parameters
    ----------
    dataset : :class:`ImageDataset`
    batch_size : int
    rng : numpy.random.Generator
        Advanced in place
    device : str, optional

    Returns
    -------
    batch : :class:`PairBatch`

    Raises
    ------
    DatasetError if the dataset has fewer than two images or
    ``batch_size < 2``
    '''
    n = len(dataset)
    if n < 2:
        raise DatasetError('dataset too small for pair sampling ({0} images)'.format(n))
    if batch_size < 2:
        raise DatasetError('batch_size must be ≥ 2 (got {0})'.format(batch_size))
    index_a = rng.integers(n, size=batch_size)
    index_b = rng.integers(n, size=batch_size)
    clash = index_a == index_b
    index_b[clash] = (index_a[clash] + rng.integers(1, n, size=int(clash.sum()))) % n
    images_a = torch.from_numpy(np.ascontiguousarray(dataset.images[index_a])).to(device)
    images_b = torch.from_numpy(np.ascontiguousarray(dataset.images[index_b])).to(device)
    return PairBatch(images_a, images_b,
                     [dataset.ids[i] for i in index_a], [dataset.ids[i] for i in index_b])


def rle_encode(mask):
    '''Run-length encode a binary mask in row-major order.

    Returns ``{'shape': [h, w], 'counts': [...]}`` where counts alternate
    between runs of zeros and ones, starting with zeros.
    '''
    flat = np.asarray(mask, dtype=np.uint8).ravel()
    changes = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0] == 1:
        counts = [0] + counts
    return {'shape': list(np.shape(mask)), 'counts': [int(c) for c in counts]}


def rle_decode(encoded):
    '''Inverse of :func:`rle_encode`'''
    values = np.arange(len(encoded['counts'])) % 2
    flat = np.repeat(values, encoded['counts']).astype(np.uint8)
    return flat.reshape(encoded['shape'])


def export_dataset(dataset, out_dir):
    '''Write every image as PNG with a JSON sidecar of factors and masks.

    The held-out split goes to ``<out_dir>/test``, the rest to
    ``<out_dir>/train``, so the export can be read back by
    :func:`load_folder`.
    '''
    splits = [('train', dataset)]
    if dataset.test is not None:
        splits.append(('test', dataset.test))
    for split, subset in splits:
        directory = os.path.join(out_dir, split)
        os.makedirs(directory, exist_ok=True)
        for index, ident in enumerate(subset.ids):
            save_png(os.path.join(directory, ident + '.png'), to_uint8(subset.images[index]))
            sidecar = {'id': ident}
            if subset.factors is not None:
                sidecar['factors'] = subset.factors[index].factors()
            if subset.part_masks is not None:
                sidecar['part_masks'] = {PART_NAMES[p]: rle_encode(subset.part_masks[index, p])
                                         for p in range(NUM_PARTS)}
            with open(os.path.join(directory, ident + '.json'), 'w', encoding='utf-8') as out:
                json.dump(sidecar, out, indent=1)
    log.info('exported dataset to {0}'.format(out_dir))
