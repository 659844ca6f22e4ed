'''Command line entry point: ``dlab <command> [options]``.

Exit codes are 0 on success, 2 for usage, configuration and data errors
and 3 when training aborts on a non-finite loss.
'''
import argparse
import dataclasses
import os
import sys

import torch
from astropy import log

from . import __version__
from .core import (ModelConfig, NonFiniteLossError, TrainConfig, apply_overrides,
                   load_config, preset)
from .data import export_dataset, generate_dataset, load_folder
from .image import construct_image, grayscale, mask_to_uint8, save_png, tile_grid, to_uint8
from .metrics import evaluate, write_reports
from .networks import decode, encode_shape, resize_broadcast, transfer
from .trainer import load_checkpoint, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3


def _overrides(args):
    overrides = list(args.set or [])
    if getattr(args, 'seed', None) is not None:
        overrides.append('seed={0}'.format(args.seed))
    return overrides


def _configs(args):
    '''Defaults < preset < file < overrides'''
    if getattr(args, 'config', None):
        return load_config(args.config, args.preset, _overrides(args))
    configs = preset(args.preset) if args.preset else (ModelConfig(), TrainConfig())
    return apply_overrides(*configs, _overrides(args))


def _dataset(args, model_config, train_config):
    if args.data:
        return load_folder(args.data, model_config.image_height, model_config.image_width)
    return generate_dataset(args.synthetic, model_config.image_height,
                            model_config.image_width, train_config.seed)


def _load_image(path, state):
    config = state.model_config
    data = construct_image(path, config.image_height, config.image_width)
    return torch.as_tensor(data[None]).to(device=state.device, dtype=state.dtype)


def _image_tile(batch):
    return to_uint8(batch[0].detach().cpu().numpy())


def cmd_train(args):
    '''Train on a folder dataset or on ``--synthetic N`` sprites'''
    model_config, train_config = _configs(args)
    dataset = _dataset(args, model_config, train_config)
    state = None
    if args.checkpoint:
        state = load_checkpoint(args.checkpoint, model_config)
        state.train_config = train_config
    train(model_config, train_config, dataset, out_dir=args.out, state=state,
          perceptual_weights=args.perceptual_weights)
    return EXIT_OK


def cmd_reconstruct(args):
    '''Decode an image from its own shape and appearance'''
    state = load_checkpoint(args.checkpoint)
    image = _load_image(args.input, state)
    with torch.no_grad():
        result = transfer(image, image, state.net)
    path = os.path.join(args.out, 'reconstruction.png')
    save_png(path, _image_tile(result))
    log.info('wrote {0}'.format(path))
    return EXIT_OK


def cmd_transfer(args):
    '''Render the appearance of one image with the shape of another'''
    state = load_checkpoint(args.checkpoint)
    appearance = _load_image(args.appearance, state)
    shape = _load_image(args.shape, state)
    if args.grayscale_shape:
        shape = torch.as_tensor(grayscale(shape[0].cpu().numpy())[None]).to(shape)
    with torch.no_grad():
        result = transfer(appearance, shape, state.net)
    panels = [_image_tile(appearance), _image_tile(shape), _image_tile(result)]
    save_png(os.path.join(args.out, 'transfer.png'), panels[2])
    save_png(os.path.join(args.out, 'transfer_grid.png'), tile_grid(panels, ncols=3))
    log.info('wrote transfer result and panel grid to {0}'.format(args.out))
    return EXIT_OK


def visualize_masks(state, image):
    '''Upsampled mask tiles and the zero-appearance decode of one image.

    Returns
    -------
    tiles : numpy.ndarray
        ``num_masks x H x W`` uint8
    decoded : numpy.ndarray
        ``H x W x 3`` uint8
    '''
    with torch.no_grad():
        masks = encode_shape(image, state.net)
        zeros = masks.new_zeros(masks.shape[:2] + (state.model_config.appearance_dim,))
        decoded = decode(masks, zeros, state.net)
        upsampled = resize_broadcast(masks, image.shape[1], image.shape[2])
    return mask_to_uint8(upsampled[0].cpu().numpy()), _image_tile(decoded)


def cmd_visualize_masks(args):
    '''Write the mask grid and the zero-appearance decode'''
    state = load_checkpoint(args.checkpoint)
    tiles, decoded = visualize_masks(state, _load_image(args.input, state))
    save_png(os.path.join(args.out, 'masks.png'), tile_grid(tiles))
    save_png(os.path.join(args.out, 'zero_appearance.png'), decoded)
    log.info('wrote {0} mask tiles to {1}'.format(len(tiles), args.out))
    return EXIT_OK


def cmd_eval(args):
    '''Write the metric reports for the held-out split'''
    state = load_checkpoint(args.checkpoint)
    seed = state.train_config.seed if args.seed is None else args.seed
    dataset = _dataset(args, state.model_config,
                       dataclasses.replace(state.train_config, seed=seed))
    reports, notes = evaluate(state, dataset, args.n_pairs, seed,
                              optimal=args.optimal_iou)
    write_reports(reports, args.out, notes)
    for name, note in notes.items():
        log.info('{0}: {1}'.format(name, note))
    return EXIT_OK


def cmd_make_sprites(args):
    '''Export a synthetic sprite dataset as PNG files with JSON sidecars'''
    model_config, train_config = _configs(args)
    dataset = generate_dataset(args.synthetic, model_config.image_height,
                               model_config.image_width, train_config.seed)
    export_dataset(dataset, args.out)
    return EXIT_OK


def _add_common(parser, config_required=False):
    parser.add_argument('--config', required=config_required,
                        help='flat key = value configuration file')
    parser.add_argument('--preset', choices=('desk', 'paper'),
                        help='named defaults applied before the configuration file')
    parser.add_argument('--set', action='append', metavar='KEY=VALUE',
                        help='configuration override, repeatable')
    parser.add_argument('--seed', type=int, help='overrides the configured seed')
    parser.add_argument('--out', required=True, help='output directory')


def _add_data(parser, required=True):
    source = parser.add_mutually_exclusive_group(required=required)
    source.add_argument('--synthetic', type=int, metavar='N',
                        help='generate N synthetic sprites')
    source.add_argument('--data', help='folder with train/ and test/ image splits')


def build_parser():
    parser = argparse.ArgumentParser(
        prog='dlab', description='Unsupervised shape and appearance disentanglement')
    parser.add_argument('--version', action='version', version=__version__)
    commands = parser.add_subparsers(dest='command', required=True)

    sub = commands.add_parser('train', help='train a model')
    _add_common(sub, config_required=True)
    _add_data(sub)
    sub.add_argument('--checkpoint', help='resume from this checkpoint')
    sub.add_argument('--perceptual-weights',
                     help='container with imported perceptual extractor weights')
    sub.set_defaults(func=cmd_train)

    sub = commands.add_parser('reconstruct', help='reconstruct one image')
    sub.add_argument('--checkpoint', required=True)
    sub.add_argument('--input', required=True)
    sub.add_argument('--out', required=True)
    sub.set_defaults(func=cmd_reconstruct)

    sub = commands.add_parser('transfer', help='combine appearance and shape of two images')
    sub.add_argument('--checkpoint', required=True)
    sub.add_argument('--appearance', required=True)
    sub.add_argument('--shape', required=True)
    sub.add_argument('--grayscale-shape', action='store_true',
                     help='convert the shape source to grayscale before encoding')
    sub.add_argument('--out', required=True)
    sub.set_defaults(func=cmd_transfer)

    sub = commands.add_parser('visualize-masks', help='show the learned masks of an image')
    sub.add_argument('--checkpoint', required=True)
    sub.add_argument('--input', required=True)
    sub.add_argument('--out', required=True)
    sub.set_defaults(func=cmd_visualize_masks)

    sub = commands.add_parser('eval', help='evaluate a checkpoint on held-out data')
    sub.add_argument('--checkpoint', required=True)
    _add_data(sub)
    sub.add_argument('--n-pairs', type=int, default=100)
    sub.add_argument('--seed', type=int)
    sub.add_argument('--optimal-iou', action='store_true',
                     help='optimal instead of greedy mask assignment')
    sub.add_argument('--out', required=True)
    sub.set_defaults(func=cmd_eval)

    sub = commands.add_parser('make-sprites', help='export a synthetic dataset')
    _add_common(sub)
    sub.add_argument('--synthetic', type=int, required=True, metavar='N')
    sub.set_defaults(func=cmd_make_sprites)
    return parser


def main(argv=None):
    '''Parse ``argv`` and run the command; returns the exit code'''
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NonFiniteLossError as err:
        log.error(str(err))
        return EXIT_NUMERIC
    except (ValueError, OSError) as err:
        log.error(str(err))
        return EXIT_USAGE


if __name__ == '__main__':
    sys.exit(main())
