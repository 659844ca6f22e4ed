import os

import numpy as np
from astropy.io import fits
from skimage import io as skio
from skimage.color import gray2rgb, rgb2gray, rgba2rgb
from skimage.transform import resize
from skimage.util import montage

# pylint: disable=invalid-name

FITS_EXTENSIONS = ('.fits', '.fit', '.fts')
IMAGE_EXTENSIONS = ('.png', '.jpg', '.jpeg') + FITS_EXTENSIONS


class Image(object):
    '''Low level class which turns raw image data into a network-ready
    ``height x width x 3`` array with values in [-1, 1].

    Subclass it and override the hooks to add custom processing; the
    subclass can then be handed to :func:`dlab.data.load_folder`.
    '''

    def __init__(self, data, header=None):
        self.raw_image = data
        self.header = header or {}

        self.rgb = None
        self.resized = None
        self.normalised = None

    @classmethod
    def from_file(cls, filename):
        '''Read PNG, JPEG or FITS data from disc.

        Parameters
        ----------
        filename : str
            Path to the image

        Returns
        -------
        image : :class:`~dlab.image.Image`

        Raises
        ------
        OSError or ValueError if the file cannot be decoded
        '''
        if filename.lower().endswith(FITS_EXTENSIONS):
            with fits.open(filename) as hdulist:
                hdu = hdulist[0]
                data = np.asarray(hdu.data)
                header = dict(hdu.header)
            # FITS stores channels first
            if data.ndim == 3 and data.shape[0] in (3, 4):
                data = np.moveaxis(data, 0, -1)
            return cls(data, header)
        return cls(skio.imread(filename))

    def to_rgb(self):
        '''Convert grayscale or RGBA data to three float channels in [0, 1]

        Returns
        -------
        self : :class:`~dlab.image.Image`
        '''
        data = np.asarray(self.raw_image)
        if np.issubdtype(data.dtype, np.integer):
            data = data.astype(np.float64) / np.iinfo(data.dtype).max
        else:
            data = data.astype(np.float64)
            peak = np.nanmax(data) if data.size else 1.0
            # float data outside [0, 1] is treated as counts
            if peak > 1.0:
                data = data / peak
        if data.ndim == 2:
            data = gray2rgb(data)
        elif data.ndim == 3 and data.shape[-1] == 4:
            data = rgba2rgb(data)
        elif data.ndim == 3 and data.shape[-1] == 1:
            data = gray2rgb(data[..., 0])
        if data.ndim != 3 or data.shape[-1] != 3:
            raise ValueError('Unsupported image shape {0}'.format(np.shape(self.raw_image)))
        self.rgb = np.clip(data, 0.0, 1.0)
        return self

    def resize(self, height, width):
        '''Resize directly to ``height x width``, ignoring the aspect ratio

        Returns
        -------
        self : :class:`~dlab.image.Image`

        Raises
        ------
        RuntimeError if ``to_rgb`` has not been called
        '''
        if self.rgb is None:
            raise RuntimeError('RGB data has not been computed. '
                               'Please ensure the `#to_rgb` method has been called')
        if self.rgb.shape[:2] == (height, width):
            self.resized = self.rgb
        else:
            self.resized = resize(self.rgb, (height, width), order=1, mode='edge',
                                  anti_aliasing=True)
        return self

    def normalise(self):
        '''Map [0, 1] intensities onto [-1, 1]

        Returns
        -------
        self : :class:`~dlab.image.Image`
        '''
        region = self.resized if self.resized is not None else self.rgb
        if region is None:
            raise RuntimeError('Image has not been converted. '
                               'Please call the #to_rgb method')
        self.normalised = np.clip(region * 2.0 - 1.0, -1.0, 1.0).astype(np.float32)
        return self

    def preconstruct_hook(self):
        '''Hook to modify the class before any standard processing

        To add functionality, alter :py:attr:`~dlab.image.Image.raw_image`
        '''
        pass

    def postconstruct_hook(self):
        '''Hook to modify the class after any standard processing

        To add functionality, alter :py:attr:`~dlab.image.Image.normalised`
        '''
        pass


def construct_image(filename, height, width, image_class=Image):
    '''Run the full processing chain of ``image_class`` on one file.

    Parameters
    ----------
    filename : str
        Image to read
    height, width : int
        Target resolution
    image_class : type, optional
        :class:`~dlab.image.Image` or a subclass

    Returns
    -------
    data : numpy.ndarray
        ``height x width x 3`` float32 array in [-1, 1]
    '''
    image = image_class.from_file(filename)
    image.preconstruct_hook()
    image.to_rgb()
    image.resize(height, width)
    image.normalise()
    image.postconstruct_hook()
    return image.normalised


def grayscale(data):
    '''Replace each pixel of a [-1, 1] RGB array by its luminance'''
    unit = (np.asarray(data, dtype=np.float64) + 1.0) / 2.0
    gray = rgb2gray(unit)
    return (gray2rgb(gray) * 2.0 - 1.0).astype(np.float32)


def to_uint8(data):
    '''Quantise a [-1, 1] image to 8 bits'''
    unit = (np.clip(np.asarray(data, dtype=np.float64), -1.0, 1.0) + 1.0) / 2.0
    return np.round(unit * 255.0).astype(np.uint8)


def mask_to_uint8(mask):
    '''Quantise a [0, 1] mask to 8 bits, so that 1 maps to 255'''
    unit = np.clip(np.asarray(mask, dtype=np.float64), 0.0, 1.0)
    return np.round(unit * 255.0).astype(np.uint8)


def save_png(filename, data):
    '''Write an 8 bit array (gray or RGB) as PNG, creating parent folders'''
    directory = os.path.dirname(os.path.abspath(filename))
    os.makedirs(directory, exist_ok=True)
    skio.imsave(filename, data, check_contrast=False)


def tile_grid(tiles, ncols=None, padding=2, fill=0):
    '''Arrange equally sized 8 bit tiles (gray or RGB) into one image'''
    tiles = np.asarray(tiles)
    count = tiles.shape[0]
    ncols = ncols or int(np.ceil(np.sqrt(count)))
    nrows = int(np.ceil(count / float(ncols)))
    channel_axis = -1 if tiles.ndim == 4 else None
    if channel_axis is not None:
        fill = (fill,) * tiles.shape[-1]
    grid = montage(tiles, grid_shape=(nrows, ncols), padding_width=padding,
                   fill=fill, channel_axis=channel_axis)
    return grid.astype(np.uint8)
