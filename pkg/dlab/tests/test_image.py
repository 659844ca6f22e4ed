from unittest import mock

import numpy as np
import pytest
from astropy.io import fits
from skimage import io as skio

from ..image import (Image, construct_image, grayscale, mask_to_uint8, save_png,
                     tile_grid, to_uint8)


def generate_image(*shape):
    return np.random.randint(0, 256, size=shape).astype(np.uint8)


def test_image_stores_parameters():
    image = Image(data='a', header='b')
    assert image.raw_image == 'a'
    assert image.header == 'b'


def test_header_is_optional():
    image = Image(generate_image(8, 8, 3))
    assert image.header == {}


def test_resize_requires_rgb():
    image = Image(generate_image(8, 8, 3))
    with pytest.raises(RuntimeError) as err:
        image.resize(4, 4)
    assert 'Please ensure the `#to_rgb` method has been called' in str(err.value)


class TestToRgb(object):

    def test_uint8_scaled_to_unit(self):
        data = np.array([[[0, 255, 51]]], dtype=np.uint8)
        image = Image(data).to_rgb()
        np.testing.assert_allclose(image.rgb, [[[0.0, 1.0, 0.2]]])

    def test_uint16_uses_full_range(self):
        data = np.full((2, 2, 3), 65535, dtype=np.uint16)
        assert Image(data).to_rgb().rgb.max() == 1.0

    def test_float_counts_are_scaled(self):
        data = np.array([[100.0, 50.0]])
        image = Image(data).to_rgb()
        np.testing.assert_allclose(image.rgb[0, :, 0], [1.0, 0.5])

    def test_grayscale_becomes_three_channels(self):
        assert Image(generate_image(5, 7)).to_rgb().rgb.shape == (5, 7, 3)

    def test_rgba_drops_alpha(self):
        assert Image(generate_image(5, 7, 4)).to_rgb().rgb.shape == (5, 7, 3)

    def test_unsupported_shape(self):
        with pytest.raises(ValueError, match='Unsupported image shape'):
            Image(generate_image(2, 5, 7, 3)).to_rgb()

    def test_returns_self(self):
        image = Image(generate_image(4, 4, 3))
        assert image.to_rgb() is image


class TestNormalisation(object):

    def test_maps_to_symmetric_range(self):
        data = np.array([[[0, 255, 0]]], dtype=np.uint8)
        image = Image(data).to_rgb().resize(1, 1).normalise()
        np.testing.assert_array_equal(image.normalised, [[[-1.0, 1.0, -1.0]]])
        assert image.normalised.dtype == np.float32

    def test_resize_changes_shape_only(self):
        image = Image(generate_image(20, 10, 3)).to_rgb().resize(8, 8).normalise()
        assert image.normalised.shape == (8, 8, 3)
        assert image.normalised.min() >= -1.0
        assert image.normalised.max() <= 1.0


class TestConstructImage(object):

    def test_png(self, tmpdir):
        filename = str(tmpdir.join('a.png'))
        skio.imsave(filename, generate_image(12, 12, 3), check_contrast=False)
        data = construct_image(filename, 8, 8)
        assert data.shape == (8, 8, 3)

    def test_fits_channels_first(self, tmpdir):
        filename = str(tmpdir.join('a.fits'))
        cube = np.zeros((3, 6, 4), dtype=np.float32)
        cube[0] = 1.0
        fits.PrimaryHDU(cube).writeto(filename)
        data = construct_image(filename, 6, 4)
        assert data.shape == (6, 4, 3)
        np.testing.assert_array_equal(data[..., 0], 1.0)
        np.testing.assert_array_equal(data[..., 1], -1.0)

    def test_fits_header_is_kept(self, tmpdir):
        filename = str(tmpdir.join('b.fits'))
        hdu = fits.PrimaryHDU(np.ones((4, 4)))
        hdu.header['OBJECT'] = 'sprite'
        hdu.writeto(filename)
        assert Image.from_file(filename).header['OBJECT'] == 'sprite'

    def test_custom_image_class_hooks(self, tmpdir):
        filename = str(tmpdir.join('a.png'))
        skio.imsave(filename, generate_image(8, 8, 3), check_contrast=False)
        with mock.patch.object(Image, 'preconstruct_hook') as pre, \
                mock.patch.object(Image, 'postconstruct_hook') as post:
            construct_image(filename, 8, 8)
        assert pre.call_count == 1
        assert post.call_count == 1

    def test_image_class_is_used(self, tmpdir):
        filename = str(tmpdir.join('a.png'))
        skio.imsave(filename, generate_image(8, 8, 3), check_contrast=False)

        class Inverted(Image):
            def postconstruct_hook(self):
                self.normalised = -self.normalised

        plain = construct_image(filename, 8, 8)
        inverted = construct_image(filename, 8, 8, image_class=Inverted)
        np.testing.assert_array_equal(inverted, -plain)


class TestQuantisation(object):

    def test_to_uint8_endpoints(self):
        np.testing.assert_array_equal(to_uint8(np.array([-1.0, 0.0, 1.0])), [0, 128, 255])

    def test_mask_one_maps_to_255(self):
        np.testing.assert_array_equal(mask_to_uint8(np.array([0.0, 0.5, 1.0])),
                                      [0, 128, 255])

    def test_grayscale_has_equal_channels(self):
        data = np.random.uniform(-1, 1, size=(4, 4, 3))
        gray = grayscale(data)
        np.testing.assert_allclose(gray[..., 0], gray[..., 2])
        assert gray.min() >= -1.0 and gray.max() <= 1.0


def test_save_png_round_trip(tmpdir):
    data = generate_image(6, 5, 3)
    filename = str(tmpdir.join('nested', 'out.png'))
    save_png(filename, data)
    np.testing.assert_array_equal(skio.imread(filename), data)


@pytest.mark.parametrize('count, ncols, expected', [
    (4, None, (2 * 8 + 3 * 2, 2 * 8 + 3 * 2)),
    (3, 3, (8 + 2 * 2, 3 * 8 + 4 * 2)),
])
def test_tile_grid_shape(count, ncols, expected):
    tiles = np.zeros((count, 8, 8), dtype=np.uint8)
    assert tile_grid(tiles, ncols=ncols).shape == expected
