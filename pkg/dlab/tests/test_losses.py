import dataclasses
import functools

import pytest
import torch

from ..core import TrainConfig
from ..losses import (ColorStats, LossBreakdown, classifier_adv_loss, color_consistency_loss,
                      encoder_adv_loss, masked_color_stats, reconstruction_loss, total_loss)
from ..networks import classify, decode, encode, encode_shape, frozen, init_params
from ..perceptual import FeaturePyramid, extract_features, make_extractor
from .helpers import finite_difference_errors, random_images, tiny_model_config

DOUBLE = torch.float64


def identity_pyramid(images, weight=1.0):
    return FeaturePyramid([images], [weight])


class TestReconstruction(object):

    def test_identical_images(self):
        images = random_images(2, 8, 8)
        extractor = make_extractor(seed=0, num_layers=2, base_channels=4)
        pyramidizer = functools.partial(extract_features, extractor=extractor)
        assert reconstruction_loss(images, images.clone(), pyramidizer).item() == 0.0

    def test_identity_layer_by_hand(self):
        original = torch.full((1, 4, 4, 3), 0.5, dtype=DOUBLE)
        reconstructed = torch.full((1, 4, 4, 3), 0.25, dtype=DOUBLE)
        assert reconstruction_loss(original, reconstructed, identity_pyramid).item() == 0.25

    def test_linear_in_layer_weights(self):
        original = random_images(2, 4, 4, seed=1, dtype=DOUBLE)
        reconstructed = random_images(2, 4, 4, seed=2, dtype=DOUBLE)
        single = reconstruction_loss(original, reconstructed, identity_pyramid)
        double = reconstruction_loss(original, reconstructed,
                                     functools.partial(identity_pyramid, weight=2.0))
        assert double.item() == 2.0 * single.item()

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match='cannot compare'):
            reconstruction_loss(torch.zeros(1, 4, 4, 3), torch.zeros(1, 8, 8, 3),
                                identity_pyramid)


@pytest.mark.parametrize('true, false, expected', [
    (1.0, 0.0, 0.0),
    (0.5, 0.5, 0.5),
    (0.0, 1.0, 2.0),
])
def test_classifier_adv_loss(true, false, expected):
    loss = classifier_adv_loss(torch.full((4,), true), torch.full((4,), false))
    assert loss.item() == expected


class TestEncoderAdvLoss(object):

    def test_literal_minimum_at_half(self):
        scores = torch.linspace(0.0, 1.0, 101, dtype=DOUBLE)
        values = [encoder_adv_loss(s[None], s[None], 'literal_eq3').item() for s in scores]
        assert min(values) == 0.5
        assert values.index(0.5) == 50

    def test_literal_at_one(self):
        assert encoder_adv_loss(torch.ones(3), torch.zeros(3), 'literal_eq3').item() == 1.0

    def test_corrected_ignores_true_pair(self):
        ones = torch.ones(3)
        assert encoder_adv_loss(torch.zeros(3), ones, 'corrected_eq3').item() == 0.0
        assert encoder_adv_loss(ones, torch.zeros(3), 'corrected_eq3').item() == 1.0

    def test_unknown_mode(self):
        with pytest.raises(ValueError, match='adv_loss_mode'):
            encoder_adv_loss(torch.ones(1), torch.ones(1), 'wgan')


class TestColorStats(object):

    image = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=DOUBLE)[None, :, :, None].repeat(
        1, 1, 1, 3)

    def stats(self, mask, normalizer='total_pixels'):
        masks = torch.tensor(mask, dtype=DOUBLE)[None, None]
        return masked_color_stats(self.image, masks, normalizer)

    def test_full_mask(self):
        stats = self.stats([[1.0, 1.0], [1.0, 1.0]])
        assert stats.mean.item() == 0.5
        assert stats.variance.item() == 0.25

    def test_corner_mask(self):
        stats = self.stats([[1.0, 0.0], [0.0, 0.0]])
        assert stats.mean.item() == 0.25
        assert stats.variance.item() == 0.1875

    def test_empty_mask(self):
        stats = self.stats([[0.0, 0.0], [0.0, 0.0]])
        assert stats.mean.item() == 0.0
        assert stats.variance.item() == 0.0

    def test_mask_mass_normaliser(self):
        stats = self.stats([[1.0, 0.0], [0.0, 0.0]], 'mask_mass')
        assert stats.mean.item() == pytest.approx(1.0, abs=1e-5)
        assert stats.variance.item() == pytest.approx(0.0, abs=1e-5)

    def test_mask_mass_empty_mask_is_finite(self):
        stats = self.stats([[0.0, 0.0], [0.0, 0.0]], 'mask_mass')
        assert torch.isfinite(stats.mean).all() and torch.isfinite(stats.variance).all()

    def test_masks_are_upsampled(self):
        images = random_images(2, 8, 8)
        stats = masked_color_stats(images, torch.rand(2, 3, 4, 4))
        assert stats.mean.shape == (2, 3)
        assert (stats.variance >= 0).all()

    def test_per_channel(self):
        images = random_images(2, 8, 8)
        stats = masked_color_stats(images, torch.rand(2, 3, 8, 8), per_channel=True)
        assert stats.mean.shape == (2, 3, 3)
        assert stats.variance.shape == (2, 3, 3)

    def test_unknown_normaliser(self):
        with pytest.raises(ValueError, match='color_stat_normalizer'):
            self.stats([[1.0, 1.0], [1.0, 1.0]], 'median')


class TestColorConsistency(object):

    def test_identical_stats(self):
        stats = ColorStats(torch.rand(2, 3), torch.rand(2, 3))
        assert color_consistency_loss(stats, stats).item() == 0.0

    def test_by_hand(self):
        mix = ColorStats(torch.tensor([[0.1, 0.0]], dtype=DOUBLE),
                         torch.tensor([[0.0, 0.2]], dtype=DOUBLE))
        src = ColorStats(torch.zeros(1, 2, dtype=DOUBLE), torch.zeros(1, 2, dtype=DOUBLE))
        assert color_consistency_loss(mix, src).item() == pytest.approx(0.025, rel=1e-12)

    def test_symmetric(self):
        first = ColorStats(torch.rand(2, 3), torch.rand(2, 3))
        second = ColorStats(torch.rand(2, 3), torch.rand(2, 3))
        assert (color_consistency_loss(first, second).item()
                == color_consistency_loss(second, first).item())

    def test_mask_count_mismatch(self):
        with pytest.raises(ValueError, match='number of masks'):
            color_consistency_loss(ColorStats(torch.zeros(1, 2), torch.zeros(1, 2)),
                                   ColorStats(torch.zeros(1, 3), torch.zeros(1, 3)))


class TestTotalLoss(object):

    def test_default_weights_on_unit_components(self):
        assert total_loss(1.0, 1.0, 1.0, TrainConfig()) == pytest.approx(2.01, abs=1e-15)

    def test_zero_weights(self):
        config = TrainConfig(lambda_recon=0.0, lambda_adv=0.0, lambda_color=0.0)
        assert total_loss(3.0, 4.0, 5.0, config) == 0.0

    def test_linear_in_color_weight(self):
        config = TrainConfig()
        doubled = dataclasses.replace(config, lambda_color=2.0)
        assert total_loss(0.3, 0.2, 0.7, doubled) == pytest.approx(
            total_loss(0.3, 0.2, 0.7, config) + 0.7)


def test_breakdown_record():
    record = LossBreakdown(0.5, 0.25, 1.0, 0.125, 2.0).as_record(3, 1e-4)
    assert record == {'iter': 3, 'recon': 0.5, 'adv_c': 0.25, 'adv_e': 1.0,
                      'color': 0.125, 'total': 2.0, 'lr': 1e-4}


class TestGradients(object):
    '''Autograd against central differences on the tiny configuration'''

    @pytest.fixture(scope='class')
    def setup(self):
        config = tiny_model_config()
        net = init_params(config, seed=0).double()
        extractor = make_extractor(seed=0, num_layers=1, base_channels=2,
                                   activation='silu').double()
        images_a = random_images(2, 8, 8, seed=10, dtype=DOUBLE)
        images_b = random_images(2, 8, 8, seed=11, dtype=DOUBLE)
        return config, net, extractor, images_a, images_b

    @staticmethod
    def generator_parameters(net):
        return [p for module in net.generator_modules().values() for p in module.parameters()]

    def check(self, loss_fn, parameters):
        worst, compared = finite_difference_errors(loss_fn, parameters, step=1e-4)
        assert compared > 0
        assert worst < 1e-4

    @staticmethod
    def feature_margin(images, net, pyramidizer):
        with torch.no_grad():
            target = pyramidizer(images)
            output = pyramidizer(decode(*encode(images, net), net))
        return min((t - o).abs().min().item()
                   for t, o in zip(target.features, output.features))

    def test_reconstruction(self, setup):
        _, net, extractor, _, _ = setup
        pyramidizer = functools.partial(extract_features, extractor=extractor)
        # L1 has a kink wherever a feature difference is zero; pick inputs whose
        # differences all stay well clear of zero under a 1e-4 perturbation
        for seed in range(20, 60):
            images = random_images(2, 8, 8, seed=seed, dtype=DOUBLE)
            if self.feature_margin(images, net, pyramidizer) > 1e-3:
                break
        else:
            pytest.fail('no input keeps every feature difference away from zero')

        def loss():
            return reconstruction_loss(images, decode(*encode(images, net), net), pyramidizer)
        self.check(loss, self.generator_parameters(net))

    @pytest.mark.parametrize('mode', ['corrected_eq3', 'literal_eq3'])
    def test_encoder_adversarial(self, setup, mode):
        _, net, _, images_a, images_b = setup

        def loss():
            masks_a, appearance_a = encode(images_a, net)
            _, appearance_b = encode(images_b, net)
            with frozen(net.classifier):
                return encoder_adv_loss(classify(masks_a, appearance_a, net),
                                        classify(masks_a, appearance_b, net), mode)
        self.check(loss, self.generator_parameters(net))

    def test_classifier_adversarial(self, setup):
        _, net, _, images_a, images_b = setup

        def loss():
            with torch.no_grad():
                masks_a, appearance_a = encode(images_a, net)
                _, appearance_b = encode(images_b, net)
            return classifier_adv_loss(classify(masks_a, appearance_a, net),
                                       classify(masks_a, appearance_b, net))
        self.check(loss, list(net.classifier.parameters()))

    def test_color_consistency(self, setup):
        config, net, _, images_a, images_b = setup

        def loss():
            masks_a, appearance_a = encode(images_a, net)
            masks_b = encode_shape(images_b, net)
            mixed = decode(masks_b, appearance_a, net)
            return color_consistency_loss(masked_color_stats(mixed, masks_b),
                                          masked_color_stats(images_a, masks_a))
        self.check(loss, self.generator_parameters(net))


class TestGradientIsolation(object):

    @pytest.fixture
    def net(self):
        return init_params(tiny_model_config(), seed=1)

    def test_encoder_loss_leaves_classifier_alone(self, net):
        images_a, images_b = random_images(2, 8, 8, 1), random_images(2, 8, 8, 2)
        masks_a, appearance_a = encode(images_a, net)
        _, appearance_b = encode(images_b, net)
        with frozen(net.classifier):
            loss = encoder_adv_loss(classify(masks_a, appearance_a, net),
                                    classify(masks_a, appearance_b, net))
        loss.backward()
        assert all(p.grad is None for p in net.classifier.parameters())
        assert any(p.grad is not None for p in net.appearance_encoder.parameters())

    def test_classifier_loss_leaves_encoders_alone(self, net):
        images_a, images_b = random_images(2, 8, 8, 1), random_images(2, 8, 8, 2)
        with torch.no_grad():
            masks_a, appearance_a = encode(images_a, net)
            _, appearance_b = encode(images_b, net)
        loss = classifier_adv_loss(classify(masks_a, appearance_a, net),
                                   classify(masks_a, appearance_b, net))
        loss.backward()
        for module in net.generator_modules().values():
            assert all(p.grad is None for p in module.parameters())
        assert all(p.grad is not None for p in net.classifier.parameters())
