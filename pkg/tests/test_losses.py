import math

import numpy as np
import pytest
import torch

from src.dynamic_attention import Region, RegionError
from src.generation_model import ModelSpec, TalkingFaceGenerator
from src.losses import (FeatureExtractor, LossWeights, SourceContractError, crop_lip, discriminator_loss, gan_loss,
                        generator_adversarial_loss, lip_loss, mi_loss, perceptual_loss, total_loss)
from src.mi_estimators import MIEstimate, NumericError, PairSource, Representation
from src.synthetic_data import mouth_region, random_identity, render_scene_frame

LIP = Region(2, 4, 6, 8)


class TestAdversarial:
    def test_gan_loss_at_one_half(self):
        assert gan_loss(torch.tensor([0.5]), torch.tensor([0.5])).item() == pytest.approx(2 * math.log(0.5))

    def test_saturated_probabilities_stay_finite(self):
        assert math.isfinite(gan_loss(torch.tensor([0.0]), torch.tensor([1.0])).item())

    def test_discriminator_loss_is_negated_objective(self):
        d_real, d_fake = torch.tensor([0.9, 0.7]), torch.tensor([0.2, 0.4])
        assert discriminator_loss(d_real, d_fake).item() == pytest.approx(-gan_loss(d_real, d_fake).item())

    def test_mismatch_pairs_share_the_negative_term(self):
        d_real, d_fake, d_mismatch = torch.tensor([0.9]), torch.tensor([0.2]), torch.tensor([0.4])
        expected = -(math.log(0.9) + 0.5 * (math.log(0.8) + math.log(0.6)))
        assert discriminator_loss(d_real, d_fake, d_mismatch).item() == pytest.approx(expected, rel=1e-6)

    def test_generator_adversarial_loss(self):
        assert generator_adversarial_loss(torch.tensor([0.5])).item() == pytest.approx(math.log(2))


class TestReconstruction:
    def test_crop_of_whole_image_is_identity(self):
        frame = torch.rand(3, 8, 8)
        assert torch.equal(crop_lip(frame, Region(0, 0, 8, 8)), frame)

    def test_crop_shape(self):
        assert crop_lip(torch.rand(2, 3, 40, 40), Region(4, 10, 36, 26)).shape == (2, 3, 16, 32)

    def test_crop_contains_the_mouth(self):
        frame, landmarks = render_scene_frame(random_identity(np.random.default_rng(2)), 1.0, 64)
        region = mouth_region(64)
        crop = crop_lip(torch.from_numpy(frame).permute(2, 0, 1), region)
        assert crop.shape[-2:] == (region.height, region.width)
        assert np.all((landmarks[:, 0] >= region.x0) & (landmarks[:, 0] < region.x1))
        assert np.all((landmarks[:, 1] >= region.y0) & (landmarks[:, 1] < region.y1))

    def test_crop_outside_the_image(self):
        with pytest.raises(RegionError):
            crop_lip(torch.rand(3, 8, 8), Region(4, 4, 12, 8))

    def test_perceptual_loss_of_identical_frames(self):
        extractor = FeatureExtractor()
        frame = torch.rand(2, 3, 16, 16)
        assert perceptual_loss(extractor, frame, frame).item() == 0.0

    def test_perceptual_loss_is_positive_for_different_frames(self):
        extractor = FeatureExtractor()
        assert perceptual_loss(extractor, torch.zeros(1, 3, 16, 16), torch.ones(1, 3, 16, 16)).item() > 0

    def test_feature_extractor_is_frozen_and_seeded(self):
        first, second = FeatureExtractor(seed=5), FeatureExtractor(seed=5)
        assert not any(p.requires_grad for p in first.parameters())
        for a, b in zip(first.parameters(), second.parameters()):
            assert torch.equal(a, b)

    def test_lip_loss_only_sees_the_region(self):
        real = torch.zeros(1, 3, 10, 10)
        generated = real.clone()
        generated[..., 0, 0] = 1.0
        assert lip_loss(real, generated, LIP).item() == 0.0
        generated[..., 5, 3] = 1.0
        assert lip_loss(real, generated, LIP).item() == pytest.approx(1.0 / 16)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            lip_loss(torch.zeros(1, 3, 10, 10), torch.zeros(1, 3, 8, 8), LIP)


class TestGradients:
    def test_perceptual_loss(self):
        extractor = FeatureExtractor(seed=3).double()
        real = torch.rand(1, 3, 8, 8, dtype=torch.float64)
        generated = torch.rand(1, 3, 8, 8, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(lambda g: perceptual_loss(extractor, real, g), (generated,),
                                        eps=1e-6, atol=1e-6, rtol=1e-4)

    def test_lip_loss(self):
        real = torch.rand(1, 3, 8, 8, dtype=torch.float64)
        generated = torch.rand(1, 3, 8, 8, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(lambda g: lip_loss(real, g, Region(2, 2, 6, 6)), (generated,),
                                        eps=1e-6, atol=1e-6, rtol=1e-4)

    def test_total_loss(self):
        weights = LossWeights(1.0, 10.0, 0.1)
        terms = tuple(torch.rand((), dtype=torch.float64, requires_grad=True) for _ in range(4))
        assert torch.autograd.gradcheck(lambda *t: total_loss(*t, weights), terms, eps=1e-6, atol=1e-6, rtol=1e-4)

    def test_generator_parameter_gradients(self):
        torch.manual_seed(0)
        spec = ModelSpec(image_size=8, widths=(4,), audio_shape=(4, 3), audio_channels=2, audio_dim=4, hidden=8)
        generator = TalkingFaceGenerator(spec).double()
        extractor = FeatureExtractor(seed=3).double()
        identity = torch.rand((2,) + spec.image_shape, dtype=torch.float64)
        audio = torch.rand((2,) + spec.audio_shape, dtype=torch.float64)
        real = torch.rand((2,) + spec.image_shape, dtype=torch.float64)
        names = ["frame_decoder.to_image.weight", "frame_decoder.to_image.bias", "audio_encoder.project.0.bias"]
        named = dict(generator.named_parameters())
        inputs = tuple(named[name].detach().clone().requires_grad_(True) for name in names)

        def function(*values):
            fake = torch.func.functional_call(generator, dict(zip(names, values)), (identity, audio, identity))
            return perceptual_loss(extractor, real, fake) + 10.0 * lip_loss(real, fake, LIP)

        assert torch.autograd.gradcheck(function, inputs, eps=1e-6, atol=1e-6, rtol=1e-4)


class TestTotal:
    def test_weighted_sum(self):
        value = total_loss(1.0, 2.0, 3.0, 4.0, LossWeights(0.5, 10.0, 0.1)).item()
        assert value == pytest.approx(1.0 + 0.5 * 2.0 + 10.0 * 3.0 + 0.1 * 4.0)

    def test_missing_mi_term(self):
        assert total_loss(1.0, 2.0, 3.0, None, LossWeights()).item() == pytest.approx(1.0 + 2.0 + 30.0)

    def test_non_finite_term(self):
        with pytest.raises(NumericError):
            total_loss(1.0, float("nan"), 3.0, None, LossWeights())

    def test_negative_weight(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_mi=-0.1)


class TestMiLoss:
    def test_negated_generated_estimate(self):
        estimate = MIEstimate(torch.tensor(0.7), Representation.JS, PairSource.GENERATED_PAIRS)
        assert mi_loss(estimate).item() == pytest.approx(-0.7)

    def test_real_pairs_are_refused(self):
        estimate = MIEstimate(torch.tensor(0.7), Representation.JS, PairSource.REAL_PAIRS)
        with pytest.raises(SourceContractError):
            mi_loss(estimate)
