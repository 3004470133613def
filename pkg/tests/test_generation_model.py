import pytest
import torch

from src.generation_model import (PROBABILITY_MARGIN, FrameDiscriminator, ModelSpec, ShapeMismatchError,
                                  TalkingFaceGenerator, discriminator_forward, generate_sequence, generator_forward)

SPEC = ModelSpec(image_size=16, widths=(4, 8), audio_shape=(6, 5), audio_channels=2, audio_dim=8, hidden=16)


@pytest.fixture
def generator():
    torch.manual_seed(0)
    return TalkingFaceGenerator(SPEC)


def inputs(n=2, steps=3, seed=0):
    rng = torch.Generator().manual_seed(seed)
    identity = torch.rand((n,) + SPEC.image_shape, generator=rng)
    audio = torch.rand((n, steps) + SPEC.audio_shape, generator=rng)
    real = torch.rand((n, steps) + SPEC.image_shape, generator=rng)
    return identity, audio, real


class TestGenerator:
    def test_frame_shape_and_range(self, generator):
        identity, audio, _ = inputs()
        frame = generator_forward(generator, identity, audio[:, 0], identity)
        assert frame.shape == (2,) + SPEC.image_shape
        assert torch.all((frame > 0) & (frame < 1))

    @pytest.mark.parametrize("size", [17, 20, 13])
    def test_odd_image_sizes(self, size):
        spec = ModelSpec(image_size=size, widths=(4, 8, 8), audio_shape=(6, 5), audio_dim=8, hidden=16)
        model = TalkingFaceGenerator(spec)
        identity = torch.rand((1,) + spec.image_shape)
        assert model(identity, torch.rand(1, 6, 5), identity).shape == (1,) + spec.image_shape

    def test_wrong_audio_shape(self, generator):
        identity, _, _ = inputs()
        with pytest.raises(ShapeMismatchError):
            generator(identity, torch.rand(2, 5, 6), identity)

    def test_batch_sizes_must_agree(self, generator):
        identity, audio, _ = inputs()
        with pytest.raises(ShapeMismatchError):
            generator(identity, audio[:1, 0], identity)

    def test_gradient_reaches_every_component(self, generator):
        identity, audio, real = inputs()
        generator(identity, audio[:, 0], real[:, 0]).sum().backward()
        for component in (generator.identity_encoder, generator.audio_encoder, generator.image_encoder,
                          generator.frame_decoder):
            assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in component.parameters())

    def test_zeroed_output_layer_gives_mid_gray(self, generator):
        with torch.no_grad():
            generator.frame_decoder.to_image.weight.zero_()
            generator.frame_decoder.to_image.bias.zero_()
        identity, audio, _ = inputs()
        assert torch.all(generator(identity, audio[:, 0], identity) == 0.5)


class TestDiscriminator:
    def test_probabilities_strictly_inside_unit_interval(self):
        torch.manual_seed(0)
        discriminator = FrameDiscriminator(SPEC)
        with torch.no_grad():
            discriminator.classifier[-1].bias.fill_(1000.0)
        identity, audio, _ = inputs()
        probability = discriminator_forward(discriminator, identity, audio[:, 0])
        assert probability.shape == (2,)
        assert torch.all(probability <= 1 - PROBABILITY_MARGIN + 1e-7)
        assert torch.all(probability < 1)

    def test_zero_logit_is_one_half(self):
        torch.manual_seed(0)
        discriminator = FrameDiscriminator(SPEC)
        with torch.no_grad():
            discriminator.classifier[-1].weight.zero_()
            discriminator.classifier[-1].bias.zero_()
        identity, audio, _ = inputs()
        assert discriminator_forward(discriminator, identity, audio[:, 0]).tolist() == pytest.approx([0.5, 0.5])


class TestRollout:
    def test_sequence_shape(self, generator):
        identity, audio, _ = inputs(steps=4)
        assert generate_sequence(generator, identity, audio).shape == (2, 4) + SPEC.image_shape

    def test_each_frame_follows_the_previous_generated_frame(self, generator):
        identity, audio, _ = inputs(steps=4)
        with torch.no_grad():
            rolled = generate_sequence(generator, identity, audio)
            torch.testing.assert_close(rolled[:, 0], generator(identity, audio[:, 0], identity))
            for i in range(1, 4):
                torch.testing.assert_close(rolled[:, i], generator(identity, audio[:, i], rolled[:, i - 1]))

    def test_hook_sees_each_step_and_previous_frame(self, generator):
        identity, audio, _ = inputs(steps=3)
        calls = []

        def hook(step, identity_face, generated_prev):
            calls.append((step, generated_prev is None))
            return identity_face

        generate_sequence(generator, identity, audio, identity_hook=hook)
        assert calls == [(0, True), (1, False), (2, False)]

    def test_teacher_forcing_needs_real_frames(self, generator):
        identity, audio, _ = inputs()
        with pytest.raises(ValueError):
            generate_sequence(generator, identity, audio, teacher_forcing=0.5)

    def test_full_teacher_forcing_feeds_real_frames(self, generator):
        identity, audio, real = inputs(steps=3)
        with torch.no_grad():
            rolled = generate_sequence(generator, identity, audio, real_frames=real, teacher_forcing=1.0,
                                       generator=torch.Generator().manual_seed(0))
            expected = generator(identity, audio[:, 2], real[:, 1])
        torch.testing.assert_close(rolled[:, 2], expected)

    def test_deterministic_given_generator(self, generator):
        identity, audio, real = inputs(steps=4)
        with torch.no_grad():
            first = generate_sequence(generator, identity, audio, real_frames=real, teacher_forcing=0.5,
                                      generator=torch.Generator().manual_seed(7))
            second = generate_sequence(generator, identity, audio, real_frames=real, teacher_forcing=0.5,
                                       generator=torch.Generator().manual_seed(7))
        assert torch.equal(first, second)

    def test_rejects_flat_audio(self, generator):
        identity, audio, _ = inputs()
        with pytest.raises(ShapeMismatchError):
            generate_sequence(generator, identity, audio[:, 0])
