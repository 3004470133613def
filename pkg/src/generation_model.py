"""
Talking-face generator (identity, audio and image encoders feeding a frame decoder)
and the frame discriminator that judges (frame, audio) pairs.

Tensors are batched and channel-first: images (N, C, H, W) in [0, 1], audio
features (N, T, F).
"""
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

logger = logging.getLogger(__name__)

# keeps discriminator probabilities strictly inside (0, 1)
PROBABILITY_MARGIN = 1e-6


class ShapeMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    image_size: int = 64
    channels: int = 3
    widths: Tuple[int, ...] = (16, 32, 64, 128)
    audio_shape: Tuple[int, int] = (20, 13)
    audio_channels: int = 16
    audio_dim: int = 64
    hidden: int = 128

    def __post_init__(self):
        if self.image_size < 1 or self.channels < 1:
            raise ValueError(f"Invalid image geometry {self.image_size}x{self.image_size}x{self.channels}")
        if len(self.widths) < 1 or any(w < 1 for w in self.widths):
            raise ValueError(f"Invalid encoder widths {self.widths}")
        if len(self.audio_shape) != 2 or min(self.audio_shape) < 1:
            raise ValueError(f"Invalid audio feature shape {self.audio_shape}")

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return self.channels, self.image_size, self.image_size


def _check_shape(name: str, tensor: torch.Tensor, expected: Tuple[int, ...]):
    if tensor.dim() != len(expected) + 1 or tuple(tensor.shape[1:]) != tuple(expected):
        raise ShapeMismatchError(f"{name} must have shape (N, {', '.join(map(str, expected))}), "
                                 f"got {tuple(tensor.shape)}")


def _conv_stage(in_channels: int, out_channels: int) -> nn.Sequential:
    # stride 2 with kernel 3 / padding 1 maps n to ceil(n / 2), down to 1x1
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, kernel_size=3, stride=2, padding=1),
        nn.LeakyReLU(0.2),
    )


class ImageEncoder(nn.Module):
    """Strided convolution stack; forward returns the feature map of every stage."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        channels = (spec.channels,) + tuple(spec.widths)
        self.stages = nn.ModuleList(_conv_stage(channels[i], channels[i + 1]) for i in range(len(spec.widths)))

    def forward(self, image: torch.Tensor) -> List[torch.Tensor]:
        features = []
        x = image
        for stage in self.stages:
            x = stage(x)
            features.append(x)
        return features

    def output_size(self, spec: ModelSpec) -> int:
        with torch.no_grad():
            blank = torch.zeros((1,) + spec.image_shape)
            return int(self.forward(blank)[-1].numel())


class AudioEncoder(nn.Module):
    """Two convolutions over the (T, F) feature grid, then a flatten-projection."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        t, f = spec.audio_shape
        self.convs = nn.Sequential(
            nn.Conv2d(1, spec.audio_channels, kernel_size=3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(spec.audio_channels, spec.audio_channels, kernel_size=3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
        )
        flat = spec.audio_channels * ((t + 1) // 2) * ((f + 1) // 2)
        self.project = nn.Sequential(nn.Linear(flat, spec.audio_dim), nn.LeakyReLU(0.2))

    def forward(self, audio: torch.Tensor) -> torch.Tensor:
        x = self.convs(audio.unsqueeze(1))
        return self.project(x.flatten(1))


class FrameDecoder(nn.Module):
    """Transposed-convolution stack mirroring the encoders, with identity skip connections."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        widths = tuple(spec.widths)
        self.fuse = nn.Sequential(
            nn.Conv2d(2 * widths[-1] + spec.audio_dim, widths[-1], kernel_size=1),
            nn.LeakyReLU(0.2),
        )
        self.ups = nn.ModuleList()
        self.merges = nn.ModuleList()
        for s in range(len(widths) - 1, 0, -1):
            self.ups.append(nn.ConvTranspose2d(widths[s], widths[s - 1], kernel_size=3, stride=2, padding=1))
            self.merges.append(nn.Conv2d(2 * widths[s - 1], widths[s - 1], kernel_size=3, padding=1))
        self.final_up = nn.ConvTranspose2d(widths[0], widths[0], kernel_size=3, stride=2, padding=1)
        self.to_image = nn.Conv2d(widths[0], spec.channels, kernel_size=3, padding=1)

    def forward(self, identity_features: List[torch.Tensor], image_code: torch.Tensor,
                audio_code: torch.Tensor, output_size: Tuple[int, int]) -> torch.Tensor:
        bottleneck = identity_features[-1]
        audio_map = audio_code[:, :, None, None].expand(-1, -1, bottleneck.shape[2], bottleneck.shape[3])
        x = self.fuse(torch.cat([bottleneck, image_code, audio_map], dim=1))
        for i, (up, merge) in enumerate(zip(self.ups, self.merges)):
            skip = identity_features[-2 - i]
            x = F.leaky_relu(up(x, output_size=skip.shape[-2:]), 0.2)
            x = F.leaky_relu(merge(torch.cat([x, skip], dim=1)), 0.2)
        x = F.leaky_relu(self.final_up(x, output_size=output_size), 0.2)
        # bounded output activation
        return torch.sigmoid(self.to_image(x))


class TalkingFaceGenerator(nn.Module):
    """
    Maps (identity face, audio features, previous frame) to the next frame.
    Identity and image encoders share the architecture but not the parameters.
    """

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.identity_encoder = ImageEncoder(spec)
        self.audio_encoder = AudioEncoder(spec)
        self.image_encoder = ImageEncoder(spec)
        self.frame_decoder = FrameDecoder(spec)

    def forward(self, identity_face: torch.Tensor, audio_feat: torch.Tensor, prev_frame: torch.Tensor) -> torch.Tensor:
        _check_shape("identity_face", identity_face, self.spec.image_shape)
        _check_shape("prev_frame", prev_frame, self.spec.image_shape)
        _check_shape("audio_feat", audio_feat, self.spec.audio_shape)
        if not (identity_face.shape[0] == audio_feat.shape[0] == prev_frame.shape[0]):
            raise ShapeMismatchError("Batch sizes of identity, audio and previous frame differ")
        identity_features = self.identity_encoder(identity_face)
        image_code = self.image_encoder(prev_frame)[-1]
        audio_code = self.audio_encoder(audio_feat)
        return self.frame_decoder(identity_features, image_code, audio_code, identity_face.shape[-2:])


class FrameDiscriminator(nn.Module):
    """Image CNN and audio FC, concatenated into a classifier with a 1-dim logit."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.image_cnn = ImageEncoder(spec)
        t, f = spec.audio_shape
        self.audio_fc = nn.Sequential(nn.Linear(t * f, spec.audio_dim), nn.LeakyReLU(0.2))
        self.classifier = nn.Sequential(
            nn.Linear(self.image_cnn.output_size(spec) + spec.audio_dim, spec.hidden),
            nn.LeakyReLU(0.2),
            nn.Linear(spec.hidden, 1),
        )

    def forward(self, frame: torch.Tensor, audio_feat: torch.Tensor) -> torch.Tensor:
        _check_shape("frame", frame, self.spec.image_shape)
        _check_shape("audio_feat", audio_feat, self.spec.audio_shape)
        image_code = self.image_cnn(frame)[-1].flatten(1)
        audio_code = self.audio_fc(audio_feat.flatten(1))
        return self.classifier(torch.cat([image_code, audio_code], dim=1)).squeeze(1)


def generator_forward(params: TalkingFaceGenerator, identity_face: torch.Tensor,
                      audio_feat: torch.Tensor, prev_frame: torch.Tensor) -> torch.Tensor:
    return params(identity_face, audio_feat, prev_frame)


def discriminator_forward(params: FrameDiscriminator, frame: torch.Tensor, audio_feat: torch.Tensor) -> torch.Tensor:
    """Probability that (frame, audio) is a matched real pair, affinely squashed into (0, 1)."""
    probability = torch.sigmoid(params(frame, audio_feat))
    return PROBABILITY_MARGIN + (1.0 - 2.0 * PROBABILITY_MARGIN) * probability


IdentityHook = Callable[[int, torch.Tensor, Optional[torch.Tensor]], torch.Tensor]


def generate_sequence(params: TalkingFaceGenerator, identity_face: torch.Tensor, audio_track: torch.Tensor,
                      identity_hook: Optional[IdentityHook] = None,
                      real_frames: Optional[torch.Tensor] = None,
                      teacher_forcing: float = 0.0,
                      generator: Optional[torch.Generator] = None,
                      initial_prev: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Autoregressive rollout: frame i is generated from audio i and frame i-1,
    the first frame from the identity face (or initial_prev when given).
    :param identity_face: (N, C, H, W)
    :param audio_track: (N, n, T, F)
    :param identity_hook: maps (step, identity_face, previous generated frame or None) to the
        identity input of that step
    :param real_frames: (N, n, C, H, W), needed only when teacher_forcing > 0
    :param teacher_forcing: probability of feeding real frame i-1 instead of the generated one
    :return: (N, n, C, H, W)
    """
    if audio_track.dim() != 4 or audio_track.shape[1] < 1:
        raise ShapeMismatchError(f"audio_track must have shape (N, n>=1, T, F), got {tuple(audio_track.shape)}")
    if teacher_forcing > 0 and real_frames is None:
        raise ValueError("Teacher forcing needs the real frames")
    frames = []
    prev = identity_face if initial_prev is None else initial_prev
    generated_prev = None
    for i in range(audio_track.shape[1]):
        identity_input = identity_face if identity_hook is None else identity_hook(i, identity_face, generated_prev)
        frame = generator_forward(params, identity_input, audio_track[:, i], prev)
        frames.append(frame)
        generated_prev = frame
        prev = frame
        if teacher_forcing > 0:
            coin = torch.rand((), generator=generator).item()
            if coin < teacher_forcing:
                prev = real_frames[:, i]
    return torch.stack(frames, dim=1)
