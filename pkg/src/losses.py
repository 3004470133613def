"""
Training objectives: adversarial, perceptual, lip reconstruction, MI and their weighted sum.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import torch
import torch.nn as nn

from src.dynamic_attention import Region
from src.mi_estimators import MIEstimate, NumericError, PairSource

logger = logging.getLogger(__name__)

EPSILON = 1e-7

Scalar = Union[float, torch.Tensor]


class SourceContractError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_perc: float = 1.0
    lambda_lip: float = 10.0
    lambda_mi: float = 0.1

    def __post_init__(self):
        for name in ("lambda_perc", "lambda_lip", "lambda_mi"):
            value = getattr(self, name)
            if not (value >= 0 and value != float("inf")):
                raise ValueError(f"{name} must be finite and non-negative, got {value}")


class FeatureExtractor(nn.Module):
    """
    Frozen, seed-fixed random convolutional features standing in for a pretrained
    perceptual network. Parameters never require gradients.
    """

    def __init__(self, channels: int = 3, widths: Sequence[int] = (16, 32, 32), taps: Sequence[int] = (0, 1, 2),
                 seed: int = 1234):
        super().__init__()
        generator = torch.Generator().manual_seed(seed)
        layers = []
        in_channels = channels
        for width in widths:
            conv = nn.Conv2d(in_channels, width, kernel_size=3, stride=2, padding=1)
            bound = (6.0 / (in_channels * 9)) ** 0.5
            with torch.no_grad():
                conv.weight.copy_((torch.rand(conv.weight.shape, generator=generator) * 2 - 1) * bound)
                conv.bias.zero_()
            layers.append(conv)
            in_channels = width
        self.layers = nn.ModuleList(layers)
        if any(tap < 0 or tap >= len(widths) for tap in taps):
            raise ValueError(f"Taps {tuple(taps)} outside the {len(widths)} layers")
        self.taps = tuple(taps)
        self.requires_grad_(False)
        self.eval()

    def forward(self, image: torch.Tensor):
        features = []
        x = image
        for index, layer in enumerate(self.layers):
            x = torch.relu(layer(x))
            if index in self.taps:
                features.append(x)
        return features


def _clamp(probability: torch.Tensor) -> torch.Tensor:
    return torch.clamp(torch.as_tensor(probability), EPSILON, 1.0 - EPSILON)


def gan_loss(d_real: Scalar, d_fake: Scalar) -> torch.Tensor:
    """E[ln D(f, a)] + E[ln(1 - D(G(a), a))]; the discriminator ascends this."""
    return torch.log(_clamp(d_real)).mean() + torch.log(1.0 - _clamp(d_fake)).mean()


def discriminator_loss(d_real: torch.Tensor, d_fake: torch.Tensor, d_mismatch: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Negated GAN objective. Mismatched real pairs, when given, share the negative
    term with the generated pairs.
    """
    if d_mismatch is None:
        return -gan_loss(d_real, d_fake)
    fake_term = 0.5 * (torch.log(1.0 - _clamp(d_fake)).mean() + torch.log(1.0 - _clamp(d_mismatch)).mean())
    return -(torch.log(_clamp(d_real)).mean() + fake_term)


def generator_adversarial_loss(d_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating surrogate -ln D(G(a), a) for the generator side of the GAN term."""
    return -torch.log(_clamp(d_fake)).mean()


def _same_shape(real: torch.Tensor, generated: torch.Tensor):
    if real.shape != generated.shape:
        raise ValueError(f"Shape mismatch: {tuple(real.shape)} vs {tuple(generated.shape)}")


def perceptual_loss(extractor: FeatureExtractor, real_frame: torch.Tensor, generated_frame: torch.Tensor) -> torch.Tensor:
    """||phi(f) - phi(f_hat)||^2 over all tapped features, divided by the feature count."""
    _same_shape(real_frame, generated_frame)
    squared = 0.0
    count = 0
    for real_features, generated_features in zip(extractor(real_frame), extractor(generated_frame)):
        squared = squared + (real_features - generated_features).pow(2).sum()
        count += real_features.numel()
    return squared / count


def crop_lip(frame: torch.Tensor, region: Region) -> torch.Tensor:
    region.check_within(frame.shape[-2], frame.shape[-1])
    rows, cols = region.slices()
    return frame[..., rows, cols]


def lip_loss(real_frame: torch.Tensor, generated_frame: torch.Tensor, region: Region) -> torch.Tensor:
    """Mean absolute difference over the lip crop."""
    _same_shape(real_frame, generated_frame)
    return (crop_lip(real_frame, region) - crop_lip(generated_frame, region)).abs().mean()


def mi_loss(estimate: MIEstimate) -> torch.Tensor:
    if estimate.source is not PairSource.GENERATED_PAIRS:
        raise SourceContractError(f"The generator's MI loss takes generated pairs, got {estimate.source.value} pairs")
    return -estimate.value


def total_loss(gan: Scalar, perc: Scalar, lip: Scalar, mi: Optional[Scalar], weights: LossWeights) -> torch.Tensor:
    """gan + l1 * perc + l2 * lip + l3 * mi; a missing MI term contributes nothing."""
    terms = {"gan": gan, "perc": perc, "lip": lip}
    if mi is not None:
        terms["mi"] = mi
    for name, value in terms.items():
        if not torch.isfinite(torch.as_tensor(value)).all():
            raise NumericError(f"Non-finite {name} loss: {value}")
    loss = torch.as_tensor(gan) + weights.lambda_perc * torch.as_tensor(perc) + weights.lambda_lip * torch.as_tensor(lip)
    if mi is not None:
        loss = loss + weights.lambda_mi * torch.as_tensor(mi)
    return loss
