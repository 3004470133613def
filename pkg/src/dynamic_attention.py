"""
Dynamic attention on the lip area: a coarse mask attenuates the mouth region of the
identity face by a scheduled rate, later frames use a finer mask predicted from the
previously generated frame.
"""
import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

import torch
import torch.nn as nn

logger = logging.getLogger(__name__)

START_RATE_RANGE = (0.7, 0.9)
END_RATE_RANGE = (0.1, 0.3)


class RegionError(ValueError):
    pass


class ScheduleError(ValueError):
    pass


class Region(NamedTuple):
    """Half-open pixel box [x0, x1) x [y0, y1)."""
    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    def check_within(self, height: int, width: int) -> "Region":
        if not (0 <= self.x0 < self.x1 <= width and 0 <= self.y0 < self.y1 <= height):
            raise RegionError(f"Region {tuple(self)} is not inside a {height}x{width} image")
        return self

    def dilate(self, pixels: int, height: int, width: int) -> "Region":
        return Region(max(0, self.x0 - pixels), max(0, self.y0 - pixels),
                      min(width, self.x1 + pixels), min(height, self.y1 + pixels))

    def slices(self) -> Tuple[slice, slice]:
        return slice(self.y0, self.y1), slice(self.x0, self.x1)


@dataclass
class AttentionMask:
    """
    weights: (H, W) or (N, H, W), 1 outside the region and within [rate, 1] inside
    """
    weights: torch.Tensor
    rate: float
    region: Region

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"Attention rate must lie in [0, 1], got {self.rate}")
        self.region.check_within(self.weights.shape[-2], self.weights.shape[-1])


@dataclass(frozen=True)
class AttentionSchedule:
    """
    Rate curve over (possibly fractional) epochs: start_rate until decay_start, linear decay to
    end_rate at decay_end, end_rate until fix_to_one, then exactly 1.
    """
    start_rate: float = 0.8
    end_rate: float = 0.2
    decay_start_epoch: float = 5
    decay_end_epoch: float = 20
    fix_to_one_epoch: float = 45
    total_epochs: float = 50

    def __post_init__(self):
        if not (0 <= self.decay_start_epoch < self.decay_end_epoch <= self.fix_to_one_epoch <= self.total_epochs):
            raise ScheduleError("Need 0 <= decay_start < decay_end <= fix_to_one <= total epochs, got "
                                f"{self.decay_start_epoch}, {self.decay_end_epoch}, "
                                f"{self.fix_to_one_epoch}, {self.total_epochs}")
        if not START_RATE_RANGE[0] <= self.start_rate <= START_RATE_RANGE[1]:
            raise ScheduleError(f"start_rate must lie in {list(START_RATE_RANGE)}, got {self.start_rate}")
        if not END_RATE_RANGE[0] <= self.end_rate <= END_RATE_RANGE[1]:
            raise ScheduleError(f"end_rate must lie in {list(END_RATE_RANGE)}, got {self.end_rate}")

    @classmethod
    def for_epochs(cls, total_epochs: float, start_rate: float = 0.8, end_rate: float = 0.2,
                   decay_start: float = 0.1, decay_end: float = 0.4, fix_to_one: float = 0.9) -> "AttentionSchedule":
        """Schedule with phase boundaries given as fractions of the training length."""
        return cls(start_rate=start_rate, end_rate=end_rate,
                   decay_start_epoch=decay_start * total_epochs,
                   decay_end_epoch=decay_end * total_epochs,
                   fix_to_one_epoch=fix_to_one * total_epochs,
                   total_epochs=total_epochs)

    def rate(self, epoch: float) -> float:
        return schedule_rate(self, epoch)


def schedule_rate(schedule: AttentionSchedule, epoch: float) -> float:
    if not 0 <= epoch < schedule.total_epochs:
        raise ScheduleError(f"Epoch {epoch} outside [0, {schedule.total_epochs})")
    if epoch >= schedule.fix_to_one_epoch:
        return 1.0
    if epoch < schedule.decay_start_epoch:
        return schedule.start_rate
    if epoch >= schedule.decay_end_epoch:
        return schedule.end_rate
    progress = (epoch - schedule.decay_start_epoch) / (schedule.decay_end_epoch - schedule.decay_start_epoch)
    return schedule.start_rate + (schedule.end_rate - schedule.start_rate) * progress


def initial_mask(image_shape: Tuple[int, int], region: Region, rate: float) -> AttentionMask:
    height, width = image_shape
    region.check_within(height, width)
    weights = torch.ones(height, width)
    rows, cols = region.slices()
    weights[rows, cols] = rate
    return AttentionMask(weights, float(rate), region)


class MaskPredictor(nn.Module):
    """Two-layer convolutional lip-shape scorer over (frame, previous mask weights)."""

    def __init__(self, channels: int = 3, hidden: int = 8):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Conv2d(channels + 1, hidden, kernel_size=3, padding=1),
            nn.ReLU(),
            nn.Conv2d(hidden, 1, kernel_size=3, padding=1),
        )

    def forward(self, frame: torch.Tensor, prev_weights: torch.Tensor) -> torch.Tensor:
        """Per-pixel score in [0, 1], shape (N, H, W)."""
        return torch.sigmoid(self.layers(torch.cat([frame, prev_weights.unsqueeze(1)], dim=1))).squeeze(1)


def predict_mask(prev_mask: AttentionMask, generated_frame: torch.Tensor, predictor_params: MaskPredictor) -> AttentionMask:
    """
    Fine-grained mask for the next frame. Inside the region the weight is
    rate + (1 - rate) * (1 - s) for the predicted lip score s; the rate is kept.
    :param generated_frame: (N, C, H, W)
    """
    if generated_frame.dim() != 4 or generated_frame.shape[-2:] != prev_mask.weights.shape[-2:]:
        raise RegionError(f"Frame shape {tuple(generated_frame.shape)} does not match mask "
                          f"shape {tuple(prev_mask.weights.shape)}")
    prev_weights = prev_mask.weights
    if prev_weights.dim() == 2:
        prev_weights = prev_weights.expand(generated_frame.shape[0], -1, -1)
    score = predictor_params(generated_frame, prev_weights.to(generated_frame.dtype))
    in_region = torch.zeros(score.shape[-2:], dtype=torch.bool, device=score.device)
    rows, cols = prev_mask.region.slices()
    in_region[rows, cols] = True
    inside = prev_mask.rate + (1.0 - prev_mask.rate) * (1.0 - score)
    weights = torch.where(in_region, inside, torch.ones_like(score))
    return AttentionMask(weights, prev_mask.rate, prev_mask.region)


def apply_mask(image: torch.Tensor, mask: AttentionMask) -> torch.Tensor:
    """Multiply every channel of (C, H, W) or (N, C, H, W) images by the mask weights."""
    weights = mask.weights.to(image.dtype)
    if image.shape[-2:] != weights.shape[-2:]:
        raise RegionError(f"Image shape {tuple(image.shape)} does not match mask shape {tuple(weights.shape)}")
    if weights.dim() == 3:
        if image.dim() != 4 or image.shape[0] != weights.shape[0]:
            raise RegionError("Batched mask needs a batch of images of the same size")
        weights = weights.unsqueeze(1)
    return image * weights


class DynamicAttention(nn.Module):
    """Owns the mask predictor and the coarse region for one image geometry."""

    def __init__(self, image_size: int, region: Region, channels: int = 3, hidden: int = 8):
        super().__init__()
        self.image_size = image_size
        self.region = region.check_within(image_size, image_size)
        self.predictor = MaskPredictor(channels, hidden)

    def rollout_hook(self, rate: float):
        """
        Identity hook for generate_sequence: the first step masks the identity face with the
        coarse mask, later steps with masks predicted from the previously generated frame.
        """
        state = {"mask": None}

        def hook(step: int, identity_face: torch.Tensor, generated_prev: Optional[torch.Tensor]) -> torch.Tensor:
            if rate >= 1.0:
                return identity_face
            if state["mask"] is None or generated_prev is None:
                state["mask"] = initial_mask((self.image_size, self.image_size), self.region, rate)
            else:
                state["mask"] = predict_mask(state["mask"], generated_prev, self.predictor)
            return apply_mask(identity_face, state["mask"])

        return hook
