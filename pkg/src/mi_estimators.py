"""
Neural lower bounds on the mutual information between frames and audio.

The statistics network T(frame, audio) is trained on real pairs only; generated pairs
are scored with a frozen copy of its parameters, so the generator's MI loss never moves
the estimator (asymmetric protocol).
"""
import hashlib
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from src.generation_model import AudioEncoder, ImageEncoder, ModelSpec

logger = logging.getLogger(__name__)

SOFTPLUS_THRESHOLD = 20.0


class Representation(str, Enum):
    DV = "dv"
    JS = "js"


class PairSource(str, Enum):
    REAL_PAIRS = "real"
    GENERATED_PAIRS = "generated"


class BatchSizeError(ValueError):
    pass


class NumericError(RuntimeError):
    pass


@dataclass
class PairedBatch:
    """Joint pairs (f_i, a_i) and marginal pairs (f_j, a_k) along the first axis."""
    joint_frames: torch.Tensor
    joint_audios: torch.Tensor
    marginal_frames: torch.Tensor
    marginal_audios: torch.Tensor

    def __post_init__(self):
        if self.joint_frames.shape[0] != self.joint_audios.shape[0]:
            raise BatchSizeError("Joint frames and audios differ in length")
        if self.marginal_frames.shape[0] != self.marginal_audios.shape[0]:
            raise BatchSizeError("Marginal frames and audios differ in length")
        if self.joint_frames.shape[1:] != self.marginal_frames.shape[1:] \
                or self.joint_audios.shape[1:] != self.marginal_audios.shape[1:]:
            raise BatchSizeError("Joint and marginal samples differ in shape")

    @property
    def batch_size(self) -> int:
        return self.joint_frames.shape[0]

    def detach(self) -> "PairedBatch":
        return PairedBatch(self.joint_frames.detach(), self.joint_audios.detach(),
                           self.marginal_frames.detach(), self.marginal_audios.detach())


@dataclass
class MIEstimate:
    value: torch.Tensor
    representation: Representation
    source: PairSource

    def __post_init__(self):
        if not torch.isfinite(self.value).all():
            raise NumericError(f"Non-finite {self.representation.value} estimate on {self.source.value} pairs")

    def __float__(self):
        return float(self.value.detach())


class StatisticsNetwork(nn.Module):
    """
    T(frame, audio) -> scalar: an image encoder and an audio encoder with the generator's
    architecture, followed by a 3-layer classifier. Flat vector inputs (D,) use a linear
    encoder instead, as in the correlated Gaussian benchmark.
    """

    def __init__(self, frame_shape: Sequence[int], audio_shape: Sequence[int],
                 spec: Optional[ModelSpec] = None, hidden: int = 128):
        super().__init__()
        self.frame_shape = tuple(frame_shape)
        self.audio_shape = tuple(audio_shape)
        if spec is None:
            geometry = {}
            if len(self.frame_shape) == 3:
                geometry.update(image_size=self.frame_shape[1], channels=self.frame_shape[0])
            if len(self.audio_shape) == 2:
                geometry.update(audio_shape=self.audio_shape)
            spec = ModelSpec(**geometry)
        if len(self.frame_shape) == 3:
            self.image_encoder = ImageEncoder(spec)
            frame_features = self.image_encoder.output_size(spec)
        else:
            self.image_encoder = nn.Sequential(nn.Linear(self.frame_shape[0], hidden), nn.ReLU())
            frame_features = hidden
        if len(self.audio_shape) == 2:
            self.audio_encoder = AudioEncoder(spec)
            audio_features = spec.audio_dim
        else:
            self.audio_encoder = nn.Sequential(nn.Linear(self.audio_shape[0], hidden), nn.ReLU())
            audio_features = hidden
        self.classifier = nn.Sequential(
            nn.Linear(frame_features + audio_features, hidden),
            nn.ReLU(),
            nn.Linear(hidden, hidden),
            nn.ReLU(),
            nn.Linear(hidden, 1),
        )

    @property
    def head(self) -> nn.Linear:
        return self.classifier[-1]

    def forward(self, frames: torch.Tensor, audios: torch.Tensor) -> torch.Tensor:
        frame_code = self.image_encoder(frames)
        if isinstance(frame_code, list):
            frame_code = frame_code[-1]
        audio_code = self.audio_encoder(audios)
        codes = torch.cat([frame_code.flatten(1), audio_code.flatten(1)], dim=1)
        return self.classifier(codes).squeeze(1)


def softplus(x: torch.Tensor) -> torch.Tensor:
    """ln(1 + e^x); above the threshold the result is x itself to float precision."""
    return F.softplus(torch.as_tensor(x), beta=1.0, threshold=SOFTPLUS_THRESHOLD)


def derangement(n: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Uniform random permutation without fixed points, by rejection."""
    if n < 2:
        raise BatchSizeError(f"A derangement needs at least 2 elements, got {n}")
    identity = torch.arange(n)
    while True:
        permutation = torch.randperm(n, generator=generator)
        if not torch.any(permutation == identity):
            return permutation


def make_marginal_batch(joint_frames: torch.Tensor, joint_audios: torch.Tensor,
                        rng: Optional[torch.Generator] = None) -> PairedBatch:
    """
    Pair every frame with the audio of another sample. Marginal pair i is
    (f_i, a_perm[i]) with perm[i] != i, joint pairs stay untouched.
    """
    if joint_frames.shape[0] != joint_audios.shape[0]:
        raise BatchSizeError("Frames and audios differ in length")
    permutation = derangement(joint_frames.shape[0], rng)
    return PairedBatch(joint_frames, joint_audios, joint_frames, joint_audios[permutation])


def _scores(batch: PairedBatch, t: StatisticsNetwork):
    joint = t(batch.joint_frames, batch.joint_audios)
    marginal = t(batch.marginal_frames, batch.marginal_audios)
    if not (torch.isfinite(joint).all() and torch.isfinite(marginal).all()):
        raise NumericError("Statistics network produced non-finite scores")
    return joint, marginal


def dv_objective(batch: PairedBatch, t: StatisticsNetwork) -> torch.Tensor:
    """mean_joint[T] - ln mean_marginal[e^T], the log term through log-sum-exp."""
    joint, marginal = _scores(batch, t)
    log_mean_exp = torch.logsumexp(marginal, dim=0) - math.log(marginal.shape[0])
    return joint.mean() - log_mean_exp


def js_objective(batch: PairedBatch, t: StatisticsNetwork) -> torch.Tensor:
    """mean_joint[-softplus(-T)] - mean_marginal[softplus(T)]"""
    joint, marginal = _scores(batch, t)
    return (-softplus(-joint)).mean() - softplus(marginal).mean()


def mi_objective(batch: PairedBatch, t: StatisticsNetwork, representation: Representation) -> torch.Tensor:
    if Representation(representation) is Representation.DV:
        return dv_objective(batch, t)
    return js_objective(batch, t)


def parameter_checksum(module: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, parameter in module.state_dict().items():
        digest.update(name.encode())
        digest.update(parameter.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def _ascent_step(t: StatisticsNetwork, batch: PairedBatch, representation: Representation,
                 learning_rate: Optional[float] = None,
                 optimizer: Optional[torch.optim.Optimizer] = None) -> float:
    # detached inputs: an estimator step can never reach the generator
    objective = mi_objective(batch.detach(), t, representation)
    t.zero_grad(set_to_none=True)
    (-objective).backward()
    for name, parameter in t.named_parameters():
        if parameter.grad is not None and not torch.isfinite(parameter.grad).all():
            raise NumericError(f"Non-finite gradient in statistics network parameter '{name}' "
                               f"(objective {objective.item():.6g})")
    if optimizer is not None:
        optimizer.step()
    else:
        if learning_rate is None:
            raise ValueError("Either a learning rate or an optimizer is required")
        with torch.no_grad():
            for parameter in t.parameters():
                if parameter.grad is not None:
                    # grad holds -dI/dtheta, so this is ascent
                    parameter.sub_(learning_rate * parameter.grad)
    t.zero_grad(set_to_none=True)
    return objective.item()


def estimator_update_step(t: StatisticsNetwork, real_batch: PairedBatch, representation: Representation,
                          learning_rate: Optional[float] = None,
                          optimizer: Optional[torch.optim.Optimizer] = None) -> StatisticsNetwork:
    """
    One gradient-ascent step of the chosen bound on real (frame, audio) pairs.
    With a plain learning rate the update is params + lr * grad, with an optimizer
    the optimizer steps on the negated bound.
    """
    _ascent_step(t, real_batch, representation, learning_rate, optimizer)
    return t


@contextmanager
def frozen(module: nn.Module):
    """Treat the module's parameters as constants while building a graph."""
    flags = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, flag in zip(module.parameters(), flags):
            p.requires_grad_(flag)


def estimate_on_generated(t: StatisticsNetwork, generated_batch: PairedBatch,
                          representation: Representation = Representation.JS) -> MIEstimate:
    """Bound on generated pairs; gradients reach the generated frames but never T."""
    with frozen(t):
        value = mi_objective(generated_batch, t, representation)
    return MIEstimate(value, Representation(representation), PairSource.GENERATED_PAIRS)


def estimate_on_real(t: StatisticsNetwork, real_batch: PairedBatch,
                     representation: Representation = Representation.JS) -> MIEstimate:
    with torch.no_grad():
        value = mi_objective(real_batch, t, representation)
    return MIEstimate(value, Representation(representation), PairSource.REAL_PAIRS)


class MutualInformationEstimator:
    """Statistics network plus its optimizer, owned by the training loop."""
    network: StatisticsNetwork
    representation: Representation
    optimizer: torch.optim.Optimizer

    def __init__(self, network: StatisticsNetwork, representation: Representation = Representation.JS,
                 learning_rate: float = 1e-4, betas: Tuple[float, float] = (0.5, 0.999)):
        if learning_rate <= 0:
            raise ValueError(f"Learning rate must be positive, got {learning_rate}")
        self.network = network
        self.representation = Representation(representation)
        self.optimizer = torch.optim.Adam(network.parameters(), lr=learning_rate, betas=betas)

    def update(self, batch: PairedBatch) -> float:
        """Train on the batch, returns the bound before the step."""
        return _ascent_step(self.network, batch, self.representation, optimizer=self.optimizer)

    def estimate(self, generated_batch: PairedBatch) -> MIEstimate:
        return estimate_on_generated(self.network, generated_batch, self.representation)

    def estimate_real(self, real_batch: PairedBatch) -> MIEstimate:
        return estimate_on_real(self.network, real_batch, self.representation)

    def checksum(self) -> str:
        return parameter_checksum(self.network)
