"""
MI estimation benchmarks: neural estimates on correlated Gaussians against the closed
form, and on the synthetic dataset against a binned oracle of the driving signal.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import torch
from progress.bar import Bar

from src.generation_model import ModelSpec
from src.info_oracle import GaussianPairSpec, binned_mutual_information, gaussian_mi_analytic
from src.mi_estimators import MutualInformationEstimator, Representation, StatisticsNetwork, make_marginal_batch
from src.synthetic_data import SequenceDataset, sample_correlated_gaussians

logger = logging.getLogger(__name__)


@dataclass
class BenchmarkResult:
    representation: Representation
    estimate: float
    curve: np.ndarray
    reference: Optional[float] = None

    @property
    def error(self) -> Optional[float]:
        return None if self.reference is None else self.estimate - self.reference

    def to_lines(self) -> List[str]:
        lines = [f"representation={self.representation.value}",
                 f"estimate={self.estimate!r}",
                 f"steps={len(self.curve)}"]
        if self.reference is not None:
            lines += [f"reference={self.reference!r}", f"error={self.error!r}"]
        return lines


def smoothed(curve: np.ndarray, window: int = 100) -> float:
    """Mean of the last `window` objective values."""
    if len(curve) == 0:
        raise ValueError("Empty objective curve")
    return float(np.mean(curve[-window:]))


def _progressbar(message: str, steps: int, verbose: bool):
    return Bar(message, bar_prefix=' [', bar_suffix='] ', empty_fill='_', fill='▓',
               suffix='%(index)d/%(max)d', max=steps) if verbose else None


def gaussian_benchmark(rho: float = 0.9, dim: int = 1, representation: Representation = Representation.DV,
                       batch_size: int = 256, steps: int = 2000, learning_rate: float = 1e-3,
                       hidden: int = 128, seed: int = 0, window: int = 100,
                       verbose: bool = False) -> BenchmarkResult:
    """
    Train a statistics network on fresh correlated Gaussian batches. Each step records the
    bound on its batch before the update, the estimate is the mean of the last `window` values.
    """
    spec = GaussianPairSpec(rho=rho, dim=dim)
    torch.manual_seed(seed)
    rng = torch.Generator().manual_seed(seed)
    estimator = MutualInformationEstimator(StatisticsNetwork((dim,), (dim,), hidden=hidden),
                                           Representation(representation), learning_rate, betas=(0.9, 0.999))
    curve = np.empty(steps)
    progressbar = _progressbar(f"Estimating MI (rho={rho})...", steps, verbose)
    for step in range(steps):
        curve[step] = estimator.update(sample_correlated_gaussians(spec, batch_size, rng))
        if progressbar:
            progressbar.goto(step + 1)
    if progressbar:
        progressbar.finish()
    result = BenchmarkResult(estimator.representation, smoothed(curve, window), curve, gaussian_mi_analytic(spec))
    logger.info(f"rho={rho}: {representation.value} estimate {result.estimate:.4f} nats, "
                f"analytic {result.reference:.4f} nats")
    return result


def driver_mutual_information(dataset: SequenceDataset, bins: int = 16) -> float:
    """Binned MI between the audio driver and the rendered mouth opening, pooled over all sequences."""
    drivers = np.concatenate([r.audio.driver for r in dataset.records])
    openings = np.concatenate([r.scene.mouth_open for r in dataset.records])
    return binned_mutual_information(drivers, openings, bins=bins)


def dataset_benchmark(dataset: SequenceDataset, representation: Representation = Representation.JS,
                      batch_size: int = 64, steps: int = 500, learning_rate: float = 1e-4,
                      spec: Optional[ModelSpec] = None, seed: int = 0, window: int = 100,
                      verbose: bool = False) -> BenchmarkResult:
    """Neural estimate on real (frame, audio feature) pairs, with the binned driver MI as reference."""
    frames = torch.from_numpy(np.concatenate([r.scene.frames for r in dataset.records])).permute(0, 3, 1, 2)
    audio = torch.from_numpy(np.concatenate([r.audio.features for r in dataset.records]))
    if len(frames) < 2:
        raise ValueError("Need at least two frames")
    spec = spec or ModelSpec(image_size=dataset.image_size, audio_shape=tuple(dataset.manifest.feature_shape))
    torch.manual_seed(seed)
    rng = torch.Generator().manual_seed(seed)
    network = StatisticsNetwork(spec.image_shape, spec.audio_shape, spec=spec, hidden=spec.hidden)
    estimator = MutualInformationEstimator(network, Representation(representation), learning_rate)
    curve = np.empty(steps)
    batch_size = min(batch_size, len(frames))
    progressbar = _progressbar("Estimating dataset MI...", steps, verbose)
    for step in range(steps):
        index = torch.randperm(len(frames), generator=rng)[:batch_size]
        curve[step] = estimator.update(make_marginal_batch(frames[index], audio[index], rng))
        if progressbar:
            progressbar.goto(step + 1)
    if progressbar:
        progressbar.finish()
    return BenchmarkResult(estimator.representation, smoothed(curve, window), curve,
                           driver_mutual_information(dataset))
