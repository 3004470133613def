"""
Evaluation metrics: PSNR, SSIM, landmark distance and the 2-D PCA view of real
versus generated frames. Images are numpy arrays H x W or H x W x C in [0, 1].
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter
from sklearn.decomposition import PCA

from src.dynamic_attention import Region

logger = logging.getLogger(__name__)

SSIM_SIGMA = 1.5
LUMA = np.array([0.299, 0.587, 0.114])
# luminance below this counts as mouth
MOUTH_THRESHOLD = 0.3


class DetectionError(RuntimeError):
    pass


def _pair(real, generated):
    real = np.asarray(real, dtype=np.float64)
    generated = np.asarray(generated, dtype=np.float64)
    if real.shape != generated.shape:
        raise ValueError(f"Shape mismatch: {real.shape} vs {generated.shape}")
    return real, generated


def psnr(real, generated, max_value: float = 1.0) -> float:
    """10 log10(max^2 / MSE) over all channels; +inf for identical images."""
    if max_value <= 0:
        raise ValueError(f"max_value must be positive, got {max_value}")
    real, generated = _pair(real, generated)
    mse = float(np.mean((real - generated) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(max_value ** 2 / mse)


def to_grayscale(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    if image.ndim == 3 and image.shape[2] == 3:
        return image @ LUMA
    if image.ndim == 3:
        return image.mean(axis=2)
    raise ValueError(f"Expected an H x W or H x W x C image, got shape {image.shape}")


def ssim(real, generated, window: int = 11, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """
    Mean local SSIM with an 11x11 Gaussian window (sigma 1.5) over the interior where
    the window fits; colour images are compared on luminance.
    """
    real, generated = _pair(real, generated)
    x, y = to_grayscale(real), to_grayscale(generated)
    if min(x.shape) < window:
        raise ValueError(f"Image {x.shape} is smaller than the {window}x{window} window")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    radius = window // 2
    truncate = radius / SSIM_SIGMA

    def blur(image):
        return gaussian_filter(image, sigma=SSIM_SIGMA, truncate=truncate, mode="reflect")

    mu_x, mu_y = blur(x), blur(y)
    var_x = blur(x * x) - mu_x * mu_x
    var_y = blur(y * y) - mu_y * mu_y
    cov = blur(x * y) - mu_x * mu_y
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2))
    interior = ssim_map[radius:ssim_map.shape[0] - radius, radius:ssim_map.shape[1] - radius]
    return float(np.clip(interior.mean(), -1.0, 1.0))


def lmd(real_landmarks, generated_landmarks) -> float:
    """Mean Euclidean distance over frames and points, in pixels."""
    real = np.asarray(real_landmarks, dtype=np.float64)
    generated = np.asarray(generated_landmarks, dtype=np.float64)
    if real.shape != generated.shape or real.shape[-1] != 2:
        raise ValueError(f"Landmark sets differ: {real.shape} vs {generated.shape}")
    return float(np.linalg.norm(real - generated, axis=-1).mean())


def extract_landmarks(frame, region: Region) -> np.ndarray:
    """
    Find the dark mouth inside the region and return its corners and lip midpoints
    as pixel-centre coordinates, in the renderer's order (left, right, top, bottom).
    """
    gray = to_grayscale(frame)
    region.check_within(*gray.shape)
    rows, cols = region.slices()
    ys, xs = np.nonzero(gray[rows, cols] < MOUTH_THRESHOLD)
    if len(xs) == 0:
        raise DetectionError(f"No mouth pixels inside region {tuple(region)}")
    x_min, x_max = xs.min() + region.x0 + 0.5, xs.max() + region.x0 + 0.5
    y_min, y_max = ys.min() + region.y0 + 0.5, ys.max() + region.y0 + 0.5
    x_mid, y_mid = (x_min + x_max) / 2, (y_min + y_max) / 2
    return np.array([[x_min, y_mid], [x_max, y_mid], [x_mid, y_min], [x_mid, y_max]], dtype=np.float32)


def region_center_landmarks(region: Region) -> np.ndarray:
    x_mid, y_mid = (region.x0 + region.x1) / 2, (region.y0 + region.y1) / 2
    return np.array([[x_mid, y_mid]] * 4, dtype=np.float32)


@dataclass
class SequenceMetrics:
    sequence: int
    psnr_db: float
    ssim: float
    lmd_px: float
    detection_failures: int = 0

    def to_record(self) -> dict:
        """JSON-ready fields; an infinite PSNR (identical frames) becomes None."""
        psnr_db = self.psnr_db if math.isfinite(self.psnr_db) else None
        return {"sequence": self.sequence, "psnr_db": psnr_db, "ssim": self.ssim,
                "lmd_px": self.lmd_px, "detection_failures": self.detection_failures}


def evaluate_frames(real_frames, generated_frames, real_landmarks, region: Region, sequence: int = 0) -> SequenceMetrics:
    """
    Metrics for one sequence of H x W x C frames. Frames whose mouth cannot be detected
    get landmarks collapsed at the region centre and are counted as failures.
    """
    real_frames = np.asarray(real_frames)
    generated_frames = np.asarray(generated_frames)
    if real_frames.shape != generated_frames.shape or len(real_frames) != len(real_landmarks):
        raise ValueError("Real frames, generated frames and landmarks differ in length or shape")
    detected = []
    failures = 0
    for frame in generated_frames:
        try:
            detected.append(extract_landmarks(frame, region))
        except DetectionError:
            detected.append(region_center_landmarks(region))
            failures += 1
    return SequenceMetrics(
        sequence=sequence,
        psnr_db=float(np.mean([psnr(r, g) for r, g in zip(real_frames, generated_frames)])),
        ssim=float(np.mean([ssim(r, g) for r, g in zip(real_frames, generated_frames)])),
        lmd_px=lmd(real_landmarks, np.stack(detected)),
        detection_failures=failures,
    )


@dataclass
class MetricReport:
    sequences: List[SequenceMetrics] = field(default_factory=list)
    mi_real: Optional[float] = None
    mi_generated: Optional[float] = None
    pca_centroid_distance: Optional[float] = None

    @property
    def psnr_db(self) -> float:
        return float(np.mean([s.psnr_db for s in self.sequences]))

    @property
    def ssim(self) -> float:
        return float(np.mean([s.ssim for s in self.sequences]))

    @property
    def lmd_px(self) -> float:
        return float(np.mean([s.lmd_px for s in self.sequences]))

    @property
    def detection_failures(self) -> int:
        return sum(s.detection_failures for s in self.sequences)

    def to_lines(self) -> List[str]:
        lines = [f"psnr_db={self.psnr_db!r}",
                 f"ssim={self.ssim!r}",
                 f"lmd_px={self.lmd_px!r}",
                 f"detection_failures={self.detection_failures}",
                 f"num_sequences={len(self.sequences)}"]
        for name in ("mi_real", "mi_generated", "pca_centroid_distance"):
            value = getattr(self, name)
            if value is not None:
                lines.append(f"{name}={value!r}")
        for s in self.sequences:
            lines.append(f"sequence_{s.sequence:04d}={s.psnr_db!r},{s.ssim!r},{s.lmd_px!r},{s.detection_failures}")
        return lines


@dataclass
class Projection:
    real: np.ndarray
    generated: np.ndarray
    explained_variance: np.ndarray
    total_variance: float
    reconstruction_error: float

    @property
    def centroid_distance(self) -> float:
        return float(np.linalg.norm(self.real.mean(axis=0) - self.generated.mean(axis=0)))


def pca_project_2d(real_frames: Sequence, generated_frames: Sequence) -> Projection:
    """Fit PCA on the union of both frame sets and project each onto the top two components."""
    real = np.asarray(real_frames, dtype=np.float64).reshape(len(real_frames), -1)
    generated = np.asarray(generated_frames, dtype=np.float64).reshape(len(generated_frames), -1)
    if len(real) < 3 or len(generated) < 3:
        raise ValueError("Need at least 3 frames in each set")
    if real.shape[1] != generated.shape[1]:
        raise ValueError("Frame sets differ in dimension")
    union = np.concatenate([real, generated])
    pca = PCA(n_components=min(2, union.shape[1]), svd_solver="full").fit(union)
    centered = union - pca.mean_
    reconstructed = pca.inverse_transform(pca.transform(union)) - pca.mean_
    n = len(union)
    # variances normalized by n - 1, like PCA.explained_variance_
    total_variance = float((centered ** 2).sum() / (n - 1))
    reconstruction_error = float(((centered - reconstructed) ** 2).sum() / (n - 1))
    return Projection(real=pca.transform(real), generated=pca.transform(generated),
                      explained_variance=pca.explained_variance_.copy(),
                      total_variance=total_variance, reconstruction_error=reconstruction_error)
