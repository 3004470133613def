"""
Synthetic paired data with exact ground truth: correlated Gaussians for the MI
estimators and audio-driven mouth scenes for the generation pipeline.
"""
import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from dotenv import dotenv_values
from progress.bar import Bar
from scipy.ndimage import uniform_filter1d

from src.dynamic_attention import Region
from src.info_oracle import GaussianPairSpec
from src.mi_estimators import PairedBatch, make_marginal_batch
from src.tensor_file import TensorFormatError, file_checksum, read_tensors, write_tensors

logger = logging.getLogger(__name__)

DATASET_VERSION = "1"
MANIFEST_NAME = "manifest"
TRAJECTORY_KERNEL = 5
MOUTH_COLOR = np.array([0.35, 0.08, 0.10], dtype=np.float32)
EYE_COLOR = np.array([0.12, 0.10, 0.10], dtype=np.float32)
RECORD_TENSORS = ["identity", "identity_face", "frames", "mouth_open", "landmarks", "driver", "features"]


class DatasetCorruptedError(RuntimeError):
    pass


class DatasetFormatError(RuntimeError):
    pass


def sample_correlated_gaussians(spec: GaussianPairSpec, n: int, rng: Optional[torch.Generator] = None) -> PairedBatch:
    """n pairs with y = rho * x + sqrt(1 - rho^2) * eps per dimension, marginals by derangement"""
    if n < 2:
        raise ValueError(f"Need at least 2 samples, got {n}")
    x = torch.randn(n, spec.dim, generator=rng)
    eps = torch.randn(n, spec.dim, generator=rng)
    y = spec.rho * x + math.sqrt(1.0 - spec.rho ** 2) * eps
    return make_marginal_batch(x, y, rng)


@dataclass(frozen=True)
class IdentityParams:
    """Face appearance in normalized [0, 1] image units."""
    face_tint: Tuple[float, float, float]
    background: Tuple[float, float, float]
    eye_left: Tuple[float, float]
    eye_right: Tuple[float, float]
    eye_radius: float
    face_axes: Tuple[float, float]

    def __post_init__(self):
        values = self.to_vector()
        if not np.all((values >= 0) & (values <= 1)):
            raise ValueError(f"Identity parameters must lie in [0, 1]: {values.tolist()}")

    def to_vector(self) -> np.ndarray:
        return np.array([*self.face_tint, *self.background, *self.eye_left, *self.eye_right,
                         self.eye_radius, *self.face_axes], dtype=np.float32)

    @classmethod
    def from_vector(cls, vector) -> "IdentityParams":
        v = [float(x) for x in np.asarray(vector, dtype=np.float32)]
        if len(v) != 13:
            raise ValueError(f"Identity vector needs 13 values, got {len(v)}")
        return cls(tuple(v[0:3]), tuple(v[3:6]), tuple(v[6:8]), tuple(v[8:10]), v[10], tuple(v[11:13]))


def random_identity(rng: np.random.Generator) -> IdentityParams:
    # float32 rounding first, so a saved identity re-renders bitwise identically
    def draw(low, high):
        return tuple(float(x) for x in np.float32(rng.uniform(low, high)))

    return IdentityParams(
        face_tint=draw([0.55, 0.40, 0.30], [0.90, 0.75, 0.65]),
        background=draw([0.50, 0.50, 0.50], [0.95, 0.95, 0.95]),
        eye_left=draw([0.30, 0.35], [0.40, 0.42]),
        eye_right=draw([0.60, 0.35], [0.70, 0.42]),
        eye_radius=draw([0.04], [0.06])[0],
        face_axes=draw([0.40, 0.44], [0.46, 0.49]),
    )


@dataclass(frozen=True)
class MouthGeometry:
    """Mouth placement in pixels; centres sit on pixel centres so extents rasterize symmetrically."""
    image_size: int

    @property
    def center(self) -> Tuple[float, float]:
        return self.image_size // 2 + 0.5, math.floor(0.75 * self.image_size) + 0.5

    @property
    def half_width(self) -> float:
        return float(max(2, round(0.1875 * self.image_size)))

    @property
    def max_gap(self) -> float:
        return float(max(2, round(0.1875 * self.image_size)))

    def mouth_box(self) -> Region:
        cx, cy = self.center
        return Region(math.floor(cx - self.half_width - 0.5), math.floor(cy - self.max_gap / 2 - 0.5),
                      math.ceil(cx + self.half_width + 0.5), math.ceil(cy + self.max_gap / 2 + 0.5))

    def landmarks(self, mouth_open) -> np.ndarray:
        """(…, 4, 2) points: left corner, right corner, top lip midpoint, bottom lip midpoint"""
        mouth_open = np.asarray(mouth_open, dtype=np.float64)
        cx, cy = self.center
        gap = self.max_gap / 2 * mouth_open
        points = np.empty(mouth_open.shape + (4, 2), dtype=np.float32)
        points[..., 0, 0], points[..., 0, 1] = cx - self.half_width, cy
        points[..., 1, 0], points[..., 1, 1] = cx + self.half_width, cy
        points[..., 2, 0], points[..., 2, 1] = cx, cy - gap
        points[..., 3, 0], points[..., 3, 1] = cx, cy + gap
        return points


def mouth_region(image_size: int, dilation: Optional[int] = None) -> Region:
    """Renderer mouth box dilated by `dilation` pixels (4 px at 64x64, scaled with the size)."""
    if dilation is None:
        dilation = max(1, round(4 * image_size / 64))
    return MouthGeometry(image_size).mouth_box().dilate(dilation, image_size, image_size)


@dataclass
class MouthScene:
    identity: IdentityParams
    frames: np.ndarray
    mouth_open: np.ndarray
    landmarks: np.ndarray

    def __post_init__(self):
        if not (len(self.frames) == len(self.mouth_open) == len(self.landmarks)):
            raise ValueError("Frames, mouth openings and landmarks differ in length")


@dataclass
class AudioTrack:
    driver: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        if len(self.driver) != len(self.features):
            raise ValueError("Driver and features differ in length")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("Audio features must be finite")


def _render(identity: IdentityParams, mouth_open: np.ndarray, image_size: int) -> Tuple[np.ndarray, np.ndarray]:
    mouth_open = np.asarray(mouth_open, dtype=np.float32)
    if mouth_open.ndim != 1 or np.any((mouth_open < 0) | (mouth_open > 1)) or not np.all(np.isfinite(mouth_open)):
        raise ValueError("mouth_open values must lie in [0, 1]")
    if image_size < 8:
        raise ValueError(f"Image size {image_size} is too small to draw a face")
    pixels = np.arange(image_size) + 0.5
    xs, ys = np.meshgrid(pixels, pixels)
    u, v = xs / image_size, ys / image_size

    base = np.empty((image_size, image_size, 3), dtype=np.float32)
    base[:] = np.array(identity.background, dtype=np.float32)
    ax, ay = identity.face_axes
    face = ((u - 0.5) / ax) ** 2 + ((v - 0.5) / ay) ** 2 <= 1.0
    base[face] = np.array(identity.face_tint, dtype=np.float32)
    for ex, ey in (identity.eye_left, identity.eye_right):
        base[(u - ex) ** 2 + (v - ey) ** 2 <= identity.eye_radius ** 2] = EYE_COLOR

    geometry = MouthGeometry(image_size)
    cx, cy = geometry.center
    frames = np.repeat(base[None], len(mouth_open), axis=0)
    horizontal = ((xs - cx) / (geometry.half_width + 0.5)) ** 2
    for i, opening in enumerate(mouth_open):
        # lips are drawn half a pixel beyond the opening, so a closed mouth is a one-pixel line
        vertical_radius = geometry.max_gap / 2 * float(opening) + 0.5
        frames[i][horizontal + ((ys - cy) / vertical_radius) ** 2 <= 1.0] = MOUTH_COLOR
    return frames, geometry.landmarks(mouth_open)


def render_scene_frame(identity: IdentityParams, mouth_open: float, image_size: int = 64) -> Tuple[np.ndarray, np.ndarray]:
    """
    Draw one frame.
    :return: (H x W x 3 float32 image in [0, 1], 4 x 2 landmark array in pixel coordinates)
    """
    if not 0.0 <= mouth_open <= 1.0:
        raise ValueError(f"mouth_open must lie in [0, 1], got {mouth_open}")
    frames, landmarks = _render(identity, np.array([mouth_open]), image_size)
    return frames[0], landmarks[0]


def render_scene(identity: IdentityParams, mouth_open, image_size: int = 64) -> MouthScene:
    frames, landmarks = _render(identity, mouth_open, image_size)
    return MouthScene(identity, frames, np.asarray(mouth_open, dtype=np.float32), landmarks)


def mouth_trajectory(n: int, rng: np.random.Generator) -> np.ndarray:
    """Gaussian noise smoothed with a 5-frame box kernel, rescaled to [0, 1]."""
    smoothed = uniform_filter1d(rng.standard_normal(n), size=TRAJECTORY_KERNEL, mode="nearest")
    spread = smoothed.max() - smoothed.min()
    if spread == 0:
        return np.full(n, 0.5, dtype=np.float32)
    return ((smoothed - smoothed.min()) / spread).astype(np.float32)


def audio_driver(mouth_open: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    if noise < 0:
        raise ValueError(f"Noise must be non-negative, got {noise}")
    mouth_open = np.asarray(mouth_open, dtype=np.float32)
    if noise == 0:
        return mouth_open.copy()
    noisy = mouth_open + noise * rng.standard_normal(mouth_open.shape)
    return np.clip(noisy, 0.0, 1.0).astype(np.float32)


def audio_features(driver: np.ndarray, shape: Tuple[int, int] = (20, 13)) -> np.ndarray:
    """
    Per-frame (T x F) features: a T-sample window of the driver around the frame
    (linear interpolation over frames i-1 .. i+1), expanded into F cosine channels.
    """
    steps, channels = shape
    driver = np.asarray(driver, dtype=np.float64)
    n = len(driver)
    positions = np.arange(n)[:, None] + np.linspace(-1.0, 1.0, steps)[None, :]
    window = np.interp(positions, np.arange(n), driver)
    features = np.empty((n, steps, channels), dtype=np.float64)
    features[:, :, 0] = window
    for c in range(1, channels):
        features[:, :, c] = np.cos(math.pi * c * window)
    return features.astype(np.float32)


@dataclass(frozen=True)
class SequenceDatasetConfig:
    num_identities: int = 10
    frames_per_sequence: int = 32
    image_size: int = 64
    noise: float = 0.1
    feature_shape: Tuple[int, int] = (20, 13)
    seed: int = 0

    def __post_init__(self):
        if self.num_identities < 1 or self.frames_per_sequence < 2:
            raise ValueError("Need at least one identity and two frames per sequence")
        if self.noise < 0:
            raise ValueError(f"Noise must be non-negative, got {self.noise}")


@dataclass
class SequenceRecord:
    identity: IdentityParams
    identity_face: np.ndarray
    scene: MouthScene
    audio: AudioTrack


@dataclass
class DatasetManifest:
    version: str
    seed: int
    num_sequences: int
    frames_per_sequence: int
    image_shape: Tuple[int, int, int]
    feature_shape: Tuple[int, int]
    noise: float
    sequences: List[Tuple[str, Dict[str, int]]] = field(default_factory=list)
    checksum: str = ""

    def to_lines(self) -> List[str]:
        lines = [f"version={self.version}",
                 f"seed={self.seed}",
                 f"num_sequences={self.num_sequences}",
                 f"frames_per_sequence={self.frames_per_sequence}",
                 f"image_shape={','.join(map(str, self.image_shape))}",
                 f"feature_shape={','.join(map(str, self.feature_shape))}",
                 f"noise={self.noise!r}"]
        for index, (file_name, offsets) in enumerate(self.sequences):
            listed = ",".join(f"{name}:{offset}" for name, offset in offsets.items())
            lines.append(f"sequence_{index:04d}={file_name};{listed}")
        lines.append(f"checksum={self.checksum}")
        return lines

    @classmethod
    def from_mapping(cls, values: Dict[str, str]) -> "DatasetManifest":
        if values.get("version") != DATASET_VERSION:
            raise DatasetFormatError(f"Unsupported dataset version {values.get('version')!r}, "
                                     f"expected {DATASET_VERSION}")
        try:
            num_sequences = int(values["num_sequences"])
            sequences = []
            for index in range(num_sequences):
                file_name, listed = values[f"sequence_{index:04d}"].split(";")
                offsets = {name: int(offset) for name, offset in (item.split(":") for item in listed.split(","))}
                sequences.append((file_name, offsets))
            return cls(version=values["version"],
                       seed=int(values["seed"]),
                       num_sequences=num_sequences,
                       frames_per_sequence=int(values["frames_per_sequence"]),
                       image_shape=tuple(int(x) for x in values["image_shape"].split(",")),
                       feature_shape=tuple(int(x) for x in values["feature_shape"].split(",")),
                       noise=float(values["noise"]),
                       sequences=sequences,
                       checksum=values["checksum"])
        except (KeyError, ValueError, TypeError, AttributeError) as err:
            raise DatasetFormatError(f"Malformed manifest: {err}")


@dataclass
class SequenceDataset:
    manifest: DatasetManifest
    records: List[SequenceRecord]

    @property
    def image_size(self) -> int:
        return self.manifest.image_shape[0]

    def split(self, holdout: float = 0.2) -> Tuple[List[SequenceRecord], List[SequenceRecord]]:
        """Training and held-out identities; the last identities are held out, at least one."""
        if len(self.records) < 2:
            raise ValueError("Need at least two identities to hold one out")
        held_out = min(len(self.records) - 1, max(1, round(holdout * len(self.records))))
        return self.records[:-held_out], self.records[-held_out:]


def _generate_record(config: SequenceDatasetConfig, rng: np.random.Generator) -> SequenceRecord:
    identity = random_identity(rng)
    mouth_open = mouth_trajectory(config.frames_per_sequence, rng)
    driver = audio_driver(mouth_open, config.noise, rng)
    scene = render_scene(identity, mouth_open, config.image_size)
    identity_face, _ = render_scene_frame(identity, 0.0, config.image_size)
    return SequenceRecord(identity, identity_face, scene, AudioTrack(driver, audio_features(driver, config.feature_shape)))


def generate_sequence_dataset(config: SequenceDatasetConfig, rng: Optional[np.random.Generator] = None,
                              output_dir: Optional[str] = None, verbose: bool = False) -> SequenceDataset:
    """
    One sequence per identity. A smooth random mouth trajectory drives both the rendered
    video and the audio driver (plus noise), so the two modalities are dependent.
    Written to output_dir when given.
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    seeds = rng.integers(0, 2 ** 63 - 1, size=config.num_identities)
    records = []
    progressbar = Bar("Rendering sequences...", bar_prefix=' [', bar_suffix='] ', empty_fill='_',
                      fill='▓', suffix='%(index)d/%(max)d', max=config.num_identities) if verbose else None
    for i, seed in enumerate(seeds):
        records.append(_generate_record(config, np.random.default_rng(int(seed))))
        if progressbar:
            progressbar.goto(i + 1)
    if progressbar:
        progressbar.finish()
    manifest = DatasetManifest(version=DATASET_VERSION,
                               seed=config.seed,
                               num_sequences=config.num_identities,
                               frames_per_sequence=config.frames_per_sequence,
                               image_shape=(config.image_size, config.image_size, 3),
                               feature_shape=tuple(config.feature_shape),
                               noise=config.noise)
    dataset = SequenceDataset(manifest, records)
    if output_dir is not None:
        save_dataset(dataset, output_dir)
    return dataset


def save_dataset(dataset: SequenceDataset, path: str) -> DatasetManifest:
    os.makedirs(path, exist_ok=True)
    sequences = []
    file_paths = []
    for index, record in enumerate(dataset.records):
        file_name = f"seq_{index:04d}.bin"
        file_path = os.path.join(path, file_name)
        offsets = write_tensors(file_path, [
            ("identity", record.identity.to_vector()),
            ("identity_face", record.identity_face),
            ("frames", record.scene.frames),
            ("mouth_open", record.scene.mouth_open),
            ("landmarks", record.scene.landmarks),
            ("driver", record.audio.driver),
            ("features", record.audio.features),
        ])
        sequences.append((file_name, offsets))
        file_paths.append(file_path)
    manifest = replace(dataset.manifest, num_sequences=len(dataset.records), sequences=sequences,
                       checksum=file_checksum(file_paths))
    with open(os.path.join(path, MANIFEST_NAME), "w", encoding="utf-8") as f:
        f.write("\n".join(manifest.to_lines()) + "\n")
    dataset.manifest = manifest
    logger.info(f"Wrote {len(dataset.records)} sequences to {path}")
    return manifest


def load_dataset(path: str) -> SequenceDataset:
    manifest_path = os.path.join(path, MANIFEST_NAME)
    if not os.path.isfile(manifest_path):
        raise FileNotFoundError(f"No dataset manifest in {path}")
    manifest = DatasetManifest.from_mapping(dotenv_values(manifest_path))
    file_paths = [os.path.join(path, file_name) for file_name, _ in manifest.sequences]
    missing = [p for p in file_paths if not os.path.isfile(p)]
    if missing:
        raise DatasetCorruptedError(f"Missing payload files: {', '.join(missing)}")
    if file_checksum(file_paths) != manifest.checksum:
        raise DatasetCorruptedError(f"Checksum mismatch for dataset {path}")
    records = []
    for file_path in file_paths:
        try:
            tensors = read_tensors(file_path, RECORD_TENSORS)
        except TensorFormatError as err:
            raise DatasetCorruptedError(f"{file_path}: {err}")
        identity = IdentityParams.from_vector(tensors["identity"])
        scene = MouthScene(identity, tensors["frames"], tensors["mouth_open"], tensors["landmarks"])
        audio = AudioTrack(tensors["driver"], tensors["features"])
        if scene.frames.shape[1:] != manifest.image_shape or audio.features.shape[1:] != manifest.feature_shape:
            raise DatasetFormatError(f"{file_path} does not match the manifest shapes")
        records.append(SequenceRecord(identity, tensors["identity_face"], scene, audio))
    return SequenceDataset(manifest, records)
