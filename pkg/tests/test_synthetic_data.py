import os

import numpy as np
import pytest
import torch

from src.info_oracle import GaussianPairSpec, binned_mutual_information
from src.synthetic_data import (MANIFEST_NAME, DatasetCorruptedError, DatasetFormatError, IdentityParams,
                                MouthGeometry, SequenceDatasetConfig, audio_driver, audio_features,
                                generate_sequence_dataset, load_dataset, mouth_region, mouth_trajectory,
                                random_identity, render_scene, render_scene_frame, sample_correlated_gaussians)
from src.tensor_file import file_checksum

SMALL = SequenceDatasetConfig(num_identities=3, frames_per_sequence=6, image_size=16, noise=0.1, seed=3)


class TestGaussians:
    def test_correlation(self):
        batch = sample_correlated_gaussians(GaussianPairSpec(0.9), 20000, torch.Generator().manual_seed(0))
        x, y = batch.joint_frames[:, 0].numpy(), batch.joint_audios[:, 0].numpy()
        assert np.corrcoef(x, y)[0, 1] == pytest.approx(0.9, abs=0.01)
        shuffled = batch.marginal_audios[:, 0].numpy()
        assert abs(np.corrcoef(x, shuffled)[0, 1]) < 0.05

    def test_independent_pairs(self):
        batch = sample_correlated_gaussians(GaussianPairSpec(0.0), 10000, torch.Generator().manual_seed(0))
        x, y = batch.joint_frames[:, 0].numpy(), batch.joint_audios[:, 0].numpy()
        assert np.corrcoef(x, y)[0, 1] == pytest.approx(0.0, abs=0.03)

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            sample_correlated_gaussians(GaussianPairSpec(0.5), 1)


class TestIdentity:
    def test_vector_round_trip(self):
        identity = random_identity(np.random.default_rng(0))
        assert IdentityParams.from_vector(identity.to_vector()) == identity

    def test_values_out_of_range(self):
        vector = random_identity(np.random.default_rng(0)).to_vector()
        vector[0] = 1.5
        with pytest.raises(ValueError):
            IdentityParams.from_vector(vector)


class TestRenderer:
    def test_frame_shape_and_range(self):
        frame, landmarks = render_scene_frame(random_identity(np.random.default_rng(0)), 0.5, 32)
        assert frame.shape == (32, 32, 3)
        assert frame.dtype == np.float32
        assert frame.min() >= 0 and frame.max() <= 1
        assert landmarks.shape == (4, 2)

    def test_landmark_order_and_opening(self):
        geometry = MouthGeometry(64)
        closed, open_ = geometry.landmarks(np.array([0.0, 1.0]))
        cx, cy = geometry.center
        assert closed[2, 1] == closed[3, 1] == np.float32(cy)
        assert open_[3, 1] - open_[2, 1] == pytest.approx(geometry.max_gap)
        assert open_[0, 0] < cx < open_[1, 0]

    def test_mouth_stays_inside_the_region(self):
        region = mouth_region(64)
        assert region == (16, 38, 49, 59)
        scene = render_scene(random_identity(np.random.default_rng(0)), np.array([1.0]), 64)
        points = scene.landmarks[0]
        assert np.all((points[:, 0] >= region.x0) & (points[:, 0] < region.x1))
        assert np.all((points[:, 1] >= region.y0) & (points[:, 1] < region.y1))

    def test_opening_must_be_in_unit_interval(self):
        with pytest.raises(ValueError):
            render_scene_frame(random_identity(np.random.default_rng(0)), 1.2)

    def test_too_small(self):
        with pytest.raises(ValueError):
            render_scene_frame(random_identity(np.random.default_rng(0)), 0.5, 4)


class TestSignals:
    def test_trajectory_spans_unit_interval(self):
        trajectory = mouth_trajectory(32, np.random.default_rng(0))
        assert trajectory.min() == 0.0 and trajectory.max() == 1.0

    def test_noise_free_driver_is_a_copy(self):
        trajectory = mouth_trajectory(16, np.random.default_rng(0))
        driver = audio_driver(trajectory, 0.0, np.random.default_rng(1))
        assert np.array_equal(driver, trajectory)
        assert driver is not trajectory

    def test_noisy_driver_is_clipped(self):
        driver = audio_driver(np.full(100, 0.5, dtype=np.float32), 5.0, np.random.default_rng(1))
        assert driver.min() >= 0 and driver.max() <= 1

    def test_feature_shape(self):
        features = audio_features(mouth_trajectory(10, np.random.default_rng(0)), (20, 13))
        assert features.shape == (10, 20, 13)
        assert np.all(np.isfinite(features))


class TestDataset:
    def test_round_trip_is_bitwise(self, tmp_path):
        dataset = generate_sequence_dataset(SMALL, output_dir=str(tmp_path))
        loaded = load_dataset(str(tmp_path))
        assert loaded.manifest.num_sequences == 3
        for original, reloaded in zip(dataset.records, loaded.records):
            assert reloaded.identity == original.identity
            assert np.array_equal(reloaded.scene.frames, original.scene.frames)
            assert np.array_equal(reloaded.scene.landmarks, original.scene.landmarks)
            assert np.array_equal(reloaded.audio.features, original.audio.features)
            assert np.array_equal(reloaded.identity_face, original.identity_face)

    def test_same_seed_same_bytes(self, tmp_path):
        generate_sequence_dataset(SMALL, output_dir=str(tmp_path / "a"))
        generate_sequence_dataset(SMALL, output_dir=str(tmp_path / "b"))
        files = sorted(name for name in os.listdir(tmp_path / "a") if name.endswith(".bin"))
        assert file_checksum([str(tmp_path / "a" / f) for f in files]) == \
            file_checksum([str(tmp_path / "b" / f) for f in files])

    def test_identity_face_is_the_closed_mouth(self):
        record = generate_sequence_dataset(SMALL).records[0]
        closed, _ = render_scene_frame(record.identity, 0.0, SMALL.image_size)
        assert np.array_equal(record.identity_face, closed)

    def test_driver_tracks_the_mouth_less_as_noise_grows(self):
        estimates = []
        for noise in (0.05, 0.2, 0.45):
            config = SequenceDatasetConfig(num_identities=20, frames_per_sequence=64, image_size=16, noise=noise,
                                           seed=5)
            records = generate_sequence_dataset(config).records
            driver = np.concatenate([record.audio.driver for record in records])
            mouth_open = np.concatenate([record.scene.mouth_open for record in records])
            estimates.append(binned_mutual_information(driver, mouth_open))
        assert estimates[2] > 0
        assert estimates[0] > estimates[1] > estimates[2]

    def test_corrupted_payload(self, tmp_path):
        generate_sequence_dataset(SMALL, output_dir=str(tmp_path))
        path = tmp_path / "seq_0001.bin"
        data = bytearray(path.read_bytes())
        data[100] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(DatasetCorruptedError):
            load_dataset(str(tmp_path))

    def test_missing_payload(self, tmp_path):
        generate_sequence_dataset(SMALL, output_dir=str(tmp_path))
        os.remove(tmp_path / "seq_0002.bin")
        with pytest.raises(DatasetCorruptedError):
            load_dataset(str(tmp_path))

    def test_version_mismatch(self, tmp_path):
        generate_sequence_dataset(SMALL, output_dir=str(tmp_path))
        manifest = tmp_path / MANIFEST_NAME
        manifest.write_text(manifest.read_text().replace("version=1", "version=2"))
        with pytest.raises(DatasetFormatError):
            load_dataset(str(tmp_path))

    def test_split_holds_out_last_identities(self):
        dataset = generate_sequence_dataset(SequenceDatasetConfig(num_identities=10, frames_per_sequence=4,
                                                                  image_size=16))
        train, held_out = dataset.split(0.2)
        assert len(train) == 8 and len(held_out) == 2
        assert all(a is b for a, b in zip(held_out, dataset.records[-2:]))
