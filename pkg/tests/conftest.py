import os

import pytest

from src.config import TrainingConfig
from src.synthetic_data import SequenceDatasetConfig, generate_sequence_dataset
from src.trainer import train

TINY_DATASET = SequenceDatasetConfig(num_identities=5, frames_per_sequence=8, image_size=16, noise=0.1, seed=0)


def tiny_config(dataset: str, output_dir: str, **changes) -> TrainingConfig:
    values = dict(seed=0, image_size=16, batch_size=4, rollout_length=2, epochs=2, widths=(4, 8),
                  audio_dim=8, hidden=16, checkpoint_every=1, dataset=dataset, output_dir=output_dir)
    values.update(changes)
    return TrainingConfig(**values)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    path = str(tmp_path_factory.mktemp("data") / "synthetic")
    generate_sequence_dataset(TINY_DATASET, output_dir=path)
    return path


@pytest.fixture
def make_config(tiny_dataset_dir, tmp_path):
    def factory(name: str = "run", **changes) -> TrainingConfig:
        return tiny_config(tiny_dataset_dir, os.path.join(str(tmp_path), name), **changes)
    return factory


@pytest.fixture(scope="session")
def trained_run(tiny_dataset_dir, tmp_path_factory):
    config = tiny_config(tiny_dataset_dir, str(tmp_path_factory.mktemp("runs") / "amie_da"))
    return train(config)
