import io
import os

import numpy as np
import pytest
import torch

from src.checkpoint import (CheckpointError, checkpoint_roundtrip, load_checkpoint, module_tensors, optimizer_tensors,
                            restore_module, restore_optimizer, restore_rng, rng_tensors, save_checkpoint)
from src.dynamic_attention import MaskPredictor
from src.generation_model import FrameDiscriminator, ModelSpec, TalkingFaceGenerator
from src.mi_estimators import StatisticsNetwork
from src.tensor_file import TensorFormatError, encode_tensor, read_tensor, read_tensors, write_tensors

SPEC = ModelSpec(image_size=16, widths=(4, 8), audio_shape=(6, 5), audio_channels=2, audio_dim=8, hidden=16)


def parameter_sets():
    torch.manual_seed(0)
    return {
        "generator": TalkingFaceGenerator(SPEC),
        "discriminator": FrameDiscriminator(SPEC),
        "estimator": StatisticsNetwork(SPEC.image_shape, SPEC.audio_shape, spec=SPEC, hidden=16),
        "attention": MaskPredictor(),
    }


class TestTensorFile:
    def test_header_layout(self):
        record = encode_tensor(np.array([[1.0, 2.0, 3.0]]))
        assert record[:8] == b"AMIETNS1"
        assert record[8] == 2
        assert record[9:17] == (1).to_bytes(4, "little") + (3).to_bytes(4, "little")
        assert record[17:] == np.array([1, 2, 3], dtype="<f4").tobytes()

    def test_scalar(self):
        assert read_tensor(io.BytesIO(encode_tensor(np.float32(2.5)))).shape == ()

    def test_bad_magic(self):
        with pytest.raises(TensorFormatError):
            read_tensor(io.BytesIO(b"NOTATENS" + bytes(8)))

    def test_truncated_payload(self):
        with pytest.raises(TensorFormatError):
            read_tensor(io.BytesIO(encode_tensor(np.ones(4))[:-2]))

    def test_offsets_and_trailing_bytes(self, tmp_path):
        path = str(tmp_path / "t.bin")
        offsets = write_tensors(path, [("a", np.ones(2)), ("b", np.zeros((2, 2)))])
        assert offsets == {"a": 0, "b": 8 + 1 + 4 + 8}
        with pytest.raises(TensorFormatError):
            read_tensors(path, ["a"])


class TestCheckpoint:
    def test_round_trip_is_bitwise(self, tmp_path):
        modules = parameter_sets()
        loaded = checkpoint_roundtrip(modules, str(tmp_path / "ckpt"))
        for name, module in modules.items():
            original = module_tensors(module)
            assert set(loaded[name]) == set(original)
            for key, array in original.items():
                assert np.array_equal(loaded[name][key], array)

    def test_truncated_file_fails_the_checksum(self, tmp_path):
        path = str(tmp_path / "ckpt")
        checkpoint_roundtrip(parameter_sets(), path)
        target = os.path.join(path, "generator.bin")
        with open(target, "r+b") as f:
            f.truncate(os.path.getsize(target) - 4)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(str(tmp_path / "nothing"))

    def test_overwrite_keeps_a_complete_checkpoint(self, tmp_path):
        path = str(tmp_path / "ckpt")
        save_checkpoint(path, {"a": {"x": np.ones(3)}}, meta={"step": 1})
        save_checkpoint(path, {"a": {"x": np.zeros(3)}}, meta={"step": 2})
        checkpoint = load_checkpoint(path)
        assert checkpoint.meta["step"] == "2"
        assert np.array_equal(checkpoint.groups["a"]["x"], np.zeros(3))
        assert sorted(os.listdir(tmp_path)) == ["ckpt"]

    def test_restore_module(self, tmp_path):
        source, target = MaskPredictor(), MaskPredictor()
        path = str(tmp_path / "ckpt")
        save_checkpoint(path, {"attention": module_tensors(source)})
        restore_module(target, load_checkpoint(path).groups["attention"])
        for a, b in zip(source.parameters(), target.parameters()):
            assert torch.equal(a, b)

    def test_restore_into_wrong_module(self):
        with pytest.raises(CheckpointError):
            restore_module(MaskPredictor(hidden=4), {"layers.0.weight": np.zeros(1)})

    def test_optimizer_and_rng_state(self, tmp_path):
        torch.manual_seed(0)
        model = MaskPredictor(hidden=4)
        optimizer = torch.optim.Adam(model.parameters(), lr=1e-2)
        for _ in range(2):
            optimizer.zero_grad()
            model(torch.rand(1, 3, 8, 8), torch.rand(1, 8, 8)).sum().backward()
            optimizer.step()
        generator = torch.Generator().manual_seed(11)
        torch.rand(5, generator=generator)
        path = str(tmp_path / "ckpt")
        save_checkpoint(path, {"optimizer": optimizer_tensors(optimizer), "rng": rng_tensors(generator)})
        groups = load_checkpoint(path).groups

        fresh = torch.optim.Adam(model.parameters(), lr=1e-2)
        restore_optimizer(fresh, groups["optimizer"])
        for index, state in optimizer.state_dict()["state"].items():
            restored = fresh.state_dict()["state"][index]
            for key in ("exp_avg", "exp_avg_sq"):
                assert torch.equal(state[key], restored[key])
            assert float(state["step"]) == float(restored["step"])

        other = torch.Generator().manual_seed(0)
        restore_rng(other, groups["rng"])
        assert torch.equal(torch.rand(3, generator=other), torch.rand(3, generator=generator))
