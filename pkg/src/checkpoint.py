"""
Checkpoints: one tensor file per parameter set (model parameters, optimizer state,
RNG state) in the dataset tensor format, plus a key=value manifest with checksums.
"""
import logging
import os
import shutil
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np
import torch
import torch.nn as nn
from dotenv import dotenv_values

from src.tensor_file import TensorFormatError, file_checksum, read_tensors, write_tensors

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = "1"
MANIFEST_NAME = "manifest"


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    groups: Dict[str, Dict[str, np.ndarray]]
    meta: Dict[str, str] = field(default_factory=dict)


def module_tensors(module: nn.Module) -> Dict[str, np.ndarray]:
    return {name: tensor.detach().cpu().numpy().astype(np.float32) for name, tensor in module.state_dict().items()}


def optimizer_tensors(optimizer: torch.optim.Optimizer) -> Dict[str, np.ndarray]:
    tensors = {}
    for index, state in optimizer.state_dict()["state"].items():
        for key, value in state.items():
            tensors[f"{index}.{key}"] = torch.as_tensor(value).detach().cpu().numpy().astype(np.float32)
    return tensors


def rng_tensors(generator: torch.Generator) -> Dict[str, np.ndarray]:
    return {"state": generator.get_state().numpy().astype(np.float32)}


def save_checkpoint(path: str, groups: Mapping[str, Mapping[str, np.ndarray]],
                    meta: Optional[Mapping[str, object]] = None) -> str:
    """
    Write all groups into a temporary directory and move it into place, so an interrupted
    write leaves any previous checkpoint at `path` intact.
    """
    temporary = path + ".tmp"
    shutil.rmtree(temporary, ignore_errors=True)
    os.makedirs(temporary)
    try:
        lines = [f"version={CHECKPOINT_VERSION}"]
        for key, value in (meta or {}).items():
            lines.append(f"meta_{key}={value}")
        for group, tensors in groups.items():
            file_name = f"{group}.bin"
            file_path = os.path.join(temporary, file_name)
            write_tensors(file_path, tensors.items())
            lines.append(f"records_{group}={','.join(tensors.keys())}")
            lines.append(f"checksum_{group}={file_checksum([file_path])}")
        with open(os.path.join(temporary, MANIFEST_NAME), "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")
    except OSError:
        shutil.rmtree(temporary, ignore_errors=True)
        raise
    if os.path.isdir(path):
        retired = path + ".old"
        shutil.rmtree(retired, ignore_errors=True)
        os.replace(path, retired)
        os.replace(temporary, path)
        shutil.rmtree(retired, ignore_errors=True)
    else:
        os.replace(temporary, path)
    logger.debug(f"Saved checkpoint {path}")
    return path


def load_checkpoint(path: str) -> Checkpoint:
    manifest_path = os.path.join(path, MANIFEST_NAME)
    if not os.path.isfile(manifest_path):
        raise CheckpointError(f"No checkpoint at {path}")
    values = dotenv_values(manifest_path)
    if values.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {values.get('version')!r}")
    groups = {}
    meta = {}
    for key, value in values.items():
        if key.startswith("meta_"):
            meta[key[len("meta_"):]] = value
        elif key.startswith("records_"):
            group = key[len("records_"):]
            file_path = os.path.join(path, f"{group}.bin")
            if not os.path.isfile(file_path) or file_checksum([file_path]) != values.get(f"checksum_{group}"):
                raise CheckpointError(f"Checksum mismatch for '{group}' in {path}")
            names = [name for name in (value or "").split(",") if name]
            try:
                groups[group] = read_tensors(file_path, names)
            except TensorFormatError as err:
                raise CheckpointError(f"{file_path}: {err}")
    return Checkpoint(groups, meta)


def restore_module(module: nn.Module, tensors: Mapping[str, np.ndarray]):
    reference = module.state_dict()
    if set(reference) != set(tensors):
        raise CheckpointError(f"Checkpoint parameters do not match {type(module).__name__}")
    module.load_state_dict({name: torch.from_numpy(np.array(tensors[name])).to(reference[name].dtype)
                            for name in reference})


def restore_optimizer(optimizer: torch.optim.Optimizer, tensors: Mapping[str, np.ndarray]):
    state = {}
    for name, array in tensors.items():
        index, key = name.split(".", 1)
        state.setdefault(int(index), {})[key] = torch.from_numpy(np.array(array))
    optimizer.load_state_dict({"state": state, "param_groups": optimizer.state_dict()["param_groups"]})


def restore_rng(generator: torch.Generator, tensors: Mapping[str, np.ndarray]):
    generator.set_state(torch.from_numpy(np.array(tensors["state"])).to(torch.uint8))


def checkpoint_roundtrip(modules: Mapping[str, nn.Module], path: str) -> Dict[str, Dict[str, np.ndarray]]:
    """Save the modules' parameters and read them back."""
    save_checkpoint(path, {name: module_tensors(module) for name, module in modules.items()})
    return load_checkpoint(path).groups
