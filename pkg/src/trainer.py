"""
The alternating training loop (discriminator, MI estimator, generator), its
checkpoints and run log, and the evaluation of a run on held-out identities.
"""
import json
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Union

import numpy as np
import torch
from progress.bar import Bar

from src.checkpoint import (CheckpointError, load_checkpoint, module_tensors, optimizer_tensors,
                            restore_module, restore_optimizer, restore_rng, rng_tensors, save_checkpoint)
from src.config import ConfigError, TrainingConfig, config_from_mapping, load_config_file
from src.dynamic_attention import DynamicAttention, Region
from src.generation_model import (FrameDiscriminator, ModelSpec, TalkingFaceGenerator, discriminator_forward,
                                  generate_sequence)
from src.losses import (FeatureExtractor, discriminator_loss, generator_adversarial_loss, lip_loss, mi_loss,
                        perceptual_loss, total_loss)
from src.metrics import MetricReport, evaluate_frames, pca_project_2d
from src.mi_estimators import (MutualInformationEstimator, NumericError, StatisticsNetwork, derangement, frozen,
                               make_marginal_batch, parameter_checksum)
from src.synthetic_data import SequenceDataset, SequenceRecord, load_dataset, mouth_region
from src.tensor_file import write_tensors

logger = logging.getLogger(__name__)

CONFIG_NAME = "config.env"
RUN_LOG_NAME = "run_log.jsonl"
REPORT_NAME = "report.txt"
PROJECTION_NAME = "projection.bin"
CHECKPOINT_DIR = "checkpoints"
EPOCH_PREFIX = "epoch_"


class TrainingAborted(RuntimeError):
    pass


def seed_everything(seed: int) -> torch.Generator:
    """Seed the global torch state used for initialization; returns the generator for all training randomness."""
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    return torch.Generator().manual_seed(seed)


@dataclass
class RunArtifacts:
    run_dir: str
    config_path: str
    run_log: str
    checkpoints: List[str] = field(default_factory=list)
    report: Optional[str] = None
    plots: List[str] = field(default_factory=list)
    metrics: Optional[MetricReport] = None


@dataclass
class WindowBatch:
    identity_face: torch.Tensor  # (B, C, H, W)
    frames: torch.Tensor  # (B, L, C, H, W)
    audio: torch.Tensor  # (B, L, T, F)
    initial_prev: torch.Tensor  # (B, C, H, W)


class SequenceTensors:
    """Records of a dataset stacked into channel-first tensors."""

    def __init__(self, records: List[SequenceRecord]):
        if not records:
            raise ValueError("No sequences to train on")
        self.frames = torch.from_numpy(np.stack([r.scene.frames for r in records])).permute(0, 1, 4, 2, 3).contiguous()
        self.audio = torch.from_numpy(np.stack([r.audio.features for r in records]))
        self.identity_faces = torch.from_numpy(np.stack([r.identity_face for r in records])).permute(0, 3, 1, 2).contiguous()

    @property
    def num_sequences(self) -> int:
        return self.frames.shape[0]

    @property
    def frames_per_sequence(self) -> int:
        return self.frames.shape[1]

    def num_windows(self, length: int) -> int:
        return self.num_sequences * (self.frames_per_sequence - length + 1)

    def sample_windows(self, batch_size: int, length: int, generator: torch.Generator) -> WindowBatch:
        """
        Random windows of `length` consecutive frames. The frame before a window (or the
        identity face for windows at the sequence start) seeds the rollout.
        """
        if not 1 <= length <= self.frames_per_sequence:
            raise ValueError(f"Window length {length} does not fit sequences of {self.frames_per_sequence} frames")
        sequences = torch.randint(self.num_sequences, (batch_size,), generator=generator)
        starts = torch.randint(self.frames_per_sequence - length + 1, (batch_size,), generator=generator)
        positions = starts[:, None] + torch.arange(length)[None, :]
        identity_face = self.identity_faces[sequences]
        previous = self.frames[sequences, (starts - 1).clamp(min=0)]
        initial_prev = torch.where((starts > 0)[:, None, None, None], previous, identity_face)
        return WindowBatch(identity_face=identity_face,
                           frames=self.frames[sequences[:, None], positions],
                           audio=self.audio[sequences[:, None], positions],
                           initial_prev=initial_prev)


def model_spec_for(config: TrainingConfig, dataset: SequenceDataset) -> ModelSpec:
    if dataset.image_size != config.image_size:
        raise ConfigError(f"Configured image size {config.image_size} does not match the "
                          f"dataset's {dataset.image_size}")
    return replace(config.model_spec, audio_shape=tuple(dataset.manifest.feature_shape))


class TrainingModels:
    """Every trainable part of one run plus its optimizer; absent parts are None."""
    generator: TalkingFaceGenerator
    discriminator: FrameDiscriminator
    attention: Optional[DynamicAttention] = None
    estimator: Optional[MutualInformationEstimator] = None

    def __init__(self, config: TrainingConfig, spec: ModelSpec, region: Region):
        mode = config.ablation
        self.generator = TalkingFaceGenerator(spec)
        self.discriminator = FrameDiscriminator(spec)
        if mode.da_enabled:
            self.attention = DynamicAttention(spec.image_size, region, spec.channels)
        if mode.mi_enabled:
            network = StatisticsNetwork(spec.image_shape, spec.audio_shape, spec=spec, hidden=config.hidden)
            self.estimator = MutualInformationEstimator(network, mode.mi_representation, config.lr_estimator)
        generator_parameters = list(self.generator.parameters())
        if self.attention is not None:
            # the mask predictor learns through the generator's loss
            generator_parameters += list(self.attention.parameters())
        self.generator_optimizer = torch.optim.Adam(generator_parameters, lr=config.lr_generator, betas=(0.5, 0.999))
        self.discriminator_optimizer = torch.optim.Adam(self.discriminator.parameters(), lr=config.lr_discriminator,
                                                        betas=(0.5, 0.999))

    def modules(self) -> Dict[str, torch.nn.Module]:
        modules = {"generator": self.generator, "discriminator": self.discriminator}
        if self.attention is not None:
            modules["attention"] = self.attention
        if self.estimator is not None:
            modules["estimator"] = self.estimator.network
        return modules

    def optimizers(self) -> Dict[str, torch.optim.Optimizer]:
        optimizers = {"generator": self.generator_optimizer, "discriminator": self.discriminator_optimizer}
        if self.estimator is not None:
            optimizers["estimator"] = self.estimator.optimizer
        return optimizers

    def checksums(self) -> Dict[str, str]:
        return {name: parameter_checksum(module) for name, module in self.modules().items()}

    def state(self, generator: torch.Generator) -> Dict[str, Dict[str, np.ndarray]]:
        groups = {name: module_tensors(module) for name, module in self.modules().items()}
        for name, optimizer in self.optimizers().items():
            groups[f"optimizer_{name}"] = optimizer_tensors(optimizer)
        groups["rng"] = rng_tensors(generator)
        return groups

    def restore(self, groups: Dict[str, Dict[str, np.ndarray]], generator: Optional[torch.Generator] = None,
                with_optimizers: bool = True):
        for name, module in self.modules().items():
            if name not in groups:
                raise CheckpointError(f"Checkpoint has no '{name}' parameters")
            restore_module(module, groups[name])
        if with_optimizers:
            for name, optimizer in self.optimizers().items():
                restore_optimizer(optimizer, groups.get(f"optimizer_{name}", {}))
        if generator is not None:
            restore_rng(generator, groups["rng"])


def checkpoint_names(run_dir: str) -> List[str]:
    directory = os.path.join(run_dir, CHECKPOINT_DIR)
    if not os.path.isdir(directory):
        return []
    return sorted(name for name in os.listdir(directory)
                  if name.startswith(EPOCH_PREFIX) and not name.endswith((".tmp", ".old")))


def latest_checkpoint(run_dir: str) -> str:
    names = checkpoint_names(run_dir)
    if not names:
        raise CheckpointError(f"No checkpoint in {run_dir}")
    return names[-1]


def load_run_config(run_dir: str) -> TrainingConfig:
    return config_from_mapping(load_config_file(os.path.join(run_dir, CONFIG_NAME))).validate()


def read_run_log(run_dir: str, kind: Optional[str] = None) -> List[dict]:
    path = os.path.join(run_dir, RUN_LOG_NAME)
    if not os.path.isfile(path):
        raise FileNotFoundError(f"No run log in {run_dir}")
    with open(path, encoding="utf-8") as f:
        records = [json.loads(line) for line in f if line.strip()]
    return [r for r in records if kind is None or r.get("kind") == kind]


class Trainer:
    """
    Owns all mutable training state of one run directory. Each step updates the
    discriminator, then the MI estimator, then the generator, on one batch of windows.
    """
    verbose = False

    def __init__(self, config: TrainingConfig, dataset: Optional[SequenceDataset] = None, verbose: bool = False):
        self.config = config.validate()
        self.verbose = verbose
        self.dataset = dataset if dataset is not None else load_dataset(config.dataset)
        self.spec = model_spec_for(config, self.dataset)
        train_records, _ = self.dataset.split(config.holdout)
        self.data = SequenceTensors(train_records)
        if config.rollout_length > self.data.frames_per_sequence:
            raise ConfigError(f"rollout_length {config.rollout_length} exceeds the "
                              f"{self.data.frames_per_sequence} frames per sequence")
        self.region = mouth_region(self.spec.image_size)
        self.rng = seed_everything(config.seed)
        self.models = TrainingModels(config, self.spec, self.region)
        self.extractor = FeatureExtractor(self.spec.channels, seed=config.extractor_seed)
        self.weights = config.loss_weights
        self.schedule = config.schedule
        self.mode = config.ablation
        windows = self.data.num_windows(config.rollout_length)
        self.steps_per_epoch = max(1, -(-windows // config.batch_size))
        self.total_steps = config.max_steps or config.epochs * self.steps_per_epoch
        # steps spanned by the configured epochs; kept from the first checkpoint on resume
        self.schedule_steps = self.total_steps
        self.step_index = 0
        self.run_dir = config.output_dir
        self.checkpoints: List[str] = []

    def log(self, message):
        if self.verbose:
            logger.info(message)

    @property
    def run_log(self) -> str:
        return os.path.join(self.run_dir, RUN_LOG_NAME)

    def epoch_at(self, step: int) -> float:
        """Fractional epoch reached after `step` steps, scaled so the original budget spans all epochs."""
        return step * self.config.epochs / self.schedule_steps

    def attention_rate(self, step: int) -> float:
        if self.models.attention is None:
            return 1.0
        epoch = self.epoch_at(step)
        if epoch >= self.schedule.total_epochs:
            return 1.0
        return self.schedule.rate(epoch)

    def _write_record(self, record: dict):
        with open(self.run_log, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, allow_nan=False) + "\n")

    def save(self, name: str) -> str:
        path = os.path.join(self.run_dir, CHECKPOINT_DIR, name)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        save_checkpoint(path, self.models.state(self.rng),
                        meta={"step": self.step_index, "epoch": self.epoch_at(self.step_index),
                              "schedule_steps": self.schedule_steps})
        self.log(f"Saved checkpoint {name}")
        return path

    def restore(self, name: Optional[str] = None):
        """Load parameters, optimizer and RNG state of a checkpoint and continue after its step."""
        name = name or latest_checkpoint(self.run_dir)
        checkpoint = load_checkpoint(os.path.join(self.run_dir, CHECKPOINT_DIR, name))
        self.models.restore(checkpoint.groups, self.rng)
        self.step_index = int(checkpoint.meta.get("step", 0))
        self.schedule_steps = int(checkpoint.meta.get("schedule_steps", self.schedule_steps))
        self.log(f"Resuming from {name} at step {self.step_index}")

    def train_step(self) -> dict:
        config = self.config
        models = self.models
        epoch = self.epoch_at(self.step_index)
        rate = self.attention_rate(self.step_index)
        updates = []
        checksums = []

        def trace(phase):
            updates.append(phase)
            if config.trace_checksums:
                checksums.append(dict(phase=phase, **models.checksums()))

        if config.trace_checksums:
            checksums.append(dict(phase="start", **models.checksums()))

        window = self.data.sample_windows(config.batch_size, config.rollout_length, self.rng)
        hook = models.attention.rollout_hook(rate) if models.attention is not None else None
        generated = generate_sequence(models.generator, window.identity_face, window.audio,
                                      identity_hook=hook, real_frames=window.frames,
                                      teacher_forcing=config.teacher_forcing, generator=self.rng,
                                      initial_prev=window.initial_prev)
        real = window.frames.flatten(0, 1)
        fake = generated.flatten(0, 1)
        audio = window.audio.flatten(0, 1)

        # discriminator
        d_real = discriminator_forward(models.discriminator, real, audio)
        d_fake = discriminator_forward(models.discriminator, fake.detach(), audio)
        d_mismatch = None
        if config.mismatch_negatives:
            d_mismatch = discriminator_forward(models.discriminator, real, audio[derangement(len(audio), self.rng)])
        loss_d = discriminator_loss(d_real, d_fake, d_mismatch)
        if not torch.isfinite(loss_d):
            raise NumericError(f"Non-finite discriminator loss: {loss_d.item()}")
        models.discriminator_optimizer.zero_grad(set_to_none=True)
        loss_d.backward()
        models.discriminator_optimizer.step()
        trace("discriminator")

        # estimator
        estimator_objective = None
        if models.estimator is not None:
            source = real if self.mode.asymmetric else fake.detach()
            estimator_objective = models.estimator.update(make_marginal_batch(source, audio, self.rng))
            trace("estimator")

        # generator
        with frozen(models.discriminator):
            gan = generator_adversarial_loss(discriminator_forward(models.discriminator, fake, audio))
        perc = perceptual_loss(self.extractor, real, fake)
        lip = lip_loss(real, fake, self.region)
        mi = None
        mi_generated = None
        if models.estimator is not None:
            estimate = models.estimator.estimate(make_marginal_batch(fake, audio, self.rng))
            mi_generated = float(estimate)
            mi = mi_loss(estimate)
        loss_g = total_loss(gan, perc, lip, mi, self.weights)
        models.generator_optimizer.zero_grad(set_to_none=True)
        loss_g.backward()
        models.generator_optimizer.step()
        trace("generator")

        terms = ["gan", "perc", "lip"] + (["mi"] if mi is not None else [])
        self.step_index += 1
        record = {
            "kind": "step",
            "step": self.step_index,
            "epoch": epoch,
            "rate": rate,
            "loss_d": loss_d.item(),
            "gan": gan.item(),
            "perc": perc.item(),
            "lip": lip.item(),
            "mi": mi.item() if mi is not None else None,
            "total": loss_g.item(),
            "mi_estimator": estimator_objective,
            "mi_generated": mi_generated,
            "terms": terms,
            "updates": updates,
        }
        if config.trace_checksums:
            record["checksums"] = checksums
        return record

    def _epoch_index(self, step: int) -> int:
        return int(step * self.config.epochs // self.schedule_steps)

    def train(self) -> List[str]:
        """Run the remaining steps of the budget; returns the checkpoint paths written."""
        os.makedirs(self.run_dir, exist_ok=True)
        self.config.save(os.path.join(self.run_dir, CONFIG_NAME))
        try:
            if self.step_index == 0:
                self.checkpoints.append(self.save(f"{EPOCH_PREFIX}0000"))
            progressbar = Bar("Training...", bar_prefix=' [', bar_suffix='] ', empty_fill='_', fill='▓',
                              suffix='%(index)d/%(max)d', max=self.total_steps) if self.verbose else None
            while self.step_index < self.total_steps:
                previous_epoch = self._epoch_index(self.step_index)
                try:
                    record = self.train_step()
                except NumericError as err:
                    diagnostic = self.save(f"diagnostic_step_{self.step_index:06d}")
                    raise TrainingAborted(f"Training aborted at step {self.step_index}: {err}. "
                                          f"Diagnostic checkpoint in {diagnostic}") from err
                self._write_record(record)
                epoch = self._epoch_index(self.step_index)
                if epoch != previous_epoch and (epoch % self.config.checkpoint_every == 0
                                                or self.step_index == self.total_steps):
                    self.checkpoints.append(self.save(f"{EPOCH_PREFIX}{epoch:04d}"))
                if progressbar:
                    progressbar.goto(self.step_index)
            if progressbar:
                progressbar.finish()
        except OSError as err:
            raise TrainingAborted(f"Could not write to {self.run_dir}: {err}. "
                                  f"The last complete checkpoint is kept.") from err
        return self.checkpoints


def _artifacts(run_dir: str, checkpoints: List[str]) -> RunArtifacts:
    return RunArtifacts(run_dir=run_dir,
                        config_path=os.path.join(run_dir, CONFIG_NAME),
                        run_log=os.path.join(run_dir, RUN_LOG_NAME),
                        checkpoints=checkpoints)


def train(config: TrainingConfig, dataset: Optional[SequenceDataset] = None, verbose: bool = False,
          plots: bool = True) -> RunArtifacts:
    """Train, evaluate the final checkpoint on held-out identities and emit the plots."""
    # plotting pulls in matplotlib, keep it off the import path of the training loop
    from src.plots import emit_plots
    if checkpoint_names(config.output_dir):
        raise ConfigError(f"{config.output_dir} already holds a run, resume it or choose another output directory")
    trainer = Trainer(config, dataset, verbose)
    artifacts = _artifacts(trainer.run_dir, trainer.train())
    artifacts.metrics = evaluate(trainer.run_dir, trainer.dataset, verbose=verbose)
    artifacts.report = os.path.join(trainer.run_dir, REPORT_NAME)
    if plots:
        artifacts.plots = emit_plots(trainer.run_dir)
    return artifacts


def resume(run_dir: str, dataset: Optional[SequenceDataset] = None, max_steps: Optional[int] = None,
           verbose: bool = False) -> RunArtifacts:
    """Continue a run from its latest checkpoint, optionally with a larger step budget."""
    config = load_run_config(run_dir)
    config = replace(config, output_dir=run_dir, max_steps=max_steps or config.max_steps)
    trainer = Trainer(config, dataset, verbose)
    trainer.restore()
    artifacts = _artifacts(run_dir, trainer.train())
    artifacts.metrics = evaluate(run_dir, trainer.dataset, verbose=verbose)
    artifacts.report = os.path.join(run_dir, REPORT_NAME)
    return artifacts


def evaluate(run_dir: str, dataset: Union[SequenceDataset, str, None] = None, checkpoint: Optional[str] = None,
             verbose: bool = False, write: bool = True) -> MetricReport:
    """
    Roll out the generator without masks on every held-out identity and score it
    against the rendered ground truth.
    """
    config = load_run_config(run_dir)
    if dataset is None or isinstance(dataset, str):
        dataset = load_dataset(dataset or config.dataset)
    spec = model_spec_for(config, dataset)
    region = mouth_region(spec.image_size)
    checkpoint = checkpoint or latest_checkpoint(run_dir)
    groups = load_checkpoint(os.path.join(run_dir, CHECKPOINT_DIR, checkpoint)).groups
    torch.manual_seed(config.seed)
    models = TrainingModels(config, spec, region)
    models.restore(groups, with_optimizers=False)
    models.generator.eval()
    _, held_out = dataset.split(config.holdout)
    data = SequenceTensors(held_out)
    report = MetricReport()
    real_all, generated_all = [], []
    mi_real, mi_generated = [], []
    # fixed marginal pairing so repeated evaluations agree
    pairing = torch.Generator().manual_seed(config.seed)
    progressbar = Bar("Evaluating...", bar_prefix=' [', bar_suffix='] ', empty_fill='_', fill='▓',
                      suffix='%(index)d/%(max)d', max=len(held_out)) if verbose else None
    with torch.no_grad():
        for index, record in enumerate(held_out):
            generated = generate_sequence(models.generator, data.identity_faces[index:index + 1],
                                          data.audio[index:index + 1])[0]
            generated_hwc = generated.permute(0, 2, 3, 1).numpy()
            metrics = evaluate_frames(record.scene.frames, generated_hwc, record.scene.landmarks, region,
                                      sequence=index)
            report.sequences.append(metrics)
            real_all.append(record.scene.frames)
            generated_all.append(generated_hwc)
            if models.estimator is not None:
                real_pairs = make_marginal_batch(data.frames[index], data.audio[index], pairing)
                generated_pairs = make_marginal_batch(generated, data.audio[index], pairing)
                mi_real.append(float(models.estimator.estimate_real(real_pairs)))
                mi_generated.append(float(models.estimator.estimate(generated_pairs)))
            if progressbar:
                progressbar.goto(index + 1)
    if progressbar:
        progressbar.finish()
    projection = pca_project_2d(np.concatenate(real_all), np.concatenate(generated_all))
    report.pca_centroid_distance = projection.centroid_distance
    if mi_real:
        report.mi_real = float(np.mean(mi_real))
        report.mi_generated = float(np.mean(mi_generated))
    if write:
        with open(os.path.join(run_dir, REPORT_NAME), "w", encoding="utf-8") as f:
            f.write("\n".join([f"checkpoint={checkpoint}"] + report.to_lines()) + "\n")
        write_tensors(os.path.join(run_dir, PROJECTION_NAME), [
            ("real", projection.real),
            ("generated", projection.generated),
            ("explained_variance", projection.explained_variance),
        ])
        with open(os.path.join(run_dir, RUN_LOG_NAME), "a", encoding="utf-8") as f:
            for metrics in report.sequences:
                f.write(json.dumps(dict(kind="eval", checkpoint=checkpoint, **metrics.to_record()),
                                   allow_nan=False) + "\n")
    logger.info(f"{checkpoint}: PSNR {report.psnr_db:.2f} dB, SSIM {report.ssim:.4f}, LMD {report.lmd_px:.3f} px")
    return report
