"""
Training configuration, ablation toggles and their resolution from defaults,
AMIE_* environment variables, a key=value config file and command line flags.
"""
import dataclasses
import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Tuple

from dotenv import dotenv_values

from src.dynamic_attention import AttentionSchedule, ScheduleError
from src.generation_model import ModelSpec
from src.losses import LossWeights
from src.mi_estimators import Representation

logger = logging.getLogger(__name__)

ENV_PREFIX = "AMIE_"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AblationMode:
    mi_enabled: bool = True
    mi_representation: Representation = Representation.JS
    asymmetric: bool = True
    da_enabled: bool = True

    @property
    def name(self) -> str:
        for preset, mode in ABLATION_PRESETS.items():
            if mode == self:
                return preset
        return "custom"


ABLATION_PRESETS: Dict[str, AblationMode] = {
    "baseline": AblationMode(mi_enabled=False, da_enabled=False),
    "mine": AblationMode(mi_representation=Representation.DV, asymmetric=False, da_enabled=False),
    "da": AblationMode(mi_enabled=False, da_enabled=True),
    "mine+da": AblationMode(mi_representation=Representation.DV, asymmetric=False, da_enabled=True),
    "mine+js": AblationMode(mi_representation=Representation.JS, asymmetric=False, da_enabled=False),
    "mine+js+da": AblationMode(mi_representation=Representation.JS, asymmetric=False, da_enabled=True),
    "mine+asy": AblationMode(mi_representation=Representation.DV, asymmetric=True, da_enabled=False),
    "mine+asy+da": AblationMode(mi_representation=Representation.DV, asymmetric=True, da_enabled=True),
    "amie": AblationMode(mi_representation=Representation.JS, asymmetric=True, da_enabled=False),
    "amie+da": AblationMode(mi_representation=Representation.JS, asymmetric=True, da_enabled=True),
}

# rows of the ablation table, in order
TABLE_ROWS = ["baseline", "mine", "da", "mine+da", "mine+js", "mine+js+da", "mine+asy+da", "amie", "amie+da"]


def ablation_mode(name: str) -> AblationMode:
    try:
        return ABLATION_PRESETS[name.lower()]
    except KeyError:
        raise ConfigError(f"Unknown ablation mode '{name}', choose one of {', '.join(ABLATION_PRESETS)}")


@dataclass(frozen=True)
class TrainingConfig:
    seed: int = 0
    image_size: int = 64
    batch_size: int = 8
    rollout_length: int = 4
    epochs: int = 50
    max_steps: Optional[int] = None
    lr_generator: float = 2e-4
    lr_discriminator: float = 2e-4
    lr_estimator: float = 1e-4
    lambda_perc: float = 1.0
    lambda_lip: float = 10.0
    lambda_mi: float = 0.1
    extractor_seed: int = 1234
    start_rate: float = 0.8
    end_rate: float = 0.2
    decay_start: float = 0.1
    decay_end: float = 0.4
    fix_to_one: float = 0.9
    mode: str = "amie+da"
    teacher_forcing: float = 0.5
    mismatch_negatives: bool = True
    widths: Tuple[int, ...] = (16, 32, 64, 128)
    audio_dim: int = 64
    hidden: int = 128
    holdout: float = 0.2
    checkpoint_every: int = 5
    trace_checksums: bool = False
    dataset: str = "data/synthetic"
    output_dir: str = "runs/default"

    def validate(self) -> "TrainingConfig":
        for name in ("lr_generator", "lr_discriminator", "lr_estimator"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError(f"max_steps must be at least 1, got {self.max_steps}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 to form marginal pairs")
        if self.rollout_length < 1:
            raise ConfigError("rollout_length must be at least 1")
        if not 0 <= self.teacher_forcing <= 1:
            raise ConfigError(f"teacher_forcing must lie in [0, 1], got {self.teacher_forcing}")
        if not 0 < self.holdout < 1:
            raise ConfigError(f"holdout must lie in (0, 1), got {self.holdout}")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be at least 1")
        ablation_mode(self.mode)
        try:
            self.loss_weights
            self.schedule
            self.model_spec
        except ValueError as err:
            raise ConfigError(str(err))
        return self

    @property
    def ablation(self) -> AblationMode:
        return ablation_mode(self.mode)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_perc, self.lambda_lip, self.lambda_mi)

    @property
    def schedule(self) -> AttentionSchedule:
        try:
            return AttentionSchedule.for_epochs(self.epochs, self.start_rate, self.end_rate,
                                                self.decay_start, self.decay_end, self.fix_to_one)
        except ScheduleError as err:
            raise ConfigError(str(err))

    @property
    def model_spec(self) -> ModelSpec:
        return ModelSpec(image_size=self.image_size, widths=tuple(self.widths), audio_dim=self.audio_dim,
                         hidden=self.hidden)

    def to_lines(self) -> List[str]:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(map(str, value))
            elif value is None:
                value = ""
            lines.append(f"{f.name}={value}")
        return lines

    def save(self, path: str):
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(self.to_lines()) + "\n")


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"Not a boolean: {text!r}")


def _coerce(name: str, text: str):
    kinds = {f.name: f.type for f in dataclasses.fields(TrainingConfig)}
    kind = kinds[name]
    text = str(text).strip()
    try:
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            return float(text)
        if kind in (bool, "bool"):
            return _parse_bool(text)
        if kind in (Optional[int], "Optional[int]"):
            return int(text) if text else None
        if kind in (Tuple[int, ...], "Tuple[int, ...]"):
            return tuple(int(x) for x in text.split(",") if x.strip())
        return text
    except ValueError:
        raise ConfigError(f"Invalid value for {name}: {text!r}")


def config_from_mapping(values: Mapping[str, object], base: Optional[TrainingConfig] = None) -> TrainingConfig:
    """Override fields of base with string or typed values; unknown keys are an error."""
    base = base or TrainingConfig()
    known = {f.name for f in dataclasses.fields(TrainingConfig)}
    changes = {}
    for key, value in values.items():
        name = key.lower().replace("-", "_")
        if name not in known:
            raise ConfigError(f"Unknown configuration key '{key}'")
        changes[name] = _coerce(name, value) if isinstance(value, str) else value
    return dataclasses.replace(base, **changes)


def environment_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, str]:
    environ = os.environ if environ is None else environ
    known = {f.name for f in dataclasses.fields(TrainingConfig)}
    overrides = {}
    for key, value in environ.items():
        if key.startswith(ENV_PREFIX) and key[len(ENV_PREFIX):].lower() in known:
            overrides[key[len(ENV_PREFIX):].lower()] = value
    return overrides


def load_config_file(path: str) -> Dict[str, str]:
    if not os.path.isfile(path):
        raise ConfigError(f"Config file {path} does not exist")
    return {key: value for key, value in dotenv_values(path).items() if value is not None}


def resolve_config(flags: Optional[Mapping[str, object]] = None, config_file: Optional[str] = None,
                   environ: Optional[Mapping[str, str]] = None) -> TrainingConfig:
    """defaults < AMIE_* environment < config file < flags"""
    config = config_from_mapping(environment_overrides(environ))
    if config_file:
        config = config_from_mapping(load_config_file(config_file), config)
    if flags:
        config = config_from_mapping({k: v for k, v in flags.items() if v is not None}, config)
    return config.validate()
