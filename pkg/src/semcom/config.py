"""Experiment configuration: nested dataclasses stored as YAML."""
import dataclasses
import os
from dataclasses import dataclass, field

import yaml

from .channel import ChannelConfig
from .codec import CodecConfig
from .denoiser import DenoiserConfig
from .errors import ConfigError
from .training import TRAIN_SNR_SET, TrainConfig

OUTPUT_ROOT_ENV = "SEMCOM_OUTPUT_ROOT"


@dataclass
class DataConfig:
    directory: str | None = None
    crop_size: int = 32
    patches_per_image: int = 60
    val_fraction: float = 0.1
    scale: float = 0.5
    seed: int = 0


@dataclass
class EvalConfig:
    snr_list: list = field(default_factory=lambda: [-3.0, 0.0, 5.0, 10.0])
    seed: int = 2024
    batch_size: int = 64
    latency_repetitions: int = 100
    latency_warmup: int = 10
    latency_images: int = 8


def _phase1():
    return TrainConfig(phase=1, learning_rate=1e-3, iterations=2000, batch_size=32, snr_schedule=13.0, seed=1)


def _phase2():
    return TrainConfig(phase=2, learning_rate=2e-3, iterations=1000, batch_size=32,
                       snr_schedule=list(TRAIN_SNR_SET), seed=2)


def _phase3():
    return TrainConfig(phase=3, learning_rate=5e-4, iterations=400, batch_size=32,
                       snr_schedule=list(TRAIN_SNR_SET), seed=3)


@dataclass
class ExperimentConfig:
    codec: CodecConfig = field(default_factory=CodecConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    phase1: TrainConfig = field(default_factory=_phase1)
    phase2: TrainConfig = field(default_factory=_phase2)
    phase3: TrainConfig = field(default_factory=_phase3)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs/default"
    seed: int = 0
    deterministic: bool = True

    def phase(self, n):
        return {1: self.phase1, 2: self.phase2, 3: self.phase3}[n]

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        return _build(cls, data or {})

    def resolved_output_dir(self):
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not os.path.isabs(self.output_dir):
            return os.path.join(root, self.output_dir)
        return self.output_dir


def _build(cls, data):
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    defaults = cls()
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            continue
        value = data[name]
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            base = dataclasses.asdict(current)
            base.update(value or {})
            value = _build(type(current), base)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path):
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path!r}: {exc}") from exc
    return ExperimentConfig.from_dict(data)


def save_config(cfg, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
    return path
