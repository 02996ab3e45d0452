"""Phase orchestration shared by the command line and the acceptance suite.

Checkpoints live in the run's output directory as ``phase{N}.pt`` (or
``phase{N}_{tag}.pt`` for tagged variants such as the SS-loss ablation arm),
next to a JSONL training log per phase and the resolved config.
"""
import dataclasses
import logging
import os

import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import save_config
from .data import ingest_dataset, write_toy_corpus
from .errors import ConfigError, MissingInputError
from .pipeline import SemComSystem
from .training import train_phase1, train_phase2, train_phase3

logger = logging.getLogger(__name__)


def checkpoint_name(phase, tag=None):
    return f"phase{phase}.pt" if not tag else f"phase{phase}_{tag}.pt"


def set_determinism(cfg):
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


def resolve_data_dir(cfg, out_dir):
    """The configured image folder, or the bundled toy corpus written under
    the output directory when none is configured."""
    if cfg.data.directory:
        return cfg.data.directory
    toy = os.path.join(out_dir, "toy_corpus")
    if not os.path.isdir(toy) or not os.listdir(toy):
        logger.info("no data directory configured; writing the toy corpus to %s", toy)
        write_toy_corpus(toy)
    return toy


def load_data(cfg, out_dir):
    d = cfg.data
    return ingest_dataset(resolve_data_dir(cfg, out_dir), crop_size=d.crop_size,
                          patches_per_image=d.patches_per_image, val_fraction=d.val_fraction,
                          seed=d.seed, scale=d.scale)


def run_phase(cfg, phase, data, out_dir, tag=None, alpha=None):
    """Train one phase and write its checkpoint, log and resolved config.

    Phase 2 starts from ``phase1.pt``; phase 3 from ``phase2[_tag].pt``.
    ``alpha`` overrides the phase-2 SS-loss weight. Returns
    ``(system, checkpoint_path)``.
    """
    if phase not in (1, 2, 3):
        raise ConfigError(f"phase must be 1, 2 or 3, got {phase}")
    os.makedirs(out_dir, exist_ok=True)
    set_determinism(cfg)
    train_cfg = cfg.phase(phase)
    if alpha is not None:
        train_cfg = dataclasses.replace(train_cfg, alpha=float(alpha))
    size = (cfg.data.crop_size, cfg.data.crop_size)
    torch.manual_seed(cfg.seed * 10 + phase)
    if phase == 1:
        system = SemComSystem(cfg.codec, None, image_size=size, power=cfg.channel.signal_power)
        cfg.codec.check_bandwidth(*size)
        lineage = {}
    else:
        prev = os.path.join(out_dir, checkpoint_name(phase - 1, tag if phase == 3 else None))
        if not os.path.exists(prev):
            raise MissingInputError(f"phase {phase} needs {prev}; train phase {phase - 1} first")
        system, _, payload = load_checkpoint(prev)
        lineage = dict(payload.get("seeds", {}))
        if phase == 2:
            system.attach_denoiser(cfg.denoiser)
    log_path = os.path.join(out_dir, checkpoint_name(phase, tag).replace(".pt", "_log.jsonl"))
    if os.path.exists(log_path):
        os.remove(log_path)
    trainer = {1: train_phase1, 2: train_phase2, 3: train_phase3}[phase]
    logger.info("phase %d: %d iterations at lr %g", phase, train_cfg.iterations, train_cfg.learning_rate)
    trainer(system, data.train, train_cfg, log_path=log_path, dump_dir=out_dir)
    lineage[f"phase{phase}"] = {"seed": train_cfg.seed, "init_seed": cfg.seed * 10 + phase,
                                "alpha": train_cfg.alpha, "tag": tag}
    ckpt = os.path.join(out_dir, checkpoint_name(phase, tag))
    save_checkpoint(ckpt, system, cfg, phase, seeds=lineage)
    save_config(cfg, os.path.join(out_dir, "resolved_config.yaml"))
    return system, ckpt


def run_all(cfg, data, out_dir):
    """Phases 1 to 3 in order; returns the three checkpoint paths."""
    return [run_phase(cfg, p, data, out_dir)[1] for p in (1, 2, 3)]


__all__ = ["checkpoint_name", "load_data", "resolve_data_dir", "run_all", "run_phase", "set_determinism"]
