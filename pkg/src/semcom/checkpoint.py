"""Checkpoint container.

A checkpoint is a ``torch.save`` dict holding the format version, the full
experiment config, the training-phase tag, seed lineage, parameter hashes, and
one state dict per parameter collection (encoder, decoder, residual and
similarity predictors; ``None`` where absent).
"""
import os

import torch

from .config import ExperimentConfig
from .errors import CheckpointError, MissingInputError
from .pipeline import SemComSystem, collection_hashes

FORMAT = "semcom-checkpoint"
FORMAT_VERSION = 1


def save_checkpoint(path, system, cfg, phase, seeds=None):
    den = system.denoiser
    payload = {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "phase": int(phase),
        "config": cfg.to_dict(),
        "image_size": list(system.image_size),
        "seeds": dict(seeds or {}),
        "hashes": collection_hashes(system),
        "params": {
            "encoder": system.encoder.state_dict(),
            "decoder": system.decoder.state_dict(),
            "residual": den.residual.state_dict() if den is not None else None,
            "similarity": den.similarity.state_dict() if den is not None else None,
        },
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    torch.save(payload, path)
    return path


def read_checkpoint(path):
    if not os.path.exists(path):
        raise MissingInputError(f"checkpoint {path!r} not found")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path!r}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointError(f"{path!r} is not a semcom checkpoint")
    if payload.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint version {payload.get('format_version')} is not supported (expected {FORMAT_VERSION})"
        )
    return payload


def load_checkpoint(path):
    """Rebuild ``(system, config, payload)`` from a checkpoint file."""
    payload = read_checkpoint(path)
    cfg = ExperimentConfig.from_dict(payload["config"])
    params = payload["params"]
    has_denoiser = params.get("residual") is not None
    system = SemComSystem(cfg.codec, cfg.denoiser if has_denoiser else None,
                          image_size=tuple(payload["image_size"]), power=cfg.channel.signal_power)
    try:
        system.encoder.load_state_dict(params["encoder"])
        system.decoder.load_state_dict(params["decoder"])
        if has_denoiser:
            system.denoiser.residual.load_state_dict(params["residual"])
            system.denoiser.similarity.load_state_dict(params["similarity"])
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint {path!r} does not match its config: {exc}") from exc
    system.eval()
    return system, cfg, payload
