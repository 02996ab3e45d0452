"""Three-phase training.

1. Encoder and decoder end to end through the channel at a fixed SNR.
2. Encoder frozen; residual and similarity predictors trained on unrolled
   denoising at SNRs drawn per batch from a discrete set.
3. Encoder and denoiser frozen; decoder finetuned on adaptively denoised
   latents.
"""
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass

import torch

from .channel import make_rng, snr_db_to_linear
from .denoiser import denoise_adaptive, init_ss
from .errors import ConfigError, FrozenParameterError, TrainingDiverged
from .losses import loss_end_to_end, loss_residual_predictor, loss_similarity_predictor
from .pipeline import collection_hashes, freeze, unfreeze

logger = logging.getLogger(__name__)

PHASE1_SNR = 13.0
TRAIN_SNR_SET = [0.0, 2.0, 4.0, 6.0, 8.0, 10.0]


@dataclass
class TrainConfig:
    phase: int = 1
    alpha: float = 1.0
    learning_rate: float = 1e-4
    poly_power: float = 0.9
    iterations: int = 1000
    batch_size: int = 16
    snr_schedule: float | list = PHASE1_SNR
    seed: int = 0
    log_every: int = 1
    # "leading": supervise z_2..z_{T_max}; "all": also the last unrolled output
    supervised_steps: str = "leading"

    def __post_init__(self):
        if self.phase not in (1, 2, 3):
            raise ConfigError(f"phase must be 1, 2 or 3, got {self.phase}")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if self.iterations <= 0 or self.batch_size <= 0:
            raise ConfigError("iterations and batch_size must be positive")
        if self.supervised_steps not in ("leading", "all"):
            raise ConfigError(f"unknown supervised_steps {self.supervised_steps!r}")
        if isinstance(self.snr_schedule, (list, tuple)):
            if len(self.snr_schedule) == 0:
                raise ConfigError("snr_schedule set is empty")
            self.snr_schedule = [float(s) for s in self.snr_schedule]
        elif self.snr_schedule is None:
            raise ConfigError(f"phase {self.phase} needs an snr_schedule")
        else:
            self.snr_schedule = float(self.snr_schedule)


def sample_snr(schedule, rng, size=None):
    """A fixed SNR, or uniform draws from a discrete set of SNRs (dB)."""
    if isinstance(schedule, (int, float)):
        return float(schedule) if size is None else torch.full((size,), float(schedule), dtype=torch.float64)
    values = torch.as_tensor(list(schedule), dtype=torch.float64)
    if values.numel() == 0:
        raise ConfigError("cannot sample from an empty SNR set")
    idx = torch.randint(values.numel(), (1 if size is None else size,), generator=rng)
    return float(values[idx[0]]) if size is None else values[idx]


def poly_lr(base_lr, iteration, total, power=0.9):
    return base_lr * (1.0 - iteration / total) ** power


def batches(images, batch_size, rng):
    """Endless shuffled minibatches; each epoch is a fresh permutation."""
    n = images.shape[0]
    while True:
        perm = torch.randperm(n, generator=rng)
        for i in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield images[perm[i : i + batch_size]]


def _dump_state(system, iteration, phase, dump_dir):
    dump_dir = dump_dir or tempfile.mkdtemp(prefix="semcom-diverged-")
    os.makedirs(dump_dir, exist_ok=True)
    path = os.path.join(dump_dir, f"diverged_phase{phase}_iter{iteration}.pt")
    torch.save({"iteration": iteration, "phase": phase, "state_dict": system.state_dict()}, path)
    return path


def _loop(system, images, cfg, params, step_fn, log_path=None, dump_dir=None):
    data_rng = make_rng(cfg.seed)
    snr_rng = make_rng(cfg.seed + 1)
    ch_rng = make_rng(cfg.seed + 2)
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda i: (1.0 - min(i, cfg.iterations) / cfg.iterations) ** cfg.poly_power
    )
    stream = batches(images, cfg.batch_size, data_rng)
    history = []
    report = max(1, cfg.iterations // 10)
    fh = open(log_path, "a") if log_path else None
    try:
        for it in range(cfg.iterations):
            x = next(stream)
            snr = sample_snr(cfg.snr_schedule, snr_rng)
            lr = opt.param_groups[0]["lr"]
            loss, terms = step_fn(x, snr, ch_rng)
            if not math.isfinite(loss.item()):
                path = _dump_state(system, it, cfg.phase, dump_dir)
                raise TrainingDiverged(f"phase {cfg.phase} loss became non-finite at iteration {it}", path)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            rec = {"iteration": it, "phase": cfg.phase, "lr": lr, "snr_db": snr, "loss": loss.item(), **terms}
            if (it + 1) % report == 0:
                logger.info("phase %d  iter %d/%d  loss %.5f", cfg.phase, it + 1, cfg.iterations, rec["loss"])
            if it % cfg.log_every == 0 or it == cfg.iterations - 1:
                history.append(rec)
                if fh:
                    fh.write(json.dumps(rec) + "\n")
    finally:
        if fh:
            fh.close()
    return history


def _check_frozen(before, after, names):
    changed = [n for n in names if before.get(n) != after.get(n)]
    if changed:
        raise FrozenParameterError(f"frozen parameter collections changed: {changed}")


def train_phase1(system, images, cfg, log_path=None, dump_dir=None):
    """Encoder and decoder end to end through the channel."""
    system.train()
    unfreeze(system.encoder)
    unfreeze(system.decoder)
    params = list(system.encoder.parameters()) + list(system.decoder.parameters())

    def step(x, snr, rng):
        _, z1 = system.transmit(x, snr, rng)
        x_hat = system.decode(z1)
        loss = loss_end_to_end(x, x_hat)
        return loss, {"e2e_mse": loss.item()}

    hist = _loop(system, images, cfg, params, step, log_path, dump_dir)
    system.eval()
    return hist


def supervised_count(t_max, mode="leading"):
    """How many unrolled outputs enter the losses. ``"leading"`` keeps
    z_2..z_{T_max}; with T_max = 1 that range is empty, so the single
    output is used."""
    if mode == "all":
        return t_max
    return max(1, t_max - 1)


def unrolled_denoise(denoiser, y_tx, z1, snr_db, t_max=None, supervised=None):
    """Training-time unroll of all ``t_max`` steps.

    Gradients of the residual loss flow through the whole chain; the
    similarity predictor sees detached inputs and its output is detached
    before conditioning the next residual step. Only the first
    ``supervised`` outputs contribute to the similarity loss.
    Returns ``(z_list, s_loss, s_preds)``.
    """
    t_max = t_max or denoiser.cfg.t_max
    supervised = supervised or t_max
    b = z1.shape[0]
    s = init_ss(snr_db_to_linear(torch.full((b,), float(snr_db), dtype=torch.float64))).to(z1.dtype)
    z = z1
    z_list, s_terms, s_preds = [], [], []
    for _ in range(t_max):
        z_next = z + denoiser.residual(z, s)
        s_next = denoiser.similarity(s, z.detach(), z_next.detach())
        if len(s_terms) < supervised:
            s_terms.append(loss_similarity_predictor(s_next, y_tx, z_next.detach()))
        s_preds.append(s_next.detach())
        z_list.append(z_next)
        z, s = z_next, s_next.detach()
    return z_list, torch.stack(s_terms).mean(), s_preds


def train_phase2(system, images, cfg, log_path=None, dump_dir=None):
    """Train the denoiser with the codec frozen."""
    if system.denoiser is None:
        raise ConfigError("phase 2 needs a denoiser attached to the system")
    freeze(system.encoder)
    freeze(system.decoder)
    unfreeze(system.denoiser)
    before = collection_hashes(system)
    system.denoiser.train()
    den = system.denoiser

    def step(x, snr, rng):
        with torch.no_grad():
            y_tx, z1 = system.transmit(x, snr, rng)
        n_sup = supervised_count(den.cfg.t_max, cfg.supervised_steps)
        z_list, s_loss, _ = unrolled_denoise(den, y_tx, z1, snr, supervised=n_sup)
        r_loss = loss_residual_predictor(y_tx, z_list[:n_sup], cfg.alpha)
        with torch.no_grad():
            mse_in = float(((z1 - y_tx) ** 2).mean())
            mse_out = float(((z_list[-1] - y_tx) ** 2).mean())
        return r_loss + s_loss, {"residual_loss": r_loss.item(), "similarity_loss": s_loss.item(),
                                 "latent_mse_in": mse_in, "latent_mse_out": mse_out}

    hist = _loop(system, images, cfg, list(den.parameters()), step, log_path, dump_dir)
    den.eval()
    _check_frozen(before, collection_hashes(system), ["encoder", "decoder"])
    return hist


def train_phase3(system, images, cfg, use_denoiser=True, log_path=None, dump_dir=None):
    """Finetune only the decoder on (adaptively denoised) received latents.

    ``use_denoiser=False`` finetunes on raw noisy latents instead, which gives
    a bandwidth- and budget-matched no-denoiser baseline.
    """
    freeze(system.encoder)
    if system.denoiser is not None:
        freeze(system.denoiser)
    unfreeze(system.decoder)
    if use_denoiser and system.denoiser is None:
        raise ConfigError("phase 3 with use_denoiser=True needs a trained denoiser")
    before = collection_hashes(system)
    system.decoder.train()

    def step(x, snr, rng):
        with torch.no_grad():
            _, z1 = system.transmit(x, snr, rng)
            y_hat = denoise_adaptive(z1, snr, system.denoiser)[0] if use_denoiser else z1
        x_hat = system.decode(y_hat)
        loss = loss_end_to_end(x, x_hat)
        return loss, {"e2e_mse": loss.item()}

    hist = _loop(system, images, cfg, list(system.decoder.parameters()), step, log_path, dump_dir)
    system.eval()
    frozen = ["encoder"] + (["residual", "similarity"] if system.denoiser is not None else [])
    _check_frozen(before, collection_hashes(system), frozen)
    return hist


__all__ = [
    "PHASE1_SNR",
    "TRAIN_SNR_SET",
    "TrainConfig",
    "batches",
    "poly_lr",
    "sample_snr",
    "supervised_count",
    "train_phase1",
    "train_phase2",
    "train_phase3",
    "unrolled_denoise",
]
