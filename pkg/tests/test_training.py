import json
import os

import pytest
import torch
import torch.nn as nn

import semcom.training as training
from semcom.channel import make_rng
from semcom.checkpoint import read_checkpoint
from semcom.codec import CodecConfig
from semcom.config import ExperimentConfig
from semcom.data import ImageDataset
from semcom.denoiser import DenoiserConfig, LatentDenoiser, init_ss
from semcom.errors import ConfigError, FrozenParameterError, TrainingDiverged
from semcom.losses import loss_end_to_end, loss_latent_mse, loss_residual_predictor, loss_similarity_predictor, loss_ss
from semcom.pipeline import SemComSystem, collection_hashes
from semcom.runner import run_phase
from semcom.training import (
    TRAIN_SNR_SET,
    TrainConfig,
    poly_lr,
    sample_snr,
    supervised_count,
    train_phase1,
    train_phase2,
    train_phase3,
    unrolled_denoise,
)

from .gradcheck import central_difference, relative_error


def tiny_codec():
    return CodecConfig(stages=1, blocks_per_stage=[1, 1], embed_dims=[2, 2], head_filters=2, target_rho=None)


def tiny_denoiser(t_max=3):
    return DenoiserConfig(t_max=t_max, unet_depth=1, base_channels=2, similarity_hidden=4)


def smooth_images(n, size=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    coarse = torch.rand(n, 3, 2, 2, generator=g)
    return nn.functional.interpolate(coarse, size=(size, size), mode="bilinear", align_corners=False)


def tiny_system(with_denoiser=True, seed=0):
    torch.manual_seed(seed)
    return SemComSystem(tiny_codec(), tiny_denoiser() if with_denoiser else None, image_size=(8, 8))


def cfg(phase, iterations=4, **kw):
    snr = 13.0 if phase == 1 else list(TRAIN_SNR_SET)
    return TrainConfig(phase=phase, learning_rate=1e-2, iterations=iterations, batch_size=4, snr_schedule=snr, **kw)


# ---------------------------------------------------------------- schedules


def test_sample_snr_fixed():
    rng = make_rng(0)
    assert all(sample_snr(13.0, rng) == 13.0 for _ in range(10))


def test_sample_snr_uniform_over_set():
    draws = sample_snr(TRAIN_SNR_SET, make_rng(0), size=1_000_000)
    for v in TRAIN_SNR_SET:
        freq = float((draws == v).double().mean())
        assert abs(freq - 1 / 6) <= 0.01 / 6
    assert set(draws.unique().tolist()) == set(TRAIN_SNR_SET)


def test_sample_snr_reproducible_and_errors():
    a = [sample_snr(TRAIN_SNR_SET, make_rng(5)) for _ in range(3)]
    b = [sample_snr(TRAIN_SNR_SET, make_rng(5)) for _ in range(3)]
    assert a == b
    with pytest.raises(ConfigError):
        sample_snr([], make_rng(0))
    with pytest.raises(ConfigError):
        TrainConfig(phase=2, snr_schedule=[])


def test_poly_lr_values():
    assert poly_lr(1e-4, 0, 100) == pytest.approx(1e-4)
    assert poly_lr(1e-4, 50, 100) == pytest.approx(1e-4 * 0.5 ** 0.9)
    assert poly_lr(1e-4, 100, 100) == 0.0


@pytest.mark.parametrize("kw", [dict(phase=4), dict(alpha=-1.0), dict(iterations=0), dict(batch_size=0),
                                dict(supervised_steps="last")])
def test_train_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_supervised_count():
    assert supervised_count(3, "leading") == 2
    assert supervised_count(3, "all") == 3
    assert supervised_count(1, "leading") == 1


def test_training_follows_poly_schedule():
    system = tiny_system(with_denoiser=False)
    hist = train_phase1(system, smooth_images(16), cfg(1, iterations=6))
    for rec in hist:
        assert rec["lr"] == pytest.approx(poly_lr(1e-2, rec["iteration"], 6))
        assert rec["snr_db"] == 13.0


# ---------------------------------------------------------------- phases


def test_phase1_loss_decreases():
    system = tiny_system(with_denoiser=False)
    images = smooth_images(50)
    hist = train_phase1(system, images, cfg(1, iterations=500))
    losses = [r["loss"] for r in hist]
    assert sum(losses[-50:]) / 50 < sum(losses[:50]) / 50


def test_phase2_freezes_codec_and_updates_denoiser(tmp_path):
    system = tiny_system()
    images = smooth_images(16)
    before = collection_hashes(system)
    log = tmp_path / "p2.jsonl"
    hist = train_phase2(system, images, cfg(2), log_path=str(log))
    after = collection_hashes(system)
    assert before["encoder"] == after["encoder"] and before["decoder"] == after["decoder"]
    assert before["residual"] != after["residual"] and before["similarity"] != after["similarity"]
    assert all(r["snr_db"] in TRAIN_SNR_SET for r in hist)
    records = [json.loads(line) for line in log.read_text().splitlines()]
    assert len(records) == 4
    assert {"iteration", "phase", "lr", "snr_db", "loss", "residual_loss", "similarity_loss"} <= set(records[0])


def test_phase3_freezes_encoder_and_denoiser():
    system = tiny_system()
    images = smooth_images(16)
    train_phase2(system, images, cfg(2))
    before = collection_hashes(system)
    train_phase3(system, images, cfg(3))
    after = collection_hashes(system)
    for name in ("encoder", "residual", "similarity"):
        assert before[name] == after[name]
    assert before["decoder"] != after["decoder"]


def test_frozen_update_is_detected():
    system = tiny_system()

    def tamper(module, inputs, output):
        with torch.no_grad():
            next(system.encoder.parameters()).add_(1e-3)

    system.denoiser.residual.register_forward_hook(tamper)
    with pytest.raises(FrozenParameterError):
        train_phase2(system, smooth_images(8), cfg(2, iterations=2))


def test_divergence_dumps_state(tmp_path, monkeypatch):
    calls = {"n": 0}

    def exploding(x, x_hat):
        calls["n"] += 1
        loss = loss_end_to_end(x, x_hat)
        return loss * float("nan") if calls["n"] == 3 else loss

    monkeypatch.setattr(training, "loss_end_to_end", exploding)
    system = tiny_system(with_denoiser=False)
    with pytest.raises(TrainingDiverged) as info:
        train_phase1(system, smooth_images(8), cfg(1, iterations=5), dump_dir=str(tmp_path))
    dump = torch.load(info.value.dump_path, weights_only=False)
    assert dump["iteration"] == 2 and dump["phase"] == 1
    assert os.path.dirname(info.value.dump_path) == str(tmp_path)


def test_phase_checkpoints_through_runner(tmp_path):
    exp = ExperimentConfig(codec=tiny_codec(), denoiser=tiny_denoiser())
    exp.data.crop_size = 8
    for n in (1, 2, 3):
        exp.phase(n).iterations = 3
        exp.phase(n).batch_size = 4
    data = ImageDataset(train=smooth_images(12), val=smooth_images(4, seed=1))
    _, p1 = run_phase(exp, 1, data, str(tmp_path))
    payload = read_checkpoint(p1)
    assert payload["phase"] == 1
    assert payload["params"]["residual"] is None and payload["params"]["similarity"] is None
    _, p2 = run_phase(exp, 2, data, str(tmp_path))
    _, p3 = run_phase(exp, 3, data, str(tmp_path))
    h1, h2, h3 = (read_checkpoint(p)["hashes"] for p in (p1, p2, p3))
    assert h1["encoder"] == h2["encoder"] == h3["encoder"]
    assert h2["residual"] == h3["residual"] and h2["decoder"] != h3["decoder"]
    assert (tmp_path / "resolved_config.yaml").exists()
    assert (tmp_path / "phase2_log.jsonl").exists()


def test_training_is_deterministic():
    logs = []
    for _ in range(2):
        system = tiny_system()
        images = smooth_images(16)
        h1 = train_phase1(system, images, cfg(1))
        h2 = train_phase2(system, images, cfg(2))
        logs.append([r["loss"] for r in h1 + h2])
    assert logs[0] == logs[1]


# ---------------------------------------------------------------- gradient oracles


def _grad_setup(seed=0):
    torch.manual_seed(seed)
    den = LatentDenoiser(2, tiny_denoiser()).double()
    nn.init.normal_(den.residual.out.weight, std=0.3)
    nn.init.normal_(den.residual.out.bias, std=0.1)
    g = torch.Generator().manual_seed(seed)
    y = torch.randn(3, 2, 4, 4, dtype=torch.float64, generator=g)
    z1 = y + 0.7 * torch.randn(y.shape, dtype=torch.float64, generator=g)
    return den, y, z1


def _probe_indices(p):
    flat = [tuple(int(v) for v in torch.unravel_index(torch.tensor(i), p.shape)) for i in range(p.numel())]
    return flat[:: max(1, len(flat) // 3)][:3]


RESIDUAL_LOSSES = {
    "latent_mse": lambda y, zs: loss_residual_predictor(y, zs, alpha=0.0),
    "ss": lambda y, zs: torch.stack([loss_ss(y, z) for z in zs]).mean(),
    "combined": lambda y, zs: loss_residual_predictor(y, zs, alpha=1.0),
}


@pytest.mark.parametrize("name", sorted(RESIDUAL_LOSSES))
def test_residual_loss_gradient_matches_finite_differences(name):
    den, y, z1 = _grad_setup()
    assert sum(p.numel() for p in den.residual.parameters()) <= 1000
    loss_fn = RESIDUAL_LOSSES[name]
    n_sup = supervised_count(den.cfg.t_max)
    z_list, _, s_preds = unrolled_denoise(den, y, z1, 0.0, supervised=n_sup)
    s_seq = [torch.full((3,), init_ss(1.0), dtype=torch.float64)] + s_preds

    # Similarity scores enter the residual chain as constants (stop-gradient),
    # so the numeric objective replays the chain with the recorded scores.
    def objective():
        z, zs = z1, []
        for t in range(n_sup):
            z = z + den.residual(z, s_seq[t])
            zs.append(z)
        return loss_fn(y, zs)

    params = [p for n, p in den.residual.named_parameters() if n.endswith("weight") and p.dim() == 4][:2]
    analytic = torch.autograd.grad(loss_fn(y, z_list[:n_sup]), params)
    for p, g in zip(params, analytic):
        for idx in _probe_indices(p):
            fd = central_difference(objective, p.data, idx, step=1e-6)
            assert relative_error(float(g[idx]), fd) < 1e-3


def test_similarity_loss_gradient_matches_finite_differences():
    den, y, z1 = _grad_setup(1)
    assert sum(p.numel() for p in den.similarity.parameters()) <= 1000
    with torch.no_grad():
        z_list, _, s_preds = unrolled_denoise(den, y, z1, 0.0)
    zs = [z1] + z_list
    s_in = [torch.full((3,), init_ss(1.0), dtype=torch.float64)] + s_preds

    def objective():
        terms = [loss_similarity_predictor(den.similarity(s_in[t], zs[t], zs[t + 1]), y, zs[t + 1])
                 for t in range(2)]
        return torch.stack(terms).mean()

    _, s_loss, _ = unrolled_denoise(den, y, z1, 0.0, supervised=2)
    params = [p for p in den.similarity.parameters() if p.dim() == 4]
    analytic = torch.autograd.grad(s_loss, params)
    for p, g in zip(params, analytic):
        for idx in _probe_indices(p):
            fd = central_difference(objective, p.data, idx, step=1e-6)
            assert relative_error(float(g[idx]), fd) < 1e-3


def test_similarity_loss_does_not_reach_residual():
    den, y, z1 = _grad_setup()
    _, s_loss, _ = unrolled_denoise(den, y, z1, 0.0)
    grads = torch.autograd.grad(s_loss, list(den.residual.parameters()), allow_unused=True)
    assert all(g is None or float(g.abs().max()) == 0.0 for g in grads)


def test_end_to_end_loss_gradient_matches_finite_differences():
    system = tiny_system(with_denoiser=False).double()
    assert max(sum(p.numel() for p in m.parameters()) for m in (system.encoder, system.decoder)) <= 1000
    x = smooth_images(2).double()

    def objective():
        return loss_end_to_end(x, system.reconstruct(x))

    params = [p for p in system.decoder.parameters() if p.dim() == 4][:2]
    analytic = torch.autograd.grad(objective(), params)
    for p, g in zip(params, analytic):
        for idx in _probe_indices(p):
            fd = central_difference(objective, p.data, idx, step=1e-6)
            assert relative_error(float(g[idx]), fd) < 1e-3


def test_latent_mse_gradient_closed_form():
    g = torch.Generator().manual_seed(0)
    y = torch.randn(2, 6, dtype=torch.float64, generator=g)
    z = torch.randn(2, 6, dtype=torch.float64, generator=g, requires_grad=True)
    (grad,) = torch.autograd.grad(loss_latent_mse(y, z), z)
    # d/dz of mean over batch of (1/6)||y - z||^2 is (z - y) * 2 / (6 * 2)
    assert torch.allclose(grad, (z - y).detach() / 6)
