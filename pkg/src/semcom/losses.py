"""Training objectives.

All losses treat a 1-D tensor as a single transmission and otherwise average
the per-sample value over the leading batch dimension.
"""
import torch

from .denoiser import cosine_similarity
from .errors import ShapeError


def _rows(v):
    return v.reshape(1, -1) if v.dim() == 1 else v.reshape(v.shape[0], -1)


def loss_latent_mse(y, z):
    """``(1/2n) ||y - z||^2`` averaged over the batch."""
    if y.shape != z.shape:
        raise ShapeError(f"length mismatch {tuple(y.shape)} vs {tuple(z.shape)}")
    return ((_rows(y) - _rows(z)) ** 2).mean(dim=1).mean()


def loss_ss(y, z):
    return (1.0 - cosine_similarity(y, z)).mean()


def loss_residual_predictor(y, z_list, alpha=1.0):
    """Latent MSE plus ``alpha`` times SS loss, averaged over unrolled steps."""
    if len(z_list) == 0:
        raise ValueError("z_list must hold at least one denoised latent")
    terms = [loss_latent_mse(y, z) + alpha * loss_ss(y, z) for z in z_list]
    return torch.stack(terms).mean()


def loss_similarity_predictor(s_pred, y, z):
    target = cosine_similarity(y, z)
    return ((s_pred - target) ** 2).mean()


def loss_end_to_end(x, x_hat):
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return ((x - x_hat) ** 2).mean()
