"""Complex AWGN channel with per-transmission power normalization.

Latents are real tensors. A single transmission is either a 1-D vector of
length 2n or one row of a batch shaped ``(B, ...)``; the real values are paired
in flattened order, ``sym[i] = v[2i] + 1j * v[2i + 1]``.
"""
import math
from dataclasses import dataclass

import torch

from .errors import ConfigError, ShapeError


@dataclass
class ChannelConfig:
    snr_db: float = 13.0
    signal_power: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.signal_power > 0:
            raise ConfigError(f"signal_power must be positive, got {self.signal_power}")
        if not math.isfinite(self.snr_db):
            raise ConfigError(f"snr_db must be finite, got {self.snr_db}")

    @property
    def eta(self):
        return snr_db_to_linear(self.snr_db)

    @property
    def noise_variance(self):
        return self.signal_power / self.eta


def snr_db_to_linear(snr_db):
    """Linear power ratio for an SNR given in dB. Works on floats and tensors."""
    if isinstance(snr_db, torch.Tensor):
        return torch.pow(10.0, snr_db / 10.0)
    snr_db = float(snr_db)
    if not math.isfinite(snr_db):
        raise ConfigError(f"snr_db must be finite, got {snr_db}")
    return 10.0 ** (snr_db / 10.0)


def make_rng(seed):
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def _rows(latent):
    if latent.dim() == 1:
        return latent.unsqueeze(0), True
    return latent.reshape(latent.shape[0], -1), False


def pack_complex(latent):
    """Pair consecutive reals into complex symbols: ``(.., 2n) -> (.., n)``."""
    if latent.is_complex():
        raise ShapeError("pack_complex expects a real latent")
    rows, single = _rows(latent)
    if rows.shape[1] % 2:
        raise ShapeError(f"latent length {rows.shape[1]} is odd, cannot pair into complex symbols")
    sym = torch.view_as_complex(rows.reshape(rows.shape[0], -1, 2).contiguous())
    return sym[0] if single else sym


def unpack_real(sym, spatial_shape=None):
    """Inverse of :func:`pack_complex`, optionally restoring ``spatial_shape``
    (the per-transmission shape, e.g. ``(C, h, w)``)."""
    single = sym.dim() == 1
    rows = sym.unsqueeze(0) if single else sym
    flat = torch.view_as_real(rows).reshape(rows.shape[0], -1)
    if spatial_shape is not None:
        spatial_shape = tuple(int(d) for d in spatial_shape)
        if math.prod(spatial_shape) != flat.shape[1]:
            raise ShapeError(
                f"spatial_shape {spatial_shape} holds {math.prod(spatial_shape)} values, "
                f"received {flat.shape[1]}"
            )
        flat = flat.reshape(rows.shape[0], *spatial_shape)
    return flat[0] if single else flat


def power_normalize(sym, power=1.0):
    """Scale each transmission to average symbol power ``power``:
    ``sym * sqrt(n * P) / ||sym||``."""
    single = sym.dim() == 1
    rows = sym.unsqueeze(0) if single else sym
    n = rows.shape[-1]
    norm = torch.linalg.vector_norm(rows, dim=-1, keepdim=True)
    if bool((norm == 0).any()):
        raise ShapeError("cannot power-normalize an all-zero transmission")
    out = rows * (math.sqrt(n * power) / norm)
    return out[0] if single else out


def average_power(sym):
    return (sym.abs() ** 2).mean(dim=-1)


def complex_noise(shape, noise_variance, rng, dtype=torch.float32):
    """Circular complex Gaussian samples, variance ``noise_variance / 2`` per
    real component. ``noise_variance`` may be a float or a per-row tensor."""
    real = torch.randn(*shape, 2, generator=rng, dtype=dtype)
    if isinstance(noise_variance, torch.Tensor):
        std = torch.sqrt(noise_variance.to(dtype) / 2).reshape(-1, *([1] * len(shape)))
    else:
        std = math.sqrt(noise_variance / 2)
    return torch.view_as_complex(real * std)


def awgn_transmit(sym, ch, rng):
    """Add AWGN with per-symbol variance ``P / eta`` to normalized symbols."""
    if rng is None:
        raise ConfigError("awgn_transmit needs an explicit torch.Generator")
    real_dtype = torch.float64 if sym.dtype == torch.complex128 else torch.float32
    noise = complex_noise(tuple(sym.shape), ch.noise_variance, rng, dtype=real_dtype)
    return sym + noise


def normalize_latent(y, power=1.0):
    """Real-domain view of power normalization, keeping ``y``'s shape."""
    spatial = tuple(y.shape[1:]) if y.dim() > 1 else None
    return unpack_real(power_normalize(pack_complex(y), power), spatial)


def transmit_latent(y, snr_db, rng, power=1.0):
    """Full channel pass for a batch of encoder outputs.

    Returns ``(y_tx, z1)``: the power-normalized transmitted latent (real view)
    and the received noisy latent, both shaped like ``y``.
    """
    spatial = tuple(y.shape[1:]) if y.dim() > 1 else None
    sym = power_normalize(pack_complex(y), power)
    ch = ChannelConfig(snr_db=float(snr_db), signal_power=power)
    z = awgn_transmit(sym, ch, rng)
    return unpack_real(sym, spatial), unpack_real(z, spatial)


def empirical_snr_db(clean, received):
    """``10 log10(P / sigma_hat^2)`` from paired clean/received symbols."""
    p = average_power(clean.reshape(-1))
    noise = average_power((received - clean).reshape(-1))
    return 10.0 * math.log10(float(p) / float(noise))
