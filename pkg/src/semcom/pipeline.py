import hashlib

import torch
import torch.nn as nn

from .channel import normalize_latent, transmit_latent
from .codec import CodecConfig, build_backbone, check_image, decode, encode
from .denoiser import DenoiserConfig, LatentDenoiser, denoise_adaptive


class SemComSystem(nn.Module):
    """Encoder, decoder and (optionally) the latent denoiser for one image size."""

    def __init__(self, codec_cfg=None, denoiser_cfg=None, image_size=(32, 32), power=1.0):
        super().__init__()
        self.codec_cfg = codec_cfg or CodecConfig()
        self.image_size = tuple(image_size)
        self.power = power
        self.codec_cfg.latent_shape(*self.image_size)
        self.encoder, self.decoder = build_backbone(self.codec_cfg, self.image_size)
        self.denoiser = None
        if denoiser_cfg is not None:
            self.attach_denoiser(denoiser_cfg)

    def attach_denoiser(self, denoiser_cfg=None):
        self.denoiser = LatentDenoiser(self.codec_cfg.head_filters, denoiser_cfg or DenoiserConfig())
        return self.denoiser

    @property
    def latent_shape(self):
        return self.codec_cfg.latent_shape(*self.image_size)

    def encode(self, x):
        return encode(x, self.encoder, self.codec_cfg)

    def decode(self, z):
        return decode(z, self.decoder, self.codec_cfg)

    def reconstruct(self, x):
        """Encode and decode with power normalization but no channel noise."""
        return self.decode(normalize_latent(self.encode(x), self.power))

    def transmit(self, x, snr_db, rng):
        """Encode and send through the channel: ``(y_tx, z1)``."""
        return transmit_latent(self.encode(x), snr_db, rng, self.power)

    @torch.no_grad()
    def receive(self, z1, snr_db, steps="adaptive", s1=None):
        """Denoise (unless ``steps`` is 0 or no denoiser is attached) and
        decode. Returns ``(x_hat, y_hat, traces)``."""
        if steps == 0 or self.denoiser is None:
            return self.decode(z1), z1, None
        y_hat, traces = denoise_adaptive(
            z1, snr_db, self.denoiser, steps=None if steps == "adaptive" else int(steps), s1=s1
        )
        return self.decode(y_hat), y_hat, traces


def freeze(module):
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def unfreeze(module):
    for p in module.parameters():
        p.requires_grad_(True)
    return module


def is_frozen(module):
    return all(not p.requires_grad for p in module.parameters())


def param_hash(module):
    """SHA-256 over every tensor in ``module.state_dict()`` in key order."""
    h = hashlib.sha256()
    for key, value in sorted(module.state_dict().items()):
        h.update(key.encode())
        h.update(value.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def collection_hashes(system):
    out = {"encoder": param_hash(system.encoder), "decoder": param_hash(system.decoder)}
    if system.denoiser is not None:
        out["residual"] = param_hash(system.denoiser.residual)
        out["similarity"] = param_hash(system.denoiser.similarity)
    return out


__all__ = [
    "SemComSystem",
    "check_image",
    "collection_hashes",
    "freeze",
    "is_frozen",
    "param_hash",
    "unfreeze",
]
