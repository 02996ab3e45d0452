"""Similarity-score conditioned iterative residual latent denoiser.

Each step refines the latent with a predicted residual and re-estimates the
similarity score (SS), the cosine similarity between the transmitted latent and
the current estimate::

    z_next = z + residual(z, s)
    s_next = similarity(s, z, z_next)

At inference the loop stops at ``T_max`` steps or as soon as the predicted SS
drops; the step that caused the drop is discarded.
"""
import json
import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .channel import snr_db_to_linear
from .errors import ConfigError, ShapeError

SS_CONDITIONING = ("broadcast-concat", "scale-shift")
SS_EPS = 1e-4


@dataclass
class DenoiserConfig:
    t_max: int = 3
    unet_depth: int = 1
    base_channels: int = 32
    ss_conditioning: str = "broadcast-concat"
    similarity_hidden: int = 32

    def __post_init__(self):
        if self.t_max < 1:
            raise ConfigError("t_max must be >= 1")
        if self.unet_depth < 0:
            raise ConfigError("unet_depth must be >= 0")
        if self.ss_conditioning not in SS_CONDITIONING:
            raise ConfigError(f"ss_conditioning must be one of {SS_CONDITIONING}")


def init_ss(eta):
    """Initial similarity score from the linear channel SNR:
    ``1 / sqrt(1 + 1/eta)``."""
    if isinstance(eta, torch.Tensor):
        if bool((eta <= 0).any()):
            raise ConfigError("eta must be positive")
        return torch.rsqrt(1.0 + 1.0 / eta)
    eta = float(eta)
    if not eta > 0:
        raise ConfigError(f"eta must be positive, got {eta}")
    return 1.0 / math.sqrt(1.0 + 1.0 / eta)


def cosine_similarity(a, b):
    """Per-transmission cosine similarity. 1-D inputs give a 0-d tensor,
    batched inputs ``(B, ...)`` give shape ``(B,)``."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    single = a.dim() == 1
    a2 = a.reshape(1, -1) if single else a.reshape(a.shape[0], -1)
    b2 = b.reshape(1, -1) if single else b.reshape(b.shape[0], -1)
    na = torch.linalg.vector_norm(a2, dim=1)
    nb = torch.linalg.vector_norm(b2, dim=1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise ShapeError("cosine similarity undefined for zero-norm input")
    cos = (a2 * b2).sum(dim=1) / (na * nb)
    return cos[0] if single else cos


def _groups(ch):
    for g in (8, 4, 2):
        if ch % g == 0:
            return g
    return 1


class CGR(nn.Sequential):
    """Conv 3x3 + GroupNorm + ReLU."""

    def __init__(self, c_in, c_out):
        super().__init__(nn.Conv2d(c_in, c_out, 3, padding=1), nn.GroupNorm(_groups(c_out), c_out), nn.ReLU())


class _UpLevel(nn.Module):
    def __init__(self, c_deep, c_skip, conditioning):
        super().__init__()
        self.conditioning = conditioning
        self.up = nn.ConvTranspose2d(c_deep, c_skip, 2, stride=2)
        extra = 1 if conditioning == "broadcast-concat" else 0
        self.fuse = nn.Sequential(CGR(2 * c_skip + extra, c_skip), CGR(c_skip, c_skip))
        if conditioning == "scale-shift":
            self.film = nn.Linear(1, 2 * c_skip)

    def forward(self, x, skip, s):
        x = self.up(x)
        if self.conditioning == "broadcast-concat":
            s_map = s.view(-1, 1, 1, 1).expand(-1, 1, *skip.shape[2:])
            return self.fuse(torch.cat([x, skip, s_map], dim=1))
        gamma, beta = self.film(s.view(-1, 1)).chunk(2, dim=1)
        x = self.fuse(torch.cat([x, skip], dim=1))
        return x * (1 + gamma[..., None, None]) + beta[..., None, None]


class ResidualPredictor(nn.Module):
    """U-Net of CGR blocks predicting the residual latent. The SS enters at
    every upsampling level (and at the bottleneck when ``depth == 0``)."""

    def __init__(self, latent_channels, cfg):
        super().__init__()
        self.depth = cfg.unet_depth
        self.conditioning = cfg.ss_conditioning
        base = cfg.base_channels
        extra = 1 if (self.depth == 0 and self.conditioning == "broadcast-concat") else 0
        self.inc = nn.Sequential(CGR(latent_channels + extra, base), CGR(base, base))
        self.downs = nn.ModuleList()
        self.ups = nn.ModuleList()
        ch = base
        for _ in range(self.depth):
            self.downs.append(nn.Sequential(nn.MaxPool2d(2), CGR(ch, 2 * ch), CGR(2 * ch, 2 * ch)))
            self.ups.insert(0, _UpLevel(2 * ch, ch, self.conditioning))
            ch *= 2
        if self.depth == 0 and self.conditioning == "scale-shift":
            self.film = nn.Linear(1, 2 * base)
        self.out = nn.Conv2d(base, latent_channels, 3, padding=1)
        # start as the identity map
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, z, s):
        h, w = z.shape[-2:]
        f = 2 ** self.depth
        if h % f or w % f:
            raise ShapeError(f"latent {h}x{w} not divisible by 2**unet_depth={f}")
        s = s.reshape(-1).to(z.dtype)
        if self.depth == 0 and self.conditioning == "broadcast-concat":
            z_in = torch.cat([z, s.view(-1, 1, 1, 1).expand(-1, 1, h, w)], dim=1)
        else:
            z_in = z
        x = self.inc(z_in)
        skips = []
        for down in self.downs:
            skips.append(x)
            x = down(x)
        for up in self.ups:
            x = up(x, skips.pop(), s)
        if self.depth == 0 and self.conditioning == "scale-shift":
            gamma, beta = self.film(s.view(-1, 1)).chunk(2, dim=1)
            x = x * (1 + gamma[..., None, None]) + beta[..., None, None]
        return self.out(x)


class SimilarityPredictor(nn.Module):
    """Maps ``(s_t, z_t, z_{t+1})`` to the next SS with 1x1 convolutions and
    global average pooling. The pooled features shift ``logit(s_t)``, so the
    output stays in (0, 1)."""

    def __init__(self, latent_channels, hidden=32):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(3 * latent_channels + 1, hidden, 1),
            nn.ReLU(),
            nn.Conv2d(hidden, hidden, 1),
            nn.ReLU(),
        )
        self.head = nn.Conv2d(hidden, 1, 1)

    def forward(self, s, z, z_next):
        if z.shape != z_next.shape:
            raise ShapeError(f"shape mismatch {tuple(z.shape)} vs {tuple(z_next.shape)}")
        s = s.reshape(-1).to(z.dtype)
        s_map = s.view(-1, 1, 1, 1).expand(-1, 1, *z.shape[2:])
        feats = self.body(torch.cat([z, z_next, z_next - z, s_map], dim=1))
        delta = self.head(feats.mean(dim=(2, 3), keepdim=True)).reshape(-1)
        logit = torch.logit(s.clamp(SS_EPS, 1 - SS_EPS))
        return torch.sigmoid(logit + delta)


class LatentDenoiser(nn.Module):
    def __init__(self, latent_channels, cfg=None):
        super().__init__()
        self.cfg = cfg or DenoiserConfig()
        self.latent_channels = latent_channels
        self.residual = ResidualPredictor(latent_channels, self.cfg)
        self.similarity = SimilarityPredictor(latent_channels, self.cfg.similarity_hidden)

    def step(self, z, s):
        return denoise_step(z, s, self.residual, self.similarity)


def predict_residual(z, s, residual):
    return residual(z, s)


def predict_similarity(s, z, z_next, similarity):
    return similarity(s, z, z_next)


def denoise_step(z, s, residual, similarity):
    z_next = z + residual(z, s)
    s_next = similarity(s, z, z_next)
    return z_next, s_next


@dataclass
class DenoiseTrace:
    ss_sequence: list
    steps_executed: int = 0
    steps_kept: int = 0
    stop_reason: str = "t_max_reached"
    latents: list | None = None

    def kept_sequence(self):
        return self.ss_sequence[: self.steps_kept + 1]

    def to_record(self, transmission_id=None, snr_db=None):
        rec = {"ss_sequence": [float(s) for s in self.ss_sequence], "steps_executed": self.steps_executed,
               "steps_kept": self.steps_kept, "stop_reason": self.stop_reason}
        return {"transmission_id": transmission_id, "snr_db": snr_db, **rec}


def write_traces(path, traces, snr_db=None, ids=None):
    """Append traces as JSON lines."""
    with open(path, "a") as fh:
        for i, tr in enumerate(traces):
            tid = ids[i] if ids is not None else i
            fh.write(json.dumps(tr.to_record(tid, snr_db)) + "\n")


S1_POLICIES = ("eq1", "zero", "half", "one", "uniform")


def initial_ss(snr_db, batch, policy="eq1", rng=None, dtype=torch.float32):
    """Per-sample initial SS for the ablation policies."""
    if policy == "eq1":
        snr = torch.as_tensor(snr_db, dtype=torch.float64).expand(batch)
        return init_ss(snr_db_to_linear(snr)).to(dtype)
    if policy in ("zero", "half", "one"):
        value = {"zero": 0.0, "half": 0.5, "one": 1.0}[policy]
        return torch.full((batch,), value, dtype=dtype)
    if policy == "uniform":
        if rng is None:
            raise ConfigError("uniform SS initialization needs an rng")
        return torch.rand(batch, generator=rng, dtype=torch.float64).to(dtype)
    raise ConfigError(f"unknown SS initialization policy {policy!r}; expected one of {S1_POLICIES}")


@torch.no_grad()
def denoise_adaptive(z1, snr_db, denoiser, t_max=None, steps=None, s1=None, keep_latents=False):
    """Iteratively denoise a batch of received latents.

    With ``steps=None`` the adaptive rule applies per sample: a step is kept
    while its predicted SS is no lower than the previous one; the first step
    that lowers it is discarded and the loop ends for that sample. Passing
    ``steps=k`` runs exactly ``k`` steps with no stop rule.

    Returns ``(y_hat, traces)`` with one :class:`DenoiseTrace` per sample.
    """
    t_max = denoiser.cfg.t_max if t_max is None else t_max
    adaptive = steps is None
    n_steps = t_max if adaptive else steps
    b = z1.shape[0]
    s = initial_ss(snr_db, b, dtype=z1.dtype) if s1 is None else torch.as_tensor(s1, dtype=z1.dtype).expand(b).clone()
    z = z1.clone()
    traces = [DenoiseTrace(ss_sequence=[float(v)]) for v in s]
    if keep_latents:
        for i, tr in enumerate(traces):
            tr.latents = [z1[i].clone()]
    active = torch.arange(b)
    for _ in range(n_steps):
        if active.numel() == 0:
            break
        z_next, s_next = denoiser.step(z[active], s[active])
        keep = s_next >= s[active] if adaptive else torch.ones_like(s_next, dtype=torch.bool)
        keep_list = keep.tolist()
        for j, (i, sv) in enumerate(zip(active.tolist(), s_next.tolist())):
            tr = traces[i]
            tr.ss_sequence.append(sv)
            tr.steps_executed += 1
            if keep_list[j]:
                tr.steps_kept += 1
            else:
                tr.stop_reason = "ss_decreased"
            if keep_latents:
                tr.latents.append(z_next[j].clone())
        kept_idx = active[keep]
        z[kept_idx] = z_next[keep]
        s[kept_idx] = s_next[keep]
        active = kept_idx
    return z, traces
