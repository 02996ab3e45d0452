"""Joint source-channel encoder/decoder.

Images are ``(B, 3, H, W)`` tensors in [0, 1]. The encoder has ``M + 1``
stages: a patch-embedding stage followed by ``M`` merging stages, each halving
the spatial resolution, then a 3x3 convolution head whose filter count sets the
bandwidth. The decoder mirrors it with reverse-merging (pixel-shuffle) stages
and a sigmoid output.

Two backbones share this layout: ``"conv"`` (residual conv blocks) and
``"swin"`` (windowed multi-head self-attention blocks).
"""
from dataclasses import dataclass, field
from fractions import Fraction

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NonFiniteError, ShapeError

BACKBONES = ("conv", "swin")


@dataclass
class CodecConfig:
    backbone: str = "conv"
    stages: int = 2
    blocks_per_stage: list = field(default_factory=lambda: [1, 1, 1])
    embed_dims: list = field(default_factory=lambda: [32, 64, 96])
    num_heads: list = field(default_factory=lambda: [2, 2, 4])
    window_size: int = 4
    patch_size: int = 2
    head_filters: int = 24
    target_rho: str | None = "1/16"

    def __post_init__(self):
        self.blocks_per_stage = [int(b) for b in self.blocks_per_stage]
        self.embed_dims = [int(d) for d in self.embed_dims]
        self.num_heads = [int(h) for h in self.num_heads]
        self.validate()

    def validate(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unsupported backbone_kind {self.backbone!r}; expected one of {BACKBONES}")
        if self.stages < 1:
            raise ConfigError("at least one merging stage is required (stages >= 1)")
        n_stages = self.stages + 1
        for name in ("blocks_per_stage", "embed_dims"):
            if len(getattr(self, name)) != n_stages:
                raise ConfigError(f"{name} needs {n_stages} entries for stages={self.stages}")
        if min(self.blocks_per_stage) < 1:
            raise ConfigError("every stage needs at least one block")
        if self.head_filters < 1:
            raise ConfigError("head_filters must be >= 1")
        if self.patch_size < 1 or self.window_size < 1:
            raise ConfigError("patch_size and window_size must be >= 1")
        if self.backbone == "swin":
            if len(self.num_heads) != n_stages:
                raise ConfigError(f"num_heads needs {n_stages} entries")
            for d, h in zip(self.embed_dims, self.num_heads):
                if d % h:
                    raise ConfigError(f"embed dim {d} not divisible by {h} heads")
        if self.target_rho is not None:
            Fraction(self.target_rho)

    @property
    def downsample(self):
        return self.patch_size * 2 ** self.stages

    def latent_shape(self, height, width):
        d = self.downsample
        if height % d or width % d:
            raise ShapeError(f"image {height}x{width} is not divisible by the total downsampling factor {d}")
        return (self.head_filters, height // d, width // d)

    def rho(self, height, width):
        """Channel bandwidth ratio n/k as an exact fraction."""
        c, h, w = self.latent_shape(height, width)
        if (c * h * w) % 2:
            raise ShapeError("latent length is odd; it cannot be paired into complex symbols")
        return Fraction(c * h * w // 2, height * width * 3)

    def check_bandwidth(self, height, width):
        rho = self.rho(height, width)
        if self.target_rho is not None and rho != Fraction(self.target_rho):
            raise ConfigError(
                f"configuration gives rho={rho} for {height}x{width} images, target is {self.target_rho}"
            )
        return rho

    @classmethod
    def full_scale(cls, **overrides):
        """Four-stage windowed-attention layout with [2, 2, 6, 2] blocks."""
        kw = dict(
            backbone="swin",
            stages=3,
            blocks_per_stage=[2, 2, 6, 2],
            embed_dims=[128, 192, 256, 320],
            num_heads=[4, 6, 8, 10],
            window_size=8,
            head_filters=96,
            target_rho=None,
        )
        kw.update(overrides)
        return cls(**kw)


def head_filters_for(rho, patch_size, stages):
    """Head filter count giving bandwidth ratio ``rho`` (independent of H, W)."""
    d = patch_size * 2 ** stages
    c = Fraction(rho) * 2 * 3 * d * d
    if c.denominator != 1:
        raise ConfigError(f"rho={rho} is not reachable with downsampling factor {d}")
    return int(c)


# ---------------------------------------------------------------- conv backbone


class ResBlock(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.conv1 = nn.Conv2d(dim, dim, 3, padding=1)
        self.conv2 = nn.Conv2d(dim, dim, 3, padding=1)
        self.act = nn.LeakyReLU(0.1)

    def forward(self, x):
        return x + self.conv2(self.act(self.conv1(x)))


class ConvEncoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        dims, p = cfg.embed_dims, cfg.patch_size
        self.stages = nn.ModuleList()
        for i, (dim, n_blocks) in enumerate(zip(dims, cfg.blocks_per_stage)):
            if i == 0:
                down = nn.Conv2d(3, dim, p, stride=p)
            else:
                down = nn.Conv2d(dims[i - 1], dim, 2, stride=2)
            self.stages.append(nn.Sequential(down, nn.LeakyReLU(0.1), *[ResBlock(dim) for _ in range(n_blocks)]))
        self.head = nn.Conv2d(dims[-1], cfg.head_filters, 3, padding=1)

    def forward(self, x):
        for stage in self.stages:
            x = stage(x)
        return self.head(x)


class ConvDecoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        dims, p = cfg.embed_dims, cfg.patch_size
        self.head = nn.Sequential(nn.Conv2d(cfg.head_filters, dims[-1], 3, padding=1), nn.LeakyReLU(0.1))
        self.stages = nn.ModuleList()
        for i in reversed(range(len(dims))):
            blocks = [ResBlock(dims[i]) for _ in range(cfg.blocks_per_stage[i])]
            if i == 0:
                up = [nn.Conv2d(dims[0], 3 * p * p, 3, padding=1), nn.PixelShuffle(p)]
            else:
                up = [nn.Conv2d(dims[i], dims[i - 1] * 4, 3, padding=1), nn.PixelShuffle(2), nn.LeakyReLU(0.1)]
            self.stages.append(nn.Sequential(*blocks, *up))

    def forward(self, z):
        x = self.head(z)
        for stage in self.stages:
            x = stage(x)
        return torch.sigmoid(x)


# ---------------------------------------------------------------- swin backbone


def window_partition(x, ws):
    b, h, w, c = x.shape
    x = x.view(b, h // ws, ws, w // ws, ws, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, c)


def window_reverse(windows, ws, b, h, w):
    c = windows.shape[-1]
    x = windows.view(b, h // ws, w // ws, ws, ws, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)


class WindowAttention(nn.Module):
    """Multi-head self-attention inside non-overlapping windows, with a
    learned relative position bias."""

    def __init__(self, dim, heads, ws):
        super().__init__()
        self.heads, self.ws = heads, ws
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.bias_table = nn.Parameter(torch.zeros((2 * ws - 1) ** 2, heads))
        nn.init.trunc_normal_(self.bias_table, std=0.02)
        coords = torch.stack(torch.meshgrid(torch.arange(ws), torch.arange(ws), indexing="ij")).flatten(1)
        rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (ws - 1)
        self.register_buffer("rel_index", rel[..., 0] * (2 * ws - 1) + rel[..., 1], persistent=False)

    def forward(self, x):
        bw, n, c = x.shape
        qkv = self.qkv(x).reshape(bw, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.bias_table[self.rel_index.reshape(-1)].reshape(n, n, -1).permute(2, 0, 1)
        attn = (attn + bias.unsqueeze(0)).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bw, n, c)
        return self.proj(out)


class SwinBlock(nn.Module):
    def __init__(self, dim, heads, ws, mlp_ratio=2.0):
        super().__init__()
        self.ws = ws
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, ws)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        b, h, w, c = x.shape
        win = window_partition(self.norm1(x), self.ws)
        x = x + window_reverse(self.attn(win), self.ws, b, h, w)
        return x + self.mlp(self.norm2(x))


class PatchMerging(nn.Module):
    """2x2 neighbourhood concat -> linear, halves resolution."""

    def __init__(self, dim_in, dim_out):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim_in)
        self.reduction = nn.Linear(4 * dim_in, dim_out, bias=False)

    def forward(self, x):
        x = torch.cat([x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], dim=-1)
        return self.reduction(self.norm(x))


class PatchReverseMerging(nn.Module):
    """Linear expansion + pixel shuffle, doubles resolution."""

    def __init__(self, dim_in, dim_out, factor=2):
        super().__init__()
        self.factor = factor
        self.expand = nn.Linear(dim_in, dim_out * factor * factor)
        self.norm = nn.LayerNorm(dim_out)

    def forward(self, x):
        x = self.expand(x).permute(0, 3, 1, 2)
        x = F.pixel_shuffle(x, self.factor).permute(0, 2, 3, 1)
        return self.norm(x)


def _window(ws, h, w):
    ws = min(ws, h, w)
    while h % ws or w % ws:
        ws -= 1
    return ws


class SwinEncoder(nn.Module):
    def __init__(self, cfg, image_size):
        super().__init__()
        dims, p = cfg.embed_dims, cfg.patch_size
        h, w = image_size[0] // p, image_size[1] // p
        self.embed = nn.Conv2d(3, dims[0], p, stride=p)
        self.embed_norm = nn.LayerNorm(dims[0])
        self.merges = nn.ModuleList()
        self.stages = nn.ModuleList()
        for i, (dim, n_blocks) in enumerate(zip(dims, cfg.blocks_per_stage)):
            if i > 0:
                self.merges.append(PatchMerging(dims[i - 1], dim))
                h, w = h // 2, w // 2
            ws = _window(cfg.window_size, h, w)
            self.stages.append(nn.Sequential(*[SwinBlock(dim, cfg.num_heads[i], ws) for _ in range(n_blocks)]))
        self.head = nn.Conv2d(dims[-1], cfg.head_filters, 3, padding=1)

    def forward(self, x):
        x = self.embed_norm(self.embed(x).permute(0, 2, 3, 1))
        for i, stage in enumerate(self.stages):
            if i > 0:
                x = self.merges[i - 1](x)
            x = stage(x)
        return self.head(x.permute(0, 3, 1, 2))


class SwinDecoder(nn.Module):
    def __init__(self, cfg, image_size):
        super().__init__()
        dims, p = cfg.embed_dims, cfg.patch_size
        d = cfg.downsample
        h, w = image_size[0] // d, image_size[1] // d
        self.latent_hw = (h, w)
        self.head = nn.Conv2d(cfg.head_filters, dims[-1], 3, padding=1)
        self.stages = nn.ModuleList()
        self.expands = nn.ModuleList()
        for i in reversed(range(len(dims))):
            ws = _window(cfg.window_size, h, w)
            self.stages.append(
                nn.Sequential(*[SwinBlock(dims[i], cfg.num_heads[i], ws) for _ in range(cfg.blocks_per_stage[i])])
            )
            if i > 0:
                self.expands.append(PatchReverseMerging(dims[i], dims[i - 1]))
                h, w = h * 2, w * 2
        self.unembed = nn.Linear(dims[0], 3 * p * p)
        self.p = p

    def forward(self, z):
        x = self.head(z).permute(0, 2, 3, 1)
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i < len(self.expands):
                x = self.expands[i](x)
        x = F.pixel_shuffle(self.unembed(x).permute(0, 3, 1, 2), self.p)
        return torch.sigmoid(x)


# ---------------------------------------------------------------- public API


def build_backbone(cfg, image_size=(32, 32)):
    """Return ``(encoder, decoder)`` modules for ``cfg``.

    ``image_size`` only matters for the windowed-attention backbone, whose
    window sizes are fitted to each stage's resolution.
    """
    cfg.validate()
    cfg.latent_shape(*image_size)
    if cfg.backbone == "conv":
        return ConvEncoder(cfg), ConvDecoder(cfg)
    if cfg.backbone == "swin":
        return SwinEncoder(cfg, image_size), SwinDecoder(cfg, image_size)
    raise ConfigError(f"unsupported backbone_kind {cfg.backbone!r}")


def count_params(module):
    return sum(p.numel() for p in module.parameters())


def check_image(image):
    if image.dim() != 4 or image.shape[1] != 3:
        raise ShapeError(f"expected images shaped (B, 3, H, W), got {tuple(image.shape)}")
    if not torch.isfinite(image).all():
        raise NonFiniteError("image contains non-finite values")
    if image.min() < 0 or image.max() > 1:
        raise ShapeError("image values must lie in [0, 1]")


def encode(image, encoder, cfg):
    """Encode a batch of images to latents shaped ``(B, C_out, H/D, W/D)``."""
    check_image(image)
    cfg.latent_shape(image.shape[2], image.shape[3])
    y = encoder(image)
    if not torch.isfinite(y).all():
        raise NonFiniteError("encoder produced non-finite latent values")
    return y


def decode(latent, decoder, cfg):
    if latent.dim() != 4 or latent.shape[1] != cfg.head_filters:
        raise ShapeError(
            f"latent shaped {tuple(latent.shape)} does not match head_filters={cfg.head_filters}"
        )
    expected = getattr(decoder, "latent_hw", None)
    if expected is not None and tuple(latent.shape[2:]) != expected:
        raise ShapeError(f"decoder was built for {expected} latents, got {tuple(latent.shape[2:])}")
    return decoder(latent)
