import math
import warnings

import torch
import torch.nn.functional as F

from .errors import ShapeError

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
PSNR_CEILING = 100.0


def _check_pair(x, y):
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.dim() == 3:
        return x.unsqueeze(0), y.unsqueeze(0)
    return x, y


def psnr(x, x_hat, ceiling=PSNR_CEILING):
    """Per-image PSNR in dB for images in [0, 1]; identical images map to
    ``ceiling``."""
    x, x_hat = _check_pair(x, x_hat)
    mse = ((x - x_hat) ** 2).flatten(1).mean(dim=1).double()
    out = torch.full_like(mse, float(ceiling))
    nz = mse > 0
    out[nz] = (-10.0 * torch.log10(mse[nz])).clamp(max=ceiling)
    return out


def gaussian_window(size=11, sigma=1.5, dtype=torch.float64):
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    return g / g.sum()


def _filter(x, win):
    c = x.shape[1]
    k = win.numel()
    x = F.conv2d(x, win.view(1, 1, 1, k).expand(c, 1, 1, k), groups=c)
    return F.conv2d(x, win.view(1, 1, k, 1).expand(c, 1, k, 1), groups=c)


def _ssim_terms(x, y, win, data_range=1.0):
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_x, mu_y = _filter(x, win), _filter(y, win)
    sxx = _filter(x * x, win) - mu_x**2
    syy = _filter(y * y, win) - mu_y**2
    sxy = _filter(x * y, win) - mu_x * mu_y
    cs_map = (2 * sxy + c2) / (sxx + syy + c2)
    ssim_map = (2 * mu_x * mu_y + c1) / (mu_x**2 + mu_y**2 + c1) * cs_map
    return ssim_map.flatten(1).mean(dim=1), cs_map.flatten(1).mean(dim=1)


def ssim(x, y, win_size=11, sigma=1.5, data_range=1.0):
    """Single-scale SSIM (Gaussian window, valid region), per image."""
    x, y = _check_pair(x, y)
    if min(x.shape[-2:]) < win_size:
        raise ShapeError(f"images smaller than the {win_size}x{win_size} SSIM window")
    return _ssim_terms(x.double(), y.double(), gaussian_window(win_size, sigma), data_range)[0]


def max_scales(height, width, win_size=11):
    side = min(height, width)
    if side < win_size:
        return 0
    return 1 + int(math.floor(math.log2(side / win_size)))


def ms_ssim(x, y, scales=5, win_size=11, sigma=1.5, data_range=1.0):
    """Multi-scale SSIM per image, in [0, 1].

    When the images are too small for ``scales`` levels the pyramid is cut to
    the levels that fit and the remaining weights are renormalized.
    """
    x, y = _check_pair(x, y)
    x, y = x.double(), y.double()
    fit = max_scales(*x.shape[-2:], win_size=win_size)
    if fit == 0:
        raise ShapeError(f"images smaller than the {win_size}x{win_size} SSIM window")
    if scales > fit:
        warnings.warn(f"MS-SSIM reduced from {scales} to {fit} scales for {tuple(x.shape[-2:])} images",
                      stacklevel=2)
        scales = fit
    weights = torch.tensor(MS_SSIM_WEIGHTS[:scales], dtype=torch.float64)
    weights = weights / weights.sum()
    win = gaussian_window(win_size, sigma)
    out = torch.ones(x.shape[0], dtype=torch.float64)
    for i in range(scales):
        s, cs = _ssim_terms(x, y, win, data_range)
        term = s if i == scales - 1 else cs
        out = out * term.clamp(min=0) ** weights[i]
        if i < scales - 1:
            x = F.avg_pool2d(x, 2)
            y = F.avg_pool2d(y, 2)
    return out.clamp(0.0, 1.0)
