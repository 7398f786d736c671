"""Quality metrics (PSNR, multi-scale SSIM) and RD reporting."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ShapeError

PSNR_CAP_DB = 100.0
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MSSSIM_WIN_SIZE = 11
MSSSIM_SIGMA = 1.5
MSSSIM_K1 = 0.01
MSSSIM_K2 = 0.03
# five scales need min(H, W) >= 176; halve the requirement per dropped scale
MSSSIM_FULL_MIN_DIM = 176


def psnr(x: torch.Tensor, x_hat: torch.Tensor) -> float:
    """-10 log10(MSE) for [0,1] images, capped at 100 dB."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    mse = torch.mean((x.double() - x_hat.double()) ** 2).item()
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, -10.0 * math.log10(mse))


def _gaussian_window(size: int, sigma: float, dtype: torch.dtype) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - size // 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    return g / g.sum()


def _filter2d(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    # separable valid-mode gaussian, applied per channel
    c = x.shape[1]
    w = win.to(x.dtype)
    x = F.conv2d(x, w.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    x = F.conv2d(x, w.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)
    return x


def _ssim_parts(x: torch.Tensor, y: torch.Tensor, win: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    c1 = MSSSIM_K1**2
    c2 = MSSSIM_K2**2
    mu_x = _filter2d(x, win)
    mu_y = _filter2d(y, win)
    mu_xx = mu_x * mu_x
    mu_yy = mu_y * mu_y
    mu_xy = mu_x * mu_y
    sigma_xx = _filter2d(x * x, win) - mu_xx
    sigma_yy = _filter2d(y * y, win) - mu_yy
    sigma_xy = _filter2d(x * y, win) - mu_xy
    cs = (2 * sigma_xy + c2) / (sigma_xx + sigma_yy + c2)
    ssim = ((2 * mu_xy + c1) / (mu_xx + mu_yy + c1)) * cs
    return ssim.mean(), cs.mean()


def _downsample2(x: torch.Tensor) -> torch.Tensor:
    pad_h = x.shape[-2] % 2
    pad_w = x.shape[-1] % 2
    if pad_h or pad_w:
        x = F.pad(x, (0, pad_w, 0, pad_h), mode="replicate")
    return F.avg_pool2d(x, kernel_size=2)


def num_scales(min_dim: int) -> int:
    """Scales used for a given smallest image dimension (5 needs >= 176)."""
    if min_dim < 16:
        raise ShapeError(f"MS-SSIM needs min(H, W) >= 16, got {min_dim}")
    s = 5
    while s > 1 and min_dim < MSSSIM_FULL_MIN_DIM / 2 ** (5 - s):
        s -= 1
    return s


def msssim(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Multi-scale SSIM on [0,1] images; differentiable.

    Uses the standard 5-scale weights; for small images the coarsest scales
    are dropped and the remaining weights renormalized to sum 1.
    """
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    batched = x.dim() == 4
    a = x if batched else x.unsqueeze(0)
    b = x_hat if batched else x_hat.unsqueeze(0)
    scales = num_scales(min(a.shape[-2], a.shape[-1]))
    weights = torch.tensor(MSSSIM_WEIGHTS[:scales], dtype=a.dtype)
    weights = weights / weights.sum()
    win = _gaussian_window(MSSSIM_WIN_SIZE, MSSSIM_SIGMA, a.dtype)

    values = []
    for s in range(scales):
        ssim_val, cs_val = _ssim_parts(a, b, win)
        values.append(ssim_val if s == scales - 1 else cs_val)
        if s < scales - 1:
            a = _downsample2(a)
            b = _downsample2(b)
    stacked = torch.clamp(torch.stack(values), min=1e-12)
    return torch.prod(stacked ** weights)


def msssim_db(value: float) -> float:
    """The magnified form -10 log10(1 - MS-SSIM), capped at 100 dB."""
    if value >= 1.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, -10.0 * math.log10(1.0 - value))


@dataclass
class RDPoint:
    lam: float
    bpp: float
    psnr: float
    msssim: float
    msssim_db: float
    oml_iters: int
    encode_time: float

    def __post_init__(self):
        if self.bpp <= 0:
            raise ValueError("bpp must be positive")
        if not 0.0 <= self.msssim <= 1.0:
            raise ValueError("msssim must lie in [0, 1]")


CSV_COLUMNS = ("lambda", "bpp", "psnr", "msssim", "msssim_db", "oml_iters", "encode_time")


def rd_report(points: list[RDPoint], path) -> None:
    """Write RD points as CSV, sorted by bpp ascending, floats at 6 significant digits."""
    if not points:
        raise ValueError("no RD points to report")
    rows = sorted(points, key=lambda p: p.bpp)
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write(",".join(CSV_COLUMNS) + "\n")
        for p in rows:
            f.write(
                f"{p.lam:.6g},{p.bpp:.6g},{p.psnr:.6g},{p.msssim:.6g},"
                f"{p.msssim_db:.6g},{p.oml_iters},{p.encode_time:.6g}\n"
            )
