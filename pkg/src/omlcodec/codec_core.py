"""Base autoencoder, quantizer, factorized entropy model and rate-distortion loss.

The codec is a small 4-stage convolutional autoencoder (total downsample 16x)
with a per-channel discretized zero-mean logistic entropy model. The decoder
exposes one modulation site after each of its K decoding blocks; the plain
(unmodulated) path is used for base training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DataError, NumericalError, ShapeError

DOWNSAMPLE = 16
PMF_FLOOR = 2.0 ** -16  # matches the 16-bit coder precision


@dataclass
class CodecConfig:
    hidden_channels: int = 64
    latent_channels: int = 32
    num_blocks: int = 4  # K, encoder stages and decoder blocks
    modulator_hidden: int = 16
    kernel_size: int = 5
    leaky_slope: float = 0.2
    symbol_min: int = -127
    symbol_max: int = 127

    @property
    def decoder_channel_counts(self) -> list[int]:
        """Channel count of each decoding block's output (the modulation sites)."""
        return [self.hidden_channels] * (self.num_blocks - 1) + [3]


class Encoder(nn.Module):
    """4 stride-2 conv blocks, each followed by a leaky rectifier."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        k, p = cfg.kernel_size, cfg.kernel_size // 2
        chans = [3] + [cfg.hidden_channels] * (cfg.num_blocks - 1) + [cfg.latent_channels]
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], k, stride=2, padding=p)
            for i in range(cfg.num_blocks)
        )
        # start latents at quantization-bin scale, otherwise the uniform noise
        # proxy drowns the signal and training stalls in a zero-rate optimum
        with torch.no_grad():
            self.convs[-1].weight *= 4.0
            self.convs[-1].bias *= 4.0
        self.slope = cfg.leaky_slope

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for conv in self.convs:
            x = F.leaky_relu(conv(x), self.slope)
        return x


class Decoder(nn.Module):
    """K decoding blocks (conv + activation + 2x nearest upsampling).

    Block k's output is the modulation site with N^k channels; the final block
    maps to 3 channels. `forward` multiplies each block output by the matching
    per-channel scale vector when one is given, then clamps to [0, 1].
    """

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        k, p = cfg.kernel_size, cfg.kernel_size // 2
        chans = [cfg.latent_channels] + cfg.decoder_channel_counts
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], k, stride=1, padding=p)
            for i in range(cfg.num_blocks)
        )
        self.slope = cfg.leaky_slope

    def forward(self, z: torch.Tensor, scales: list[torch.Tensor] | None = None) -> torch.Tensor:
        x = z
        for i, conv in enumerate(self.convs):
            x = F.leaky_relu(conv(x), self.slope)
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            if scales is not None:
                x = x * scales[i].view(1, -1, 1, 1)
        return torch.clamp(x, 0.0, 1.0)


class LogisticEntropyModel(nn.Module):
    """Discretized zero-mean logistic with one learnable scale per latent channel.

    pmf(v) = F(v + 0.5) - F(v - 0.5) with F(t) = sigmoid(t / s_c).
    """

    def __init__(self, channels: int):
        super().__init__()
        self.log_scales = nn.Parameter(torch.zeros(channels))

    @property
    def scales(self) -> torch.Tensor:
        return torch.exp(self.log_scales)

    def pmf(self, y: torch.Tensor) -> torch.Tensor:
        """Per-element probability mass at (possibly continuous) values y.

        y has shape (..., C, H, W); the channel axis is -3.
        """
        s = self.scales.to(y.dtype).view(-1, 1, 1)
        upper = torch.sigmoid((y + 0.5) / s)
        lower = torch.sigmoid((y - 0.5) / s)
        return upper - lower

    def bits(self, y: torch.Tensor) -> torch.Tensor:
        """Total information content of y in bits, pmf floored at 2^-16."""
        p = torch.clamp(self.pmf(y), min=PMF_FLOOR)
        return -torch.sum(torch.log2(p))


def validate_image(x: torch.Tensor) -> None:
    if x.dim() != 3 or x.shape[0] != 3:
        raise ShapeError(f"expected image of shape (3, H, W), got {tuple(x.shape)}")
    if x.numel() == 0:
        raise ShapeError("empty image")


def pad_to_multiple(x: torch.Tensor, factor: int) -> tuple[torch.Tensor, tuple[int, int]]:
    """Edge-replicate pad (3, H, W) so both spatial dims are multiples of factor.

    Returns the padded image and the original (H, W) for cropping after decode.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    h, w = int(x.shape[-2]), int(x.shape[-1])
    ph = (h + factor - 1) // factor * factor
    pw = (w + factor - 1) // factor * factor
    if (ph, pw) == (h, w):
        return x, (h, w)
    arr = np.pad(x.detach().cpu().numpy(), [(0, 0), (0, ph - h), (0, pw - w)], mode="edge")
    return torch.from_numpy(arr).to(x.dtype), (h, w)


def round_half_away(y: torch.Tensor) -> torch.Tensor:
    """Round half away from zero (fixed so bitstreams are platform identical)."""
    return torch.sign(y) * torch.floor(torch.abs(y) + 0.5)


def quantize(
    y: torch.Tensor,
    mode: str,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Hard rounding ("round") or additive uniform noise in (-0.5, 0.5) ("noise")."""
    if mode == "round":
        return round_half_away(y)
    if mode == "noise":
        u = torch.rand(y.shape, generator=generator, dtype=y.dtype) - 0.5
        return y + u
    raise ValueError(f"unknown quantization mode: {mode!r}")


def encode_latent(x: torch.Tensor, encoder: Encoder) -> torch.Tensor:
    """Deterministic latent of shape (C_lat, H/16, W/16) for a (3, H, W) image."""
    validate_image(x)
    h, w = int(x.shape[-2]), int(x.shape[-1])
    if h % DOWNSAMPLE or w % DOWNSAMPLE:
        raise ShapeError(f"input dims {h}x{w} are not multiples of {DOWNSAMPLE}")
    with torch.no_grad():
        return encoder(x.unsqueeze(0)).squeeze(0)


def estimate_rate_bits(z: torch.Tensor, em: LogisticEntropyModel) -> torch.Tensor:
    """-sum log2 pmf(z) with the pmf floored at 2^-16."""
    return em.bits(z)


def rd_loss(
    x: torch.Tensor,
    x_hat: torch.Tensor,
    rate_bits: torch.Tensor | float,
    lam: float,
    num_pixels: int,
) -> torch.Tensor:
    """lambda * MSE + bits per pixel (MSE over all pixels and channels, range [0,1])."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if lam <= 0:
        raise ValueError("lambda must be positive")
    mse = torch.mean((x - x_hat) ** 2)
    rate = rate_bits / num_pixels if torch.is_tensor(rate_bits) else torch.as_tensor(rate_bits / num_pixels)
    return lam * mse + rate


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    crop: int = 64
    lr: float = 1e-4
    lr_schedule: str = "cosine"  # or "constant"
    rate_warmup: float = 0.15  # fraction of steps ramping the rate weight 0 -> 1
    seed: int = 0
    log_every: int = 0  # 0 = silent


@dataclass
class BaseCodec:
    """A trained single-rate codec: encoder, plain decoder and entropy model."""

    cfg: CodecConfig
    lam: float
    encoder: Encoder
    decoder: Decoder
    entropy_model: LogisticEntropyModel
    history: dict = field(default_factory=dict)


def sample_crops(
    images: list[torch.Tensor],
    n: int,
    size: int,
    rng: np.random.Generator,
) -> torch.Tensor:
    """Seeded random (n, 3, size, size) crop batch from a list of (3, H, W) images."""
    if not images:
        raise DataError("empty dataset")
    out = []
    for _ in range(n):
        img = images[int(rng.integers(len(images)))]
        h, w = img.shape[-2], img.shape[-1]
        if h < size or w < size:
            raise ShapeError(f"image {h}x{w} smaller than crop size {size}")
        top = int(rng.integers(h - size + 1))
        left = int(rng.integers(w - size + 1))
        out.append(img[:, top : top + size, left : left + size])
    return torch.stack(out)


def _split_holdout(images: list[torch.Tensor]) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
    # deterministic split: every 8th image held out, at least one per side
    if len(images) < 2:
        return images, images
    val = images[::8] or images[:1]
    train = [im for i, im in enumerate(images) if i % 8 != 0] or images[-1:]
    return train, val


def eval_rd(
    images: list[torch.Tensor],
    encoder: Encoder,
    decoder: Decoder,
    em: LogisticEntropyModel,
    lam: float,
    crop: int,
    seed: int = 0,
) -> dict:
    """Hard-quantized rate-distortion numbers on center crops of a held-out split."""
    mses, bpps = [], []
    with torch.no_grad():
        for img in images:
            h, w = img.shape[-2], img.shape[-1]
            top, left = (h - crop) // 2, (w - crop) // 2
            x = img[:, top : top + crop, left : left + crop].unsqueeze(0)
            z = quantize(encoder(x), "round")
            x_hat = decoder(z)
            mses.append(torch.mean((x - x_hat) ** 2).item())
            bpps.append(em.bits(z).item() / (crop * crop))
    mse = float(np.mean(mses))
    bpp = float(np.mean(bpps))
    return {"mse": mse, "bpp": bpp, "rd_loss": lam * mse + bpp}


def train_base(
    dataset: list[torch.Tensor],
    lam: float,
    config: TrainConfig | None = None,
    cfg: CodecConfig | None = None,
) -> BaseCodec:
    """Train encoder, plain decoder and entropy model at one tradeoff lambda.

    Minimizes rd_loss with noise-mode quantization on seeded random crops.
    The returned history records held-out rd_loss before and after training.
    """
    if not dataset:
        raise DataError("empty dataset")
    if lam <= 0:
        raise ValueError("lambda must be positive")
    config = config or TrainConfig()
    cfg = cfg or CodecConfig()

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    noise_gen = torch.Generator().manual_seed(config.seed + 1)

    encoder = Encoder(cfg)
    decoder = Decoder(cfg)
    em = LogisticEntropyModel(cfg.latent_channels)
    train_imgs, val_imgs = _split_holdout(dataset)

    initial = eval_rd(val_imgs, encoder, decoder, em, lam, config.crop)
    params = list(encoder.parameters()) + list(decoder.parameters()) + list(em.parameters())
    opt = torch.optim.Adam(params, lr=config.lr)
    if config.lr_schedule == "cosine":
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
            opt, T_max=config.steps, eta_min=config.lr * 0.02
        )
    elif config.lr_schedule == "constant":
        scheduler = None
    else:
        raise ValueError(f"unknown lr schedule {config.lr_schedule!r}")
    num_px = config.batch_size * config.crop * config.crop

    warmup_steps = max(1, int(config.rate_warmup * config.steps))
    final_loss = math.nan
    for step in range(config.steps):
        x = sample_crops(train_imgs, config.batch_size, config.crop, rng)
        y = encoder(x)
        y_tilde = quantize(y, "noise", generator=noise_gen)
        x_hat = decoder(y_tilde)
        # ramping the rate weight avoids the early zero-rate collapse where the
        # decoder learns to ignore the noisy latents before they carry signal
        rate_w = min(1.0, step / warmup_steps) if config.rate_warmup > 0 else 1.0
        loss = rd_loss(x, x_hat, rate_w * em.bits(y_tilde), lam, num_px)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite training loss at step {step}: {loss.item()}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if scheduler is not None:
            scheduler.step()
        final_loss = loss.item()
        if config.log_every and (step + 1) % config.log_every == 0:
            print(f"step {step + 1}/{config.steps} loss {final_loss:.5f}")

    final = eval_rd(val_imgs, encoder, decoder, em, lam, config.crop)
    history = {
        "initial_val": initial,
        "final_val": final,
        "final_train_loss": final_loss,
        "steps": config.steps,
    }
    return BaseCodec(cfg=cfg, lam=lam, encoder=encoder, decoder=decoder, entropy_model=em, history=history)
