"""End-to-end encode and decode over a tiled image.

Encoding computes per-patch quantized latents once, entropy-codes them, then
runs online adaptation of the tradeoff vector per patch; only the adapted
fp16 tradeoffs change between iteration settings, never the payload bytes.
Decoding performs exactly one conditional decode per patch.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
import torch

from .bitstream import (
    Container,
    METRIC_IDS,
    PatchRecord,
    assemble,
    bpp,
    grid_shape,
    read_container,
    tile,
    TilePatch,
    write_container,
)
from .checkpoint import meta_checksum
from .codec_core import DOWNSAMPLE, pad_to_multiple, quantize, validate_image
from .entropy_coding import build_cdf_table, decode_channels, encode_channels
from .errors import FormatError
from .meta_training import MetaCodec
from .modulation import conditional_decode
from .online_adaptation import OMLConfig, OMLResult, oml_adapt_patch


@dataclass
class EncodeResult:
    data: bytes
    container: Container
    reconstruction: torch.Tensor  # encoder-side best reconstruction
    stats: dict


def _encode_patch(
    patch: TilePatch,
    meta: MetaCodec,
    quality: int,
    tables,
    lambda_t: float,
    cfg: OMLConfig,
    patch_size: int,
    adapt_boundary: bool,
) -> tuple[PatchRecord, OMLResult]:
    x = patch.image
    padded, _ = pad_to_multiple(x, DOWNSAMPLE)
    with torch.no_grad():
        y = meta.encoders[quality](padded.unsqueeze(0)).squeeze(0)
        z = quantize(y, "round")
    payload = encode_channels(z.numpy().astype(np.int64), tables)

    is_full = x.shape[-2] == patch_size and x.shape[-1] == patch_size
    patch_cfg = cfg if (adapt_boundary or is_full) else replace(cfg, iterations=0)
    result = oml_adapt_patch(x, z, meta.decoder, meta.modulators, lambda_t, patch_cfg)
    record = PatchRecord(lambdas=result.best_lambda, payload=payload)
    return record, result


def encode_image(
    img: torch.Tensor,
    meta: MetaCodec,
    lambda_t: float,
    cfg: OMLConfig,
    patch_size: int = 512,
    adapt_boundary: bool = True,
    quality: int | None = None,
    jobs: int = 1,
) -> EncodeResult:
    validate_image(img)
    if lambda_t <= 0:
        raise ValueError("lambda must be positive")
    t0 = time.perf_counter()
    if quality is None:
        quality = meta.nearest_quality(lambda_t)
    if not 0 <= quality < len(meta.lambdas):
        raise ValueError(f"quality index {quality} outside the model grid")
    tables = build_cdf_table(meta.entropy_models[quality], meta.cfg.symbol_min, meta.cfg.symbol_max)
    patches = tile(img, patch_size)

    def job(p: TilePatch):
        return _encode_patch(p, meta, quality, tables, lambda_t, cfg, patch_size, adapt_boundary)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outputs = list(pool.map(job, patches))
    else:
        outputs = [job(p) for p in patches]

    records = [rec for rec, _ in outputs]
    results = [res for _, res in outputs]
    height, width = int(img.shape[-2]), int(img.shape[-1])
    container = Container(
        width=width,
        height=height,
        patch_size=patch_size,
        k=meta.modulators.k,
        metric_id=METRIC_IDS[cfg.metric],
        quality_index=quality,
        model_checksum=meta_checksum(meta),
        patches=records,
    )
    data = write_container(container)
    recon = assemble(
        [TilePatch(p.top, p.left, r.best_reconstruction) for p, r in zip(patches, results)],
        width,
        height,
    )
    wall = time.perf_counter() - t0

    px = np.array([p.image.shape[-2] * p.image.shape[-1] for p in patches], dtype=np.float64)
    initial = float(np.sum(px * [r.initial_distortion for r in results]) / px.sum())
    best = float(np.sum(px * [r.best_distortion for r in results]) / px.sum())
    breakdown = bpp(container, width, height)
    stats = {
        "bpp": breakdown.total,
        "payload_bpp": breakdown.payload,
        "side_info_bpp": breakdown.side_info,
        "header_bpp": breakdown.header,
        "metric": cfg.metric,
        "oml_iters": cfg.iterations,
        "initial_distortion": initial,
        "best_distortion": best,
        "lambda": lambda_t,
        "quality_index": quality,
        "lambda_star": [r.best_lambda.tolist() for r in results],
        "wall_time": wall,
    }
    return EncodeResult(data=data, container=container, reconstruction=recon, stats=stats)


def decode_container(data: bytes | Container, meta: MetaCodec) -> torch.Tensor:
    """One conditional decode per patch; output cropped to the original dims."""
    container = read_container(data, expected_checksum=meta_checksum(meta)) if isinstance(
        data, (bytes, bytearray)
    ) else data
    if container.k != meta.modulators.k:
        raise FormatError(f"container K={container.k} does not match model K={meta.modulators.k}")
    if not 0 <= container.quality_index < len(meta.lambdas):
        raise FormatError(f"container quality index {container.quality_index} outside model grid")
    em = meta.entropy_models[container.quality_index]
    tables = build_cdf_table(em, meta.cfg.symbol_min, meta.cfg.symbol_max)

    ps = container.patch_size
    rows, cols = grid_shape(container.width, container.height, ps)
    out_patches = []
    idx = 0
    for r in range(rows):
        for c in range(cols):
            top, left = r * ps, c * ps
            h = min(ps, container.height - top)
            w = min(ps, container.width - left)
            ph = (h + DOWNSAMPLE - 1) // DOWNSAMPLE * DOWNSAMPLE
            pw = (w + DOWNSAMPLE - 1) // DOWNSAMPLE * DOWNSAMPLE
            shape = (meta.cfg.latent_channels, ph // DOWNSAMPLE, pw // DOWNSAMPLE)
            rec = container.patches[idx]
            z = torch.from_numpy(decode_channels(rec.payload, tables, shape)).float()
            with torch.no_grad():
                x_hat = conditional_decode(z, meta.decoder, meta.modulators, rec.lambdas)
            out_patches.append(TilePatch(top, left, x_hat[..., :h, :w]))
            idx += 1
    return assemble(out_patches, container.width, container.height)
