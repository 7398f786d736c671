"""Bit-exact container format, image tiling and bpp accounting.

Layout (all multi-byte fields big-endian):

    header:  magic "OMC1" (4s), version u8, width u16, height u16,
             patch_size u16, K u8, metric_id u8, quality_index u8,
             model_checksum u32                               -> 18 bytes
    patches (row-major):  K x fp16 lambda* (binary16), payload_len u32,
             payload bytes

File extension: .omlc
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch

from .errors import BadMagicError, BadVersionError, ChecksumMismatchError, TruncatedError

MAGIC = b"OMC1"
VERSION = 1
HEADER_FMT = ">4sBHHHBBBI"
HEADER_SIZE = struct.calcsize(HEADER_FMT)  # 18
PATCH_LEN_FMT = ">I"

METRIC_IDS = {"mse": 0, "msssim": 1}
METRIC_NAMES = {v: k for k, v in METRIC_IDS.items()}


def fp16_round(values) -> np.ndarray:
    """Round to the nearest IEEE 754 binary16 value (ties to even); idempotent."""
    return np.asarray(values, dtype=np.float64).astype(np.float16).astype(np.float64)


def fp16_bytes(values) -> bytes:
    return np.asarray(values, dtype=np.float16).astype(">f2").tobytes()


def fp16_from_bytes(data: bytes) -> np.ndarray:
    return np.frombuffer(data, dtype=">f2").astype(np.float64)


@dataclass
class TilePatch:
    top: int
    left: int
    image: torch.Tensor  # (3, h, w)


def tile(x: torch.Tensor, patch_size: int) -> list[TilePatch]:
    """Row-major non-overlapping grid; boundary patches keep their true size."""
    if patch_size < 16 or patch_size % 16:
        raise ValueError("patch_size must be >= 16 and a multiple of 16")
    h, w = int(x.shape[-2]), int(x.shape[-1])
    patches = []
    for top in range(0, h, patch_size):
        for left in range(0, w, patch_size):
            patches.append(
                TilePatch(top, left, x[:, top : min(top + patch_size, h), left : min(left + patch_size, w)])
            )
    return patches


def assemble(patches: list[TilePatch], width: int, height: int) -> torch.Tensor:
    """Exact inverse of tile; raises on missing or overlapping coverage."""
    if not patches:
        raise ValueError("no patches to assemble")
    out = torch.zeros((3, height, width), dtype=patches[0].image.dtype)
    covered = torch.zeros((height, width), dtype=torch.int32)
    for p in patches:
        ph, pw = int(p.image.shape[-2]), int(p.image.shape[-1])
        if p.top + ph > height or p.left + pw > width:
            raise ValueError(f"patch at ({p.top},{p.left}) of size {ph}x{pw} exceeds {height}x{width}")
        out[:, p.top : p.top + ph, p.left : p.left + pw] = p.image
        covered[p.top : p.top + ph, p.left : p.left + pw] += 1
    if int(covered.min()) < 1:
        raise ValueError("patches do not cover the image")
    if int(covered.max()) > 1:
        raise ValueError("overlapping patches")
    return out


def grid_shape(width: int, height: int, patch_size: int) -> tuple[int, int]:
    return (height + patch_size - 1) // patch_size, (width + patch_size - 1) // patch_size


@dataclass
class PatchRecord:
    lambdas: np.ndarray  # (K,) fp16-representable values
    payload: bytes


@dataclass
class Container:
    width: int
    height: int
    patch_size: int
    k: int
    metric_id: int
    quality_index: int
    model_checksum: int
    patches: list[PatchRecord]


def write_container(container: Container) -> bytes:
    """Serialize to the normative byte layout."""
    rows, cols = grid_shape(container.width, container.height, container.patch_size)
    if len(container.patches) != rows * cols:
        raise ValueError(
            f"container has {len(container.patches)} patches, grid needs {rows * cols}"
        )
    out = bytearray()
    out += struct.pack(
        HEADER_FMT,
        MAGIC,
        VERSION,
        container.width,
        container.height,
        container.patch_size,
        container.k,
        container.metric_id,
        container.quality_index,
        container.model_checksum,
    )
    for rec in container.patches:
        lam = fp16_round(rec.lambdas)
        if lam.size != container.k:
            raise ValueError(f"patch has {lam.size} tradeoffs, header says K={container.k}")
        out += fp16_bytes(lam)
        out += struct.pack(PATCH_LEN_FMT, len(rec.payload))
        out += rec.payload
    return bytes(out)


def read_container(data: bytes, expected_checksum: int | None = None) -> Container:
    """Exact inverse of write_container; raises distinct format errors."""
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"not an OMC1 container (got {data[:4]!r})")
    if len(data) < HEADER_SIZE:
        raise TruncatedError(f"container header truncated at {len(data)} bytes")
    magic, version, width, height, patch_size, k, metric_id, quality_index, checksum = struct.unpack(
        HEADER_FMT, data[:HEADER_SIZE]
    )
    if version != VERSION:
        raise BadVersionError(f"unsupported container version {version}")
    if expected_checksum is not None and checksum != expected_checksum:
        raise ChecksumMismatchError(
            f"container was written for model checksum {checksum:#010x}, "
            f"expected {expected_checksum:#010x}"
        )
    rows, cols = grid_shape(width, height, patch_size)
    pos = HEADER_SIZE
    patches = []
    for _ in range(rows * cols):
        end = pos + 2 * k
        if end + 4 > len(data):
            raise TruncatedError("container ends inside a patch record")
        lambdas = fp16_from_bytes(data[pos:end])
        (payload_len,) = struct.unpack(PATCH_LEN_FMT, data[end : end + 4])
        pos = end + 4
        if pos + payload_len > len(data):
            raise TruncatedError("container ends inside a patch payload")
        patches.append(PatchRecord(lambdas=lambdas, payload=bytes(data[pos : pos + payload_len])))
        pos += payload_len
    if pos != len(data):
        raise TruncatedError(f"{len(data) - pos} trailing bytes after the last patch")
    return Container(width, height, patch_size, k, metric_id, quality_index, checksum, patches)


@dataclass
class BppBreakdown:
    total: float
    payload: float
    side_info: float
    header: float


def bpp(data: bytes | Container, width: int | None = None, height: int | None = None) -> BppBreakdown:
    """Bits-per-pixel accounting. total == payload + side_info + header exactly.

    The header component covers the fixed header plus the per-patch payload
    length fields; side_info is the K fp16 tradeoffs per patch.
    """
    c = read_container(data) if isinstance(data, (bytes, bytearray)) else data
    width = width if width is not None else c.width
    height = height if height is not None else c.height
    n = len(c.patches)
    payload_bytes = sum(len(p.payload) for p in c.patches)
    side_bytes = 2 * c.k * n
    header_bytes = HEADER_SIZE + 4 * n
    px = width * height
    payload_bpp = 8.0 * payload_bytes / px
    side_bpp = 8.0 * side_bytes / px
    header_bpp = 8.0 * header_bytes / px
    return BppBreakdown(
        total=payload_bpp + side_bpp + header_bpp,
        payload=payload_bpp,
        side_info=side_bpp,
        header=header_bpp,
    )
