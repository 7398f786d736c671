"""Image I/O (8-bit PNG and binary PPM) and dataset loading."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DataError

IMAGE_SUFFIXES = (".png", ".ppm")


def to_uint8(x: torch.Tensor) -> np.ndarray:
    arr = x.detach().cpu().numpy()
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(arr.astype(np.float32) / 255.0)


def load_image(path) -> torch.Tensor:
    """Read an 8-bit RGB image as a (3, H, W) float tensor in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such image: {path}")
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"))
    return from_uint8(np.transpose(arr, (2, 0, 1)))


def save_image(x: torch.Tensor, path) -> None:
    """Write a (3, H, W) [0, 1] tensor as PNG or binary PPM by extension."""
    path = Path(path)
    if path.suffix.lower() not in IMAGE_SUFFIXES:
        raise ValueError(f"unsupported image extension {path.suffix!r} (use .png or .ppm)")
    arr = np.transpose(to_uint8(x), (1, 2, 0))
    Image.fromarray(arr, mode="RGB").save(path)


def load_image_dir(dirpath) -> list[torch.Tensor]:
    """All PNG/PPM images in a directory, sorted by filename."""
    dirpath = Path(dirpath)
    if not dirpath.is_dir():
        raise DataError(f"not a directory: {dirpath}")
    paths = sorted(p for p in dirpath.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise DataError(f"no images in {dirpath}")
    return [load_image(p) for p in paths]
