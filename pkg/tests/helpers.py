"""Shared test utilities: deterministic synthetic corpora and small helpers."""

import numpy as np
import torch

REF_SIZE = 96  # fixed frequency denominator: per-pixel statistics independent of size


def _grid(size):
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    return yy / REF_SIZE, xx / REF_SIZE


def _smooth_field(rng, size):
    yy, xx = _grid(size)
    img = np.zeros((3, size, size))
    base = rng.uniform(0.2, 0.8, 3)
    for c in range(3):
        img[c] = base[c]
        for _ in range(int(rng.integers(1, 4))):
            fy, fx = rng.uniform(0.3, 1.6, 2)
            ph = rng.uniform(0, 2 * np.pi, 2)
            amp = rng.uniform(0.05, 0.3)
            img[c] += amp * np.cos(2 * np.pi * fy * yy + ph[0]) * np.cos(2 * np.pi * fx * xx + ph[1])
    return img


def _grating(rng, size):
    yy, xx = _grid(size)
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(1.5, 5)
    ph = rng.uniform(0, 2 * np.pi)
    wave = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + ph)
    lo = rng.uniform(0.1, 0.4, 3)
    hi = rng.uniform(0.6, 0.9, 3)
    return lo[:, None, None] + (hi - lo)[:, None, None] * wave[None]


def _blurred_noise(rng, size):
    sigma = rng.uniform(2.5, 6.0)
    img = rng.normal(0, 1, (3, size, size))
    k = int(3 * sigma) | 1
    t = np.arange(k) - k // 2
    g = np.exp(-(t**2) / (2 * sigma**2))
    g /= g.sum()
    for c in range(3):
        img[c] = np.apply_along_axis(lambda r: np.convolve(r, g, mode="same"), 0, img[c])
        img[c] = np.apply_along_axis(lambda r: np.convolve(r, g, mode="same"), 1, img[c])
    img = img / (np.abs(img).max() + 1e-9)
    mean = rng.uniform(0.3, 0.7, 3)[:, None, None]
    amp = rng.uniform(0.1, 0.2)
    return mean + amp * img


def _blobs(rng, size):
    yy, xx = _grid(size)
    img = np.zeros((3, size, size)) + rng.uniform(0.2, 0.6, 3)[:, None, None]
    for _ in range(int(rng.integers(3, 8))):
        cy, cx = rng.uniform(0, size / REF_SIZE, 2)
        s = rng.uniform(0.05, 0.25)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s**2))
        col = rng.uniform(-0.4, 0.4, 3)
        img += col[:, None, None] * blob[None]
    return img


_MAKERS = (_smooth_field, _grating, _blurred_noise, _blobs)


def texture_corpus(n, size, seed):
    """Mixed compressible textures: gradients, gratings, blurred noise, blobs."""
    rng = np.random.default_rng(seed)
    images = []
    for i in range(n):
        img = _MAKERS[i % len(_MAKERS)](rng, size)
        images.append(torch.from_numpy(np.clip(img, 0.0, 1.0)).float())
    return images


def smooth_corpus(n, size, seed):
    """Very low-frequency color fields; almost all variance is per-image structure."""
    rng = np.random.default_rng(seed)
    return [torch.from_numpy(np.clip(_smooth_field(rng, size), 0, 1)).float() for _ in range(n)]


def constant_corpus(n, size, seed):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        c = rng.uniform(0.1, 0.9, 3)
        out.append(torch.from_numpy(np.broadcast_to(c[:, None, None], (3, size, size)).copy()).float())
    return out
