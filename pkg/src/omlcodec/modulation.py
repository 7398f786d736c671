"""Conditional feature modulators and the conditional decode path.

Each decoding block k has a two-layer modulator that maps a tradeoff value
lambda^k to per-channel positive scale factors; block outputs are multiplied
channel-wise by those factors. The modulator input is ln(lambda) since useful
tradeoff values span several orders of magnitude.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .codec_core import Decoder
from .errors import ShapeError

LAMBDA_MIN = 1e-6
LAMBDA_MAX = 1e4
SOFTPLUS_THRESHOLD = 30.0
IDENTITY_BIAS = math.log(math.e - 1.0)  # softplus(x) == 1


@dataclass
class TradeoffVector:
    """The K per-layer conditional tradeoffs lambda^1..lambda^K."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size < 1:
            raise ValueError("TradeoffVector needs at least one value")
        if np.any(self.values < LAMBDA_MIN) or np.any(self.values > LAMBDA_MAX):
            raise ValueError(
                f"tradeoff values must lie in [{LAMBDA_MIN}, {LAMBDA_MAX}], got {self.values}"
            )

    def __len__(self) -> int:
        return self.values.size

    @classmethod
    def constant(cls, lam: float, k: int) -> "TradeoffVector":
        return cls(np.full(k, lam))


def clamp_lambda(values: np.ndarray | float) -> np.ndarray:
    return np.clip(np.asarray(values, dtype=np.float64), LAMBDA_MIN, LAMBDA_MAX)


class Modulators:
    """Parameters of the K two-layer modulator networks (leaf tensors, trainable).

    Initialization is the identity modulation: the second layer outputs the
    softplus pre-image of 1 for every channel, so an untrained conditional
    decode matches the plain decoder.
    """

    def __init__(self, channel_counts: list[int], hidden: int = 16, seed: int = 0):
        self.channel_counts = list(channel_counts)
        self.hidden = hidden
        gen = torch.Generator().manual_seed(seed)
        params: dict[str, torch.Tensor] = {}
        for k, n in enumerate(self.channel_counts, start=1):
            params[f"m{k}.w1"] = (torch.rand((hidden, 1), generator=gen) - 0.5)
            params[f"m{k}.b1"] = torch.zeros(hidden)
            params[f"m{k}.w2"] = torch.zeros((n, hidden))
            params[f"m{k}.b2"] = torch.full((n,), IDENTITY_BIAS)
        for t in params.values():
            t.requires_grad_(True)
        self.params = params

    @property
    def k(self) -> int:
        return len(self.channel_counts)

    def trainable_tensors(self) -> list[torch.Tensor]:
        return list(self.params.values())

    def detached_params(self) -> dict[str, torch.Tensor]:
        return {name: t.detach().clone().requires_grad_(True) for name, t in self.params.items()}

    def load_params(self, params: dict[str, torch.Tensor]) -> None:
        with torch.no_grad():
            for name, t in self.params.items():
                t.copy_(params[name])

    def astype(self, dtype: torch.dtype) -> "Modulators":
        out = Modulators(self.channel_counts, self.hidden)
        out.params = {name: t.detach().to(dtype).requires_grad_(True) for name, t in self.params.items()}
        return out


def _layer_scales(
    lam_k: torch.Tensor,
    w1: torch.Tensor,
    b1: torch.Tensor,
    w2: torch.Tensor,
    b2: torch.Tensor,
    slope: float = 0.2,
) -> torch.Tensor:
    h = F.leaky_relu(w1 @ torch.log(lam_k).view(1) + b1, slope)
    pre = w2 @ h + b2
    s = F.softplus(pre, threshold=SOFTPLUS_THRESHOLD)
    # softplus underflows to 0.0 for pre < ~-103 in float32; keep strictly positive
    return torch.clamp(s, min=torch.finfo(s.dtype).tiny)


def scale_factors(
    lam_k: float | torch.Tensor,
    modulators: Modulators,
    k: int,
    params: dict[str, torch.Tensor] | None = None,
) -> torch.Tensor:
    """Per-channel positive scale factors for decoding block k (1-based)."""
    p = params if params is not None else modulators.params
    if not torch.is_tensor(lam_k):
        lam_k = torch.as_tensor(float(lam_k), dtype=p[f"m{k}.b2"].dtype)
    # bounds compared in the working dtype so the boundary itself never warns
    lo = torch.tensor(LAMBDA_MIN, dtype=lam_k.dtype)
    hi = torch.tensor(LAMBDA_MAX, dtype=lam_k.dtype)
    if lam_k.detach() < lo or lam_k.detach() > hi:
        warnings.warn(
            f"lambda^{k}={float(lam_k.detach()):g} outside [{LAMBDA_MIN}, {LAMBDA_MAX}]; clamping",
            stacklevel=2,
        )
        lam_k = torch.clamp(lam_k, lo, hi)
    return _layer_scales(lam_k, p[f"m{k}.w1"], p[f"m{k}.b1"], p[f"m{k}.w2"], p[f"m{k}.b2"])


def modulate(y: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """Channel-wise multiply: y'[i] = s[i] * y[i]; shape preserved."""
    if y.shape[-3] != s.shape[0]:
        raise ShapeError(f"channel mismatch: feature map has {y.shape[-3]}, scales {s.shape[0]}")
    return y * s.view(-1, 1, 1)


def all_scales(
    modulators: Modulators,
    lam: torch.Tensor,
    params: dict[str, torch.Tensor] | None = None,
) -> list[torch.Tensor]:
    return [scale_factors(lam[k], modulators, k + 1, params) for k in range(modulators.k)]


def conditional_decode(
    z: torch.Tensor,
    decoder: Decoder,
    modulators: Modulators,
    lam: TradeoffVector | np.ndarray | torch.Tensor,
    params: dict[str, torch.Tensor] | None = None,
) -> torch.Tensor:
    """Decode z with block outputs modulated by scale_factors(lambda^k).

    Differentiable with respect to lam when given as a torch tensor.
    """
    if isinstance(lam, TradeoffVector):
        lam = lam.values
    if not torch.is_tensor(lam):
        lam = torch.as_tensor(np.asarray(lam, dtype=np.float64), dtype=z.dtype)
    if lam.numel() != modulators.k:
        raise ShapeError(f"tradeoff vector has {lam.numel()} entries, decoder has {modulators.k} blocks")
    scales = all_scales(modulators, lam, params)
    batched = z.dim() == 4
    out = decoder(z if batched else z.unsqueeze(0), scales=scales)
    return out if batched else out.squeeze(0)
