"""Encode-time online adaptation of the conditional tradeoff vector.

Per patch, SGD over the K tradeoffs with a step-size grid on the first
iteration and halving on non-improvement afterwards. Candidates are rounded
to fp16 before evaluation so the decoder, given the transmitted tradeoffs,
reproduces the encoder's best reconstruction exactly. The latent (and hence
the payload bits) is never touched.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import torch

from .bitstream import fp16_round
from .codec_core import Decoder
from .errors import NumericalError, ShapeError
from .metrics import msssim
from .modulation import LAMBDA_MAX, LAMBDA_MIN, Modulators, conditional_decode

Objective = Callable[[torch.Tensor], torch.Tensor]

DEFAULT_GAMMA_GRID = (0.01, 0.1, 1.0, 10.0, 100.0, 1000.0)


@dataclass
class OMLConfig:
    iterations: int = 5
    gamma_grid: tuple[float, ...] = DEFAULT_GAMMA_GRID
    metric: str = "mse"
    gradient_mode: str = "autodiff"
    fd_step: float = 1e-4  # relative central-difference step
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        grid = tuple(float(g) for g in self.gamma_grid)
        if not grid or any(g <= 0 for g in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("gamma_grid must be non-empty, positive and strictly increasing")
        self.gamma_grid = grid
        if self.metric not in ("mse", "msssim"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.gradient_mode not in ("autodiff", "finite_difference"):
            raise ValueError(f"unknown gradient mode {self.gradient_mode!r}")


@dataclass
class TraceEntry:
    iteration: int
    gamma: float
    lam: np.ndarray  # fp16-rounded candidate
    distortion: float
    accepted: bool


@dataclass
class OMLResult:
    best_lambda: np.ndarray  # fp16-rounded
    best_reconstruction: torch.Tensor | None
    best_distortion: float
    initial_distortion: float
    trace: list[TraceEntry] = field(default_factory=list)


def distortion(x: torch.Tensor, x_hat: torch.Tensor, metric: str) -> torch.Tensor:
    """mse -> mean squared error; msssim -> 1 - MS-SSIM. Lower is better."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if metric == "mse":
        return torch.mean((x - x_hat) ** 2)
    if metric == "msssim":
        return 1.0 - msssim(x, x_hat)
    raise ValueError(f"unknown metric {metric!r}")


def grad_lambda(
    objective: Objective,
    lam: np.ndarray,
    mode: str = "autodiff",
    fd_step: float = 1e-4,
    dtype: torch.dtype = torch.float32,
) -> np.ndarray:
    """Gradient of a scalar objective with respect to the tradeoff vector."""
    lam = np.asarray(lam, dtype=np.float64)
    if mode == "autodiff":
        t = torch.tensor(lam, dtype=dtype, requires_grad=True)
        value = objective(t)
        if not torch.isfinite(value):
            raise NumericalError(f"non-finite objective at {lam}")
        (g,) = torch.autograd.grad(value, t)
        return g.detach().double().numpy()
    if mode == "finite_difference":
        g = np.zeros_like(lam)
        with torch.no_grad():
            for k in range(lam.size):
                h = fd_step * max(1.0, abs(lam[k]))
                hi, lo = lam.copy(), lam.copy()
                hi[k] += h
                lo[k] -= h
                f_hi = float(objective(torch.tensor(hi, dtype=dtype)))
                f_lo = float(objective(torch.tensor(lo, dtype=dtype)))
                if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
                    raise NumericalError(f"non-finite objective near {lam}")
                g[k] = (f_hi - f_lo) / (2.0 * h)
        return g
    raise ValueError(f"unknown gradient mode {mode!r}")


def _fp16_clamped(lam: np.ndarray) -> np.ndarray:
    return fp16_round(np.clip(lam, LAMBDA_MIN, LAMBDA_MAX))


def oml_minimize(
    objective: Objective,
    lam_init: np.ndarray,
    cfg: OMLConfig,
    dtype: torch.dtype = torch.float32,
) -> OMLResult:
    """Run the step-size-grid/halving descent on an arbitrary objective of lambda."""

    def evaluate(lam: np.ndarray) -> float:
        with torch.no_grad():
            return float(objective(torch.tensor(lam, dtype=dtype)))

    def gradient(lam: np.ndarray) -> np.ndarray:
        return grad_lambda(objective, lam, cfg.gradient_mode, cfg.fd_step, dtype)

    best_lam = _fp16_clamped(np.asarray(lam_init, dtype=np.float64))
    initial = evaluate(best_lam)
    if not np.isfinite(initial):
        raise NumericalError(f"non-finite distortion at the initial tradeoffs {best_lam}")
    best_d = initial
    trace = [TraceEntry(0, 0.0, best_lam.copy(), initial, True)]

    if cfg.iterations > 0:
        g = gradient(best_lam)
        gamma_star = cfg.gamma_grid[0]
        grid_best_d = np.inf
        grid_best_lam = None
        grid_entries = []
        for gamma in cfg.gamma_grid:
            cand = _fp16_clamped(best_lam - gamma * g)
            d = evaluate(cand)
            grid_entries.append(TraceEntry(1, gamma, cand, d, False))
            if np.isfinite(d) and d < grid_best_d:
                grid_best_d = d
                grid_best_lam = cand
                gamma_star = gamma
        if grid_best_lam is not None and grid_best_d < best_d:
            best_d = grid_best_d
            best_lam = grid_best_lam
            for e in grid_entries:
                if e.gamma == gamma_star:
                    e.accepted = True
                    break
        trace.extend(grid_entries)

        for it in range(2, cfg.iterations + 1):
            g = gradient(best_lam)
            used_gamma = gamma_star
            cand = _fp16_clamped(best_lam - used_gamma * g)
            d = evaluate(cand)
            accepted = bool(np.isfinite(d) and d < best_d)
            if accepted:
                best_d = d
                best_lam = cand
            else:
                gamma_star = used_gamma * 0.5
            trace.append(TraceEntry(it, used_gamma, cand, d, accepted))

    return OMLResult(
        best_lambda=best_lam,
        best_reconstruction=None,
        best_distortion=best_d,
        initial_distortion=initial,
        trace=trace,
    )


def oml_adapt_patch(
    x: torch.Tensor,
    z: torch.Tensor,
    decoder: Decoder,
    modulators: Modulators,
    lambda_t: float,
    cfg: OMLConfig,
    objective: Objective | None = None,
    k: int | None = None,
) -> OMLResult:
    """Adapt the per-layer tradeoffs for one patch; the latent z is never modified.

    When `objective` is given it replaces the decode-and-measure objective
    (surrogate hook for testing the heuristic without a model); x, z, decoder
    and modulators may then be None, with `k` giving the vector length.
    """
    use_model = objective is None
    if use_model:
        h, w = int(x.shape[-2]), int(x.shape[-1])
        z_f = z.detach().to(x.dtype)
        k = modulators.k

        def objective(lam_t: torch.Tensor) -> torch.Tensor:
            rec = conditional_decode(z_f, decoder, modulators, lam_t)
            return distortion(x, rec[..., :h, :w], cfg.metric)

        dtype = x.dtype
    else:
        if k is None:
            k = modulators.k if modulators is not None else 1
        dtype = torch.float64

    lam_init = np.full(k, float(lambda_t), dtype=np.float64)
    result = oml_minimize(objective, lam_init, cfg, dtype=dtype)

    if use_model:
        with torch.no_grad():
            rec = conditional_decode(
                z.detach().to(x.dtype),
                decoder,
                modulators,
                torch.tensor(result.best_lambda, dtype=x.dtype),
            )
        result = replace(result, best_reconstruction=rec[..., : x.shape[-2], : x.shape[-1]])
    return result
