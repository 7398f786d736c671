"""MAML-style meta-training of the conditional decoder and modulators.

The inner loop adapts the modulator parameters only; the decoder receives the
standard outer gradient of the post-adaptation objective. Encoders and entropy
models stay frozen per task. The generic inner/outer machinery operates on
plain dicts of tensors so the same code path is exercised by analytic toy
objectives in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .codec_core import (
    CodecConfig,
    Decoder,
    Encoder,
    LogisticEntropyModel,
    quantize,
    sample_crops,
)
from .errors import DataError, NumericalError
from .modulation import Modulators, all_scales

LossFn = Callable[[dict[str, torch.Tensor]], torch.Tensor]


@dataclass
class MetaConfig:
    inner_lr: float = 1e-3
    inner_steps: int = 1
    outer_lr: float = 1e-4
    outer_iters: int = 500
    batch_size: int = 4
    crop: int = 64
    first_order: bool = True
    quant_mode: str = "round"  # "noise" kept for ablation
    clip_norm: float = 1.0  # outer gradient norm clip; 0 disables
    seed: int = 0
    log_every: int = 0

    def __post_init__(self):
        if self.inner_lr < 0 or self.outer_lr <= 0:
            raise ValueError("step sizes must be positive (inner_lr may be 0 for joint training)")
        if self.inner_steps < 1 or self.outer_iters < 1 or self.batch_size < 1:
            raise ValueError("counts must be >= 1")
        if self.clip_norm < 0:
            raise ValueError("clip_norm must be >= 0")


@dataclass
class TaskGrid:
    """Ordered tradeoffs with their frozen per-quality encoders and entropy models."""

    lambdas: list[float]
    encoders: list[Encoder]
    entropy_models: list[LogisticEntropyModel]

    def __post_init__(self):
        if len(self.lambdas) < 2:
            raise ValueError("a task grid needs at least 2 tradeoffs")
        if any(b <= a for a, b in zip(self.lambdas, self.lambdas[1:])):
            raise ValueError("grid lambdas must be strictly increasing")
        if not len(self.lambdas) == len(self.encoders) == len(self.entropy_models):
            raise ValueError("lambdas, encoders and entropy models must align")
        for module in (*self.encoders, *self.entropy_models):
            module.requires_grad_(False)


@dataclass
class MetaCodec:
    """A meta-trained variable-rate codec (shared decoder, per-quality encoders)."""

    cfg: CodecConfig
    lambdas: list[float]
    encoders: list[Encoder]
    entropy_models: list[LogisticEntropyModel]
    decoder: Decoder
    modulators: Modulators
    history: dict = field(default_factory=dict)

    def nearest_quality(self, lam: float) -> int:
        return int(np.argmin([abs(np.log(lam) - np.log(g)) for g in self.lambdas]))


class DivergenceGuard:
    """Aborts when the loss stays above factor x initial for `patience` iterations."""

    def __init__(self, factor: float = 10.0, patience: int = 100):
        self.factor = factor
        self.patience = patience
        self.initial: float | None = None
        self.streak = 0

    def update(self, loss: float) -> None:
        if self.initial is None:
            self.initial = loss
        self.streak = self.streak + 1 if loss > self.factor * self.initial else 0
        if self.streak >= self.patience:
            raise NumericalError(
                f"training diverged: loss {loss:.4g} > {self.factor:g}x initial "
                f"{self.initial:.4g} for {self.patience} consecutive iterations"
            )


def init_meta(bases: list, seed: int = 0) -> MetaCodec:
    """Assemble an untrained MetaCodec from per-quality base codecs.

    Bases are sorted by lambda; the shared decoder starts from the highest
    quality base's decoder and the modulators at the identity.
    """
    import copy

    if len(bases) < 2:
        raise ValueError("need at least 2 base codecs")
    bases = sorted(bases, key=lambda b: b.lam)
    cfg = bases[0].cfg
    for b in bases:
        b.encoder.requires_grad_(False)
        b.entropy_model.requires_grad_(False)
    decoder = copy.deepcopy(bases[-1].decoder)
    decoder.requires_grad_(True)
    modulators = Modulators(cfg.decoder_channel_counts, hidden=cfg.modulator_hidden, seed=seed)
    return MetaCodec(
        cfg=cfg,
        lambdas=[b.lam for b in bases],
        encoders=[b.encoder for b in bases],
        entropy_models=[b.entropy_model for b in bases],
        decoder=decoder,
        modulators=modulators,
    )


def sample_task_batch(
    grid: TaskGrid,
    dataset: list[torch.Tensor],
    batch: int,
    crop: int,
    rng: np.random.Generator,
) -> list[torch.Tensor]:
    """One seeded random crop minibatch per task."""
    if not dataset:
        raise DataError("empty dataset")
    if batch < 1:
        raise ValueError("batch must be >= 1")
    return [sample_crops(dataset, batch, crop, rng) for _ in grid.lambdas]


def inner_adapt(
    params: dict[str, torch.Tensor],
    loss_fn: LossFn,
    alpha: float,
    steps: int = 1,
    create_graph: bool = False,
) -> dict[str, torch.Tensor]:
    """Gradient-descent adaptation of a parameter dict on one task loss.

    With create_graph=True the adapted parameters stay differentiable with
    respect to the originals (exact MAML); otherwise the inner gradients are
    treated as constants (first-order MAML).
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    current = dict(params)
    for step in range(steps):
        loss = loss_fn(current)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite inner loss at step {step}: {loss.item()}")
        names = list(current)
        grads = torch.autograd.grad(
            loss, [current[n] for n in names], create_graph=create_graph, allow_unused=True
        )
        for n, g in zip(names, grads):
            if g is None:
                continue
            if not torch.all(torch.isfinite(g)):
                raise NumericalError(f"non-finite inner gradient for {n} at step {step}")
            current[n] = current[n] - alpha * g
    return current


def meta_outer_loss(
    params: dict[str, torch.Tensor],
    inner_loss_fns: list[LossFn],
    outer_loss_fns: list[LossFn],
    alpha: float,
    inner_steps: int = 1,
    first_order: bool = True,
) -> torch.Tensor:
    """Sum over tasks of the loss at the inner-adapted parameters."""
    total = None
    for inner_fn, outer_fn in zip(inner_loss_fns, outer_loss_fns):
        adapted = inner_adapt(params, inner_fn, alpha, inner_steps, create_graph=not first_order)
        term = outer_fn(adapted)
        total = term if total is None else total + term
    return total


def task_rd_loss(
    batch: torch.Tensor,
    encoder: Encoder,
    em: LogisticEntropyModel,
    decoder: Decoder,
    modulators: Modulators,
    psi_params: dict[str, torch.Tensor],
    lam: float,
    quant_mode: str = "round",
    noise_gen: torch.Generator | None = None,
) -> torch.Tensor:
    """RD loss of one task minibatch; gradient flows to decoder and modulators only."""
    with torch.no_grad():
        y = encoder(batch)
        z = quantize(y, quant_mode, generator=noise_gen)
        rate_bits = em.bits(z).item()
    lam_vec = torch.full((modulators.k,), float(lam), dtype=batch.dtype)
    scales = all_scales(modulators, lam_vec, psi_params)
    x_hat = decoder(z, scales=scales)
    mse = torch.mean((batch - x_hat) ** 2)
    num_px = batch.shape[0] * batch.shape[-2] * batch.shape[-1]
    return lam * mse + rate_bits / num_px


def eval_grid(
    grid: TaskGrid,
    decoder: Decoder,
    modulators: Modulators,
    images: list[torch.Tensor],
    crop: int,
) -> list[dict]:
    """Held-out per-task MSE/bpp/RD with hard quantization, lambda^k = lambda_j."""
    out = []
    with torch.no_grad():
        for j, lam in enumerate(grid.lambdas):
            mses, bpps = [], []
            for img in images:
                h, w = img.shape[-2], img.shape[-1]
                top, left = (h - crop) // 2, (w - crop) // 2
                x = img[:, top : top + crop, left : left + crop].unsqueeze(0)
                z = quantize(grid.encoders[j](x), "round")
                lam_vec = torch.full((modulators.k,), lam, dtype=x.dtype)
                x_hat = decoder(z, scales=all_scales(modulators, lam_vec))
                mses.append(torch.mean((x - x_hat) ** 2).item())
                bpps.append(grid.entropy_models[j].bits(z).item() / (crop * crop))
            mse, bpp = float(np.mean(mses)), float(np.mean(bpps))
            out.append({"lambda": lam, "mse": mse, "bpp": bpp, "rd_loss": lam * mse + bpp})
    return out


def maml_meta_train(
    decoder: Decoder,
    modulators: Modulators,
    grid: TaskGrid,
    dataset: list[torch.Tensor],
    cfg: MetaConfig,
) -> dict:
    """Meta-train (decoder, modulators) over the task grid; returns history.

    The decoder and modulators are updated in place. Aborts when the outer
    loss exceeds 10x its initial value for 100 consecutive iterations.
    """
    if not dataset:
        raise DataError("empty dataset")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    noise_gen = torch.Generator().manual_seed(cfg.seed + 1) if cfg.quant_mode == "noise" else None

    holdout = dataset[::8] or dataset[:1]
    pre_eval = eval_grid(grid, decoder, modulators, holdout, cfg.crop)

    psi = modulators.params
    trainable = list(decoder.parameters()) + modulators.trainable_tensors()
    opt = torch.optim.Adam(trainable, lr=cfg.outer_lr)

    guard = DivergenceGuard()
    last_loss = float("nan")
    for it in range(cfg.outer_iters):
        inner_batches = sample_task_batch(grid, dataset, cfg.batch_size, cfg.crop, rng)
        outer_batches = sample_task_batch(grid, dataset, cfg.batch_size, cfg.crop, rng)

        def make_loss(j: int, batch: torch.Tensor) -> LossFn:
            return lambda p: task_rd_loss(
                batch,
                grid.encoders[j],
                grid.entropy_models[j],
                decoder,
                modulators,
                p,
                grid.lambdas[j],
                cfg.quant_mode,
                noise_gen,
            )

        inner_fns = [make_loss(j, inner_batches[j]) for j in range(len(grid.lambdas))]
        outer_fns = [make_loss(j, outer_batches[j]) for j in range(len(grid.lambdas))]
        total = meta_outer_loss(psi, inner_fns, outer_fns, cfg.inner_lr, cfg.inner_steps, cfg.first_order)
        if not torch.isfinite(total):
            raise NumericalError(f"non-finite outer loss at iteration {it}: {total.item()}")
        opt.zero_grad()
        total.backward()
        if cfg.clip_norm > 0:
            torch.nn.utils.clip_grad_norm_(trainable, cfg.clip_norm)
        opt.step()

        last_loss = total.item()
        guard.update(last_loss)
        if cfg.log_every and (it + 1) % cfg.log_every == 0:
            print(f"meta iter {it + 1}/{cfg.outer_iters} loss {last_loss:.5f}")

    post_eval = eval_grid(grid, decoder, modulators, holdout, cfg.crop)
    return {
        "pre_eval": pre_eval,
        "post_eval": post_eval,
        "pre_rd_mean": float(np.mean([e["rd_loss"] for e in pre_eval])),
        "post_rd_mean": float(np.mean([e["rd_loss"] for e in post_eval])),
        "final_outer_loss": last_loss,
    }
