"""Command line entry points: base training, meta-training, encode, decode, eval.

Exit codes: 0 ok, 2 usage/config, 3 I/O or missing data, 4 format/checksum,
5 numerical failure. OMLC_SEED overrides configured seeds for reproducible CI
runs. Commands run single-threaded torch for cross-run determinism.
"""

from __future__ import annotations

import functools
import json
import os
import sys
import time
from pathlib import Path

import click
import torch

from . import bitstream, checkpoint, data as imgio
from .codec_core import CodecConfig, TrainConfig, train_base
from .config import load_config
from .errors import (
    CodecError,
    ConfigError,
    DataError,
    FormatError,
    NumericalError,
)
from .meta_training import MetaConfig, TaskGrid, init_meta, maml_meta_train
from .metrics import RDPoint, msssim, msssim_db, psnr, rd_report
from .online_adaptation import OMLConfig
from .pipeline import decode_container, encode_image

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_FORMAT = 4
EXIT_NUMERICAL = 5


def handled(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except FormatError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(EXIT_FORMAT)
        except NumericalError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(EXIT_NUMERICAL)
        except (DataError, OSError) as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(EXIT_IO)
        except (ConfigError, ValueError, CodecError) as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(EXIT_USAGE)

    return wrapper


def _seed_override(seed: int | None) -> int | None:
    env = os.environ.get("OMLC_SEED")
    if env is not None:
        return int(env)
    return seed


def _model_cfg(cfg: dict) -> CodecConfig:
    return CodecConfig(**cfg["model"])


@click.group()
def main():
    """Variable-rate learned image codec with online tradeoff adaptation."""
    torch.set_num_threads(1)


@main.command("train-base")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--lambda", "lam", type=float, default=None, help="RD tradeoff (default: first config lambda)")
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--steps", type=int, default=None)
@click.option("--seed", type=int, default=None)
@handled
def cmd_train_base(config_path, lam, data_dir, out_dir, steps, seed):
    """Train one base codec (encoder, plain decoder, entropy model) at one lambda."""
    cfg = load_config(config_path)
    lam = lam if lam is not None else float(cfg["lambdas"][0])
    tc = TrainConfig(**cfg["train"])
    if steps is not None:
        tc.steps = steps
    seed = _seed_override(seed)
    if seed is not None:
        tc.seed = seed
    images = imgio.load_image_dir(data_dir)
    base = train_base(images, lam, tc, _model_cfg(cfg))
    checksum = checkpoint.save_base(out_dir, base)
    click.echo(
        f"trained lambda={lam:g} steps={tc.steps} "
        f"val_rd {base.history['initial_val']['rd_loss']:.5f} -> "
        f"{base.history['final_val']['rd_loss']:.5f} checksum={checksum:#010x} out={out_dir}"
    )


@main.command("meta-train")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--lambdas", default=None, help="comma-separated task grid (default: base checkpoint lambdas)")
@click.option("--bases", required=True, help="comma-separated base checkpoint directories")
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--iters", type=int, default=None)
@click.option("--alpha", type=float, default=None, help="inner step size (0 = joint multi-task training)")
@click.option("--first-order/--exact", "first_order", default=True)
@click.option("--seed", type=int, default=None)
@handled
def cmd_meta_train(config_path, lambdas, bases, data_dir, out_dir, iters, alpha, first_order, seed):
    """Meta-train the shared conditional decoder and modulators over the task grid."""
    cfg = load_config(config_path)
    base_dirs = [p for p in bases.split(",") if p]
    base_models = sorted((checkpoint.load_base(d) for d in base_dirs), key=lambda b: b.lam)
    if lambdas is not None:
        lam_values = sorted(float(v) for v in lambdas.split(",") if v)
        if len(lam_values) != len(base_models):
            raise ValueError(
                f"{len(lam_values)} lambdas given for {len(base_models)} base checkpoints"
            )
        for b, lam in zip(base_models, lam_values):
            b.lam = lam
    mc = MetaConfig(**cfg["meta"])
    if iters is not None:
        mc.outer_iters = iters
    if alpha is not None:
        mc.inner_lr = alpha
    mc.first_order = first_order
    seed = _seed_override(seed)
    if seed is not None:
        mc.seed = seed

    meta = init_meta(base_models, seed=mc.seed)
    grid = TaskGrid(meta.lambdas, meta.encoders, meta.entropy_models)
    images = imgio.load_image_dir(data_dir)
    history = maml_meta_train(meta.decoder, meta.modulators, grid, images, mc)
    meta.history.update(history)
    meta.history.pop("checksum", None)
    checksum = checkpoint.save_meta(out_dir, meta)
    click.echo(
        f"meta-trained lambdas={meta.lambdas} iters={mc.outer_iters} "
        f"rd_mean {history['pre_rd_mean']:.5f} -> {history['post_rd_mean']:.5f} "
        f"checksum={checksum:#010x} out={out_dir}"
    )


def _parse_grid(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v)


@main.command("encode")
@click.argument("input_image", type=click.Path(exists=True, dir_okay=False))
@click.option("--model", "model_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.option("--lambda", "lam", type=float, default=None, help="target tradeoff (default: first model lambda)")
@click.option("--quality", type=int, default=None, help="model quality index (default: nearest to --lambda)")
@click.option("--oml-iters", type=int, default=None)
@click.option("--metric", type=click.Choice(["psnr", "msssim"]), default="psnr")
@click.option("--patch-size", type=int, default=512)
@click.option("--gamma-grid", default=None, help="comma-separated step sizes")
@click.option("--grad-mode", type=click.Choice(["autodiff", "finite_difference"]), default=None)
@click.option("--jobs", type=int, default=1)
@click.option("--adapt-boundary/--no-adapt-boundary", default=True)
@click.option("--dump-recon", type=click.Path(dir_okay=False), default=None,
              help="write the encoder-side best reconstruction image")
@click.option("--stats-json", type=click.Path(dir_okay=False), default=None)
@click.option("--seed", type=int, default=None)
@handled
def cmd_encode(input_image, model_dir, out_path, lam, quality, oml_iters, metric, patch_size,
               gamma_grid, grad_mode, jobs, adapt_boundary, dump_recon, stats_json, seed):
    """Encode an image to a .omlc container with per-patch online adaptation."""
    base = load_config(None)["oml"]
    meta = checkpoint.load_meta(model_dir)
    seed = _seed_override(seed)
    oml = OMLConfig(
        iterations=oml_iters if oml_iters is not None else base["iterations"],
        gamma_grid=_parse_grid(gamma_grid) if gamma_grid else tuple(base["gamma_grid"]),
        metric="mse" if metric == "psnr" else "msssim",
        gradient_mode=grad_mode or base["gradient_mode"],
        fd_step=base["fd_step"],
        seed=seed if seed is not None else base["seed"],
    )
    if lam is None:
        lam = meta.lambdas[quality] if quality is not None else meta.lambdas[0]

    img = imgio.load_image(input_image)
    result = encode_image(
        img, meta, lam, oml, patch_size=patch_size,
        adapt_boundary=adapt_boundary, quality=quality, jobs=jobs,
    )
    with open(out_path, "wb") as f:
        f.write(result.data)
    if dump_recon:
        imgio.save_image(result.reconstruction, dump_recon)
    if stats_json:
        with open(stats_json, "w", encoding="ascii") as f:
            json.dump(result.stats, f, indent=2)
            f.write("\n")
    click.echo("STATS " + json.dumps(result.stats))


@main.command("decode")
@click.argument("input_container", type=click.Path(exists=True, dir_okay=False))
@click.option("--model", "model_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@handled
def cmd_decode(input_container, model_dir, out_path):
    """Decode a .omlc container back to an image."""
    meta = checkpoint.load_meta(model_dir)
    with open(input_container, "rb") as f:
        payload = f.read()
    t0 = time.perf_counter()
    img = decode_container(payload, meta)
    imgio.save_image(img, out_path)
    click.echo(f"decoded {img.shape[-1]}x{img.shape[-2]} in {time.perf_counter() - t0:.3f}s -> {out_path}")


def _matched_stems(*dirs: Path) -> list[str]:
    stem_sets = []
    for d in dirs:
        if not d.is_dir():
            raise DataError(f"not a directory: {d}")
        stems = {p.stem for p in d.iterdir() if p.is_file()}
        if not stems:
            raise DataError(f"no files in {d}")
        stem_sets.append(stems)
    common = sorted(set.intersection(*stem_sets))
    if not common:
        raise DataError("no matching file stems across the given directories")
    return common


def _find_file(d: Path, stem: str, suffixes: tuple[str, ...]) -> Path:
    for s in suffixes:
        p = d / f"{stem}{s}"
        if p.exists():
            return p
    raise DataError(f"no {suffixes} file for {stem} in {d}")


@main.command("eval")
@click.option("--orig", "orig_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--recon", "recon_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--containers", "cont_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--model", "model_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--stats", "stats_dir", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--out", "out_csv", type=click.Path(dir_okay=False), required=True)
@click.option("--points-json", type=click.Path(dir_okay=False), default=None)
@handled
def cmd_eval(orig_dir, recon_dir, cont_dir, model_dir, stats_dir, out_csv, points_json):
    """Compute RD points over directories of (orig, recon, container) triples."""
    meta = checkpoint.load_meta(model_dir)
    orig_dir, recon_dir, cont_dir = Path(orig_dir), Path(recon_dir), Path(cont_dir)
    stems = _matched_stems(orig_dir, recon_dir, cont_dir)
    points = []
    for stem in stems:
        x = imgio.load_image(_find_file(orig_dir, stem, (".png", ".ppm")))
        x_hat = imgio.load_image(_find_file(recon_dir, stem, (".png", ".ppm")))
        with open(_find_file(cont_dir, stem, (".omlc",)), "rb") as f:
            cont = f.read()
        container = bitstream.read_container(cont, expected_checksum=checkpoint.meta_checksum(meta))
        breakdown = bitstream.bpp(container)
        ms = float(msssim(x, x_hat))
        oml_iters, encode_time = 0, 0.0
        if stats_dir is not None:
            sp = Path(stats_dir) / f"{stem}.json"
            if sp.exists():
                with open(sp, encoding="ascii") as f:
                    s = json.load(f)
                oml_iters = int(s.get("oml_iters", 0))
                encode_time = float(s.get("wall_time", 0.0))
        points.append(
            RDPoint(
                lam=meta.lambdas[container.quality_index],
                bpp=breakdown.total,
                psnr=psnr(x, x_hat),
                msssim=ms,
                msssim_db=msssim_db(ms),
                oml_iters=oml_iters,
                encode_time=encode_time,
            )
        )
        click.echo(f"{stem}: bpp={breakdown.total:.6g} psnr={points[-1].psnr:.6g} msssim={ms:.6g}")
    rd_report(points, out_csv)
    if points_json:
        with open(points_json, "w", encoding="ascii") as f:
            json.dump([vars(p) for p in points], f, indent=2)
            f.write("\n")
    click.echo(f"wrote {len(points)} RD points to {out_csv}")


@main.command("rd-report")
@click.option("--points", "points_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "out_csv", type=click.Path(dir_okay=False), required=True)
@handled
def cmd_rd_report(points_path, out_csv):
    """Serialize a JSON list of RD points to the normative CSV."""
    with open(points_path, encoding="ascii") as f:
        raw = json.load(f)
    if not isinstance(raw, list) or not raw:
        raise DataError(f"no RD points in {points_path}")
    points = [RDPoint(**p) for p in raw]
    rd_report(points, out_csv)
    click.echo(f"wrote {len(points)} RD points to {out_csv}")


if __name__ == "__main__":
    main()
