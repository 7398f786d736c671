"""Model checkpoints: one directory per quality level (or meta grid).

A checkpoint directory holds params.npz plus manifest.json with the model
dimensions, the training tradeoff(s) and a CRC-32 checksum over the parameter
bytes. Meta checkpoints are self-contained: they embed the shared decoder and
modulators together with every per-quality encoder and entropy model.
"""

from __future__ import annotations

import json
import zlib
from pathlib import Path

import numpy as np
import torch

from .codec_core import BaseCodec, CodecConfig, Decoder, Encoder, LogisticEntropyModel, DOWNSAMPLE
from .errors import ChecksumMismatchError, FormatError
from .meta_training import MetaCodec
from .modulation import Modulators

MANIFEST_NAME = "manifest.json"
PARAMS_NAME = "params.npz"
FORMAT_NAME = "omlc-checkpoint"


def compute_checksum(arrays: dict[str, np.ndarray]) -> int:
    """CRC-32 over names, shapes, dtypes and raw bytes in sorted key order."""
    crc = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        crc = zlib.crc32(name.encode("utf-8"), crc)
        crc = zlib.crc32(f"{arr.dtype.str}{arr.shape}".encode("ascii"), crc)
        crc = zlib.crc32(arr.tobytes(), crc)
    return crc & 0xFFFFFFFF


def _module_arrays(module: torch.nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.{name}": value.detach().cpu().numpy().astype(np.float32)
        for name, value in module.state_dict().items()
    }


def _load_module(module: torch.nn.Module, arrays: dict[str, np.ndarray], prefix: str) -> None:
    state = {}
    for name in module.state_dict():
        key = f"{prefix}.{name}"
        if key not in arrays:
            raise FormatError(f"checkpoint is missing parameter {key}")
        state[name] = torch.from_numpy(arrays[key].copy())
    module.load_state_dict(state)


def _cfg_manifest(cfg: CodecConfig) -> dict:
    return {
        "hidden_channels": cfg.hidden_channels,
        "latent_channels": cfg.latent_channels,
        "num_blocks": cfg.num_blocks,
        "modulator_hidden": cfg.modulator_hidden,
        "kernel_size": cfg.kernel_size,
        "leaky_slope": cfg.leaky_slope,
        "symbol_min": cfg.symbol_min,
        "symbol_max": cfg.symbol_max,
        "downsample": DOWNSAMPLE,
    }


def _cfg_from_manifest(m: dict) -> CodecConfig:
    return CodecConfig(
        hidden_channels=m["hidden_channels"],
        latent_channels=m["latent_channels"],
        num_blocks=m["num_blocks"],
        modulator_hidden=m["modulator_hidden"],
        kernel_size=m["kernel_size"],
        leaky_slope=m["leaky_slope"],
        symbol_min=m["symbol_min"],
        symbol_max=m["symbol_max"],
    )


def _write(dirpath: Path, manifest: dict, arrays: dict[str, np.ndarray]) -> None:
    dirpath.mkdir(parents=True, exist_ok=True)
    np.savez(dirpath / PARAMS_NAME, **arrays)
    with open(dirpath / MANIFEST_NAME, "w", encoding="ascii") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _read(dirpath: Path) -> tuple[dict, dict[str, np.ndarray]]:
    manifest_path = dirpath / MANIFEST_NAME
    if not manifest_path.exists():
        raise FormatError(f"no checkpoint manifest in {dirpath}")
    with open(manifest_path, encoding="ascii") as f:
        manifest = json.load(f)
    if manifest.get("format") != FORMAT_NAME:
        raise FormatError(f"unexpected checkpoint format {manifest.get('format')!r}")
    with np.load(dirpath / PARAMS_NAME) as npz:
        arrays = {name: npz[name] for name in npz.files}
    checksum = compute_checksum(arrays)
    if checksum != manifest["checksum"]:
        raise ChecksumMismatchError(
            f"parameter checksum {checksum:#010x} does not match manifest "
            f"{manifest['checksum']:#010x}"
        )
    return manifest, arrays


def save_base(dirpath, base: BaseCodec) -> int:
    dirpath = Path(dirpath)
    arrays = {}
    arrays.update(_module_arrays(base.encoder, "encoder"))
    arrays.update(_module_arrays(base.decoder, "decoder"))
    arrays.update(_module_arrays(base.entropy_model, "em"))
    checksum = compute_checksum(arrays)
    manifest = {
        "format": FORMAT_NAME,
        "meta": False,
        "lambda": base.lam,
        "checksum": checksum,
        **_cfg_manifest(base.cfg),
    }
    _write(dirpath, manifest, arrays)
    return checksum


def load_base(dirpath) -> BaseCodec:
    manifest, arrays = _read(Path(dirpath))
    if manifest["meta"]:
        raise FormatError("expected a base checkpoint, found a meta checkpoint")
    cfg = _cfg_from_manifest(manifest)
    encoder, decoder, em = Encoder(cfg), Decoder(cfg), LogisticEntropyModel(cfg.latent_channels)
    _load_module(encoder, arrays, "encoder")
    _load_module(decoder, arrays, "decoder")
    _load_module(em, arrays, "em")
    return BaseCodec(
        cfg=cfg,
        lam=manifest["lambda"],
        encoder=encoder,
        decoder=decoder,
        entropy_model=em,
        history={"checksum": manifest["checksum"]},
    )


def meta_arrays(meta: MetaCodec) -> dict[str, np.ndarray]:
    arrays = {}
    arrays.update(_module_arrays(meta.decoder, "decoder"))
    for name, tensor in meta.modulators.params.items():
        arrays[f"mod.{name}"] = tensor.detach().cpu().numpy().astype(np.float32)
    for j, (enc, em) in enumerate(zip(meta.encoders, meta.entropy_models)):
        arrays.update(_module_arrays(enc, f"q{j}.encoder"))
        arrays.update(_module_arrays(em, f"q{j}.em"))
    return arrays


def meta_checksum(meta: MetaCodec) -> int:
    """Checksum of the meta model's parameter bytes (cached on the instance)."""
    cached = meta.history.get("checksum")
    if cached is None:
        cached = compute_checksum(meta_arrays(meta))
        meta.history["checksum"] = cached
    return cached


def save_meta(dirpath, meta: MetaCodec) -> int:
    dirpath = Path(dirpath)
    arrays = meta_arrays(meta)
    checksum = compute_checksum(arrays)
    manifest = {
        "format": FORMAT_NAME,
        "meta": True,
        "lambdas": list(meta.lambdas),
        "checksum": checksum,
        **_cfg_manifest(meta.cfg),
    }
    _write(dirpath, manifest, arrays)
    return checksum


def load_meta(dirpath) -> MetaCodec:
    manifest, arrays = _read(Path(dirpath))
    if not manifest["meta"]:
        raise FormatError("expected a meta checkpoint, found a base checkpoint")
    cfg = _cfg_from_manifest(manifest)
    lambdas = [float(v) for v in manifest["lambdas"]]
    decoder = Decoder(cfg)
    _load_module(decoder, arrays, "decoder")
    modulators = Modulators(cfg.decoder_channel_counts, hidden=cfg.modulator_hidden)
    modulators.load_params(
        {name: torch.from_numpy(arrays[f"mod.{name}"].copy()) for name in modulators.params}
    )
    encoders, ems = [], []
    for j in range(len(lambdas)):
        enc = Encoder(cfg)
        em = LogisticEntropyModel(cfg.latent_channels)
        _load_module(enc, arrays, f"q{j}.encoder")
        _load_module(em, arrays, f"q{j}.em")
        enc.requires_grad_(False)
        em.requires_grad_(False)
        encoders.append(enc)
        ems.append(em)
    return MetaCodec(
        cfg=cfg,
        lambdas=lambdas,
        encoders=encoders,
        entropy_models=ems,
        decoder=decoder,
        modulators=modulators,
        history={"checksum": manifest["checksum"]},
    )
