"""Checkpoint format: a key-value text sidecar (model config, normaliser,
seeds, epoch counters, parameter manifest) next to a flat binary blob of
little-endian float64 values in parameter-registration order.

Identical training runs produce byte-identical checkpoints.
"""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from sim2real_cnp.formats import KVConfig, write_kv
from sim2real_cnp.model import ConvCNP, ModelConfig
from sim2real_cnp.train import Normalizer
from sim2real_cnp.util import ConfigurationError

FORMAT_VERSION = 1

_MODEL_BOOL_FIELDS = {"coordinate_channels", "film_enabled"}
_MODEL_INT_FIELDS = {
    "input_dim",
    "ppu",
    "unet_depth",
    "unet_channels",
    "n_aux_channels",
    "kernel_size",
    "n_bottleneck_convs",
    "n_head_convs",
}


def meta_path(path: Path | str) -> Path:
    return Path(str(path) + ".meta")


def model_config_to_kv(config: ModelConfig) -> dict[str, object]:
    return {f"model.{k}": v for k, v in asdict(config).items()}


def model_config_from_kv(cfg: KVConfig) -> ModelConfig:
    kwargs: dict[str, object] = {}
    for key, raw in cfg.entries.items():
        if not key.startswith("model."):
            continue
        name = key[len("model.") :]
        if name in _MODEL_BOOL_FIELDS:
            kwargs[name] = raw == "true"
        elif name in _MODEL_INT_FIELDS:
            kwargs[name] = int(raw)
        else:
            kwargs[name] = None if raw == "none" else float(raw)
    return ModelConfig(**kwargs)


def save_checkpoint(
    path: Path | str,
    model: ConvCNP,
    normalizer: Normalizer,
    meta: dict[str, object] | None = None,
) -> None:
    path = Path(path)
    entries: dict[str, object] = {"format_version": FORMAT_VERSION}
    entries.update(model_config_to_kv(model.config))
    for k, v in normalizer.to_dict().items():
        entries[f"normalizer.{k}"] = v
    for k, v in (meta or {}).items():
        entries[f"meta.{k}"] = v
    blobs = []
    for i, (name, p) in enumerate(model.named_parameters()):
        entries[f"param.{i}"] = f"{name}:{'x'.join(str(s) for s in p.shape)}"
        blobs.append(p.detach().to(torch.float64).numpy().astype("<f8").tobytes())
    write_kv(meta_path(path), entries)
    path.write_bytes(b"".join(blobs))


def load_checkpoint(
    path: Path | str, dtype: torch.dtype = torch.float32
) -> tuple[ConvCNP, Normalizer, dict[str, str]]:
    path = Path(path)
    cfg = KVConfig.load(meta_path(path))
    if cfg.int_("format_version") != FORMAT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint format {cfg.str_('format_version')}")
    config = model_config_from_kv(cfg)
    norm = Normalizer.from_dict(
        {k[len("normalizer.") :]: float(v) for k, v in cfg.entries.items() if k.startswith("normalizer.")}
    )
    model = ConvCNP(config, dtype=dtype)
    manifest = []
    i = 0
    while cfg.has(f"param.{i}"):
        name, _, shape_s = cfg.str_(f"param.{i}").partition(":")
        shape = tuple(int(s) for s in shape_s.split("x")) if shape_s else ()
        manifest.append((name, shape))
        i += 1
    raw = np.frombuffer(path.read_bytes(), dtype="<f8")
    params = dict(model.named_parameters())
    if set(params) != {name for name, _ in manifest}:
        raise ConfigurationError(f"checkpoint {path} does not match the reconstructed model")
    offset = 0
    with torch.no_grad():
        for name, shape in manifest:
            n = int(np.prod(shape)) if shape else 1
            chunk = raw[offset : offset + n].reshape(shape)
            params[name].copy_(torch.from_numpy(chunk.copy()).to(dtype))
            offset += n
    if offset != raw.size:
        raise ConfigurationError(f"checkpoint {path} has {raw.size - offset} trailing values")
    meta = {k[len("meta.") :]: v for k, v in cfg.entries.items() if k.startswith("meta.")}
    return model, norm, meta
