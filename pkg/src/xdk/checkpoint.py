"""Binary model checkpoints.

Layout: magic ``XDKT``, u32 version, JSON config block (model config plus
adapter geometry when present), u32 parameter count, then per parameter a
name, shape, and f32 little-endian payload, closed by a u64 FNV-1a
checksum over all payload bytes.
"""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np

from . import binio
from .adapters import AdapterConfig, inject
from .errors import FormatError
from .model import ModelConfig, TransducerModel, group_of

CKPT_MAGIC = b"XDKT"
CKPT_VERSION = 1


def dumps_checkpoint(model: TransducerModel) -> bytes:
    config = model.config.to_dict()
    if model.adapter_config is not None:
        config["adapters"] = {
            "d_b": model.adapter_config.d_b,
            "init_std": model.adapter_config.init_std,
            "layers": sorted(model.adapters),
        }
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    binio.write_u32(buf, CKPT_VERSION)
    binio.write_str(buf, json.dumps(config, sort_keys=True))
    binio.write_u32(buf, len(model.store.by_name))
    payload_hash = binio.FNV_OFFSET
    for name, tensor in model.named_parameters():
        binio.write_str(buf, name)
        binio.write_u32(buf, tensor.data.ndim)
        for dim in tensor.data.shape:
            binio.write_u32(buf, dim)
        raw = binio.f32_payload(tensor.data)
        payload_hash = binio.fnv1a64(raw, payload_hash)
        buf.write(raw)
    binio.write_u64(buf, payload_hash)
    return buf.getvalue()


def loads_checkpoint(data: bytes, dtype: str | None = None) -> TransducerModel:
    buf = io.BytesIO(data)
    binio.expect_magic(buf, CKPT_MAGIC, "checkpoint")
    version = binio.read_u32(buf)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    config = json.loads(binio.read_str(buf))
    adapter_block = config.pop("adapters", None)
    if dtype is not None:
        config["dtype"] = dtype
    model = TransducerModel(ModelConfig(**config), seed=0)
    if adapter_block is not None:
        inject(model, AdapterConfig(d_b=adapter_block["d_b"],
                                    init_std=adapter_block["init_std"],
                                    layers=tuple(adapter_block["layers"])), seed=0)
    n_params = binio.read_u32(buf)
    if n_params != len(model.store.by_name):
        raise FormatError(f"checkpoint has {n_params} parameters, model expects "
                          f"{len(model.store.by_name)}")
    payload_hash = binio.FNV_OFFSET
    for _ in range(n_params):
        name = binio.read_str(buf)
        ndim = binio.read_u32(buf)
        shape = tuple(binio.read_u32(buf) for _ in range(ndim))
        tensor = model.store.by_name.get(name)
        if tensor is None:
            raise FormatError(f"checkpoint parameter {name!r} unknown to the model")
        if tensor.data.shape != shape:
            raise FormatError(f"{name}: checkpoint shape {shape} != model {tensor.data.shape}")
        raw = binio.read_exact(buf, 4 * int(np.prod(shape, dtype=np.int64)))
        payload_hash = binio.fnv1a64(raw, payload_hash)
        tensor.data = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(model.config.np_dtype)
    if binio.read_u64(buf) != payload_hash:
        raise FormatError("checkpoint payload checksum mismatch (corrupt or truncated)")
    return model


def save_checkpoint(model: TransducerModel, path: str | Path) -> int:
    """Write the full parameter set; returns the payload checksum."""
    data = dumps_checkpoint(model)
    Path(path).write_bytes(data)
    return int.from_bytes(data[-8:], "little")


def load_checkpoint(path: str | Path, dtype: str | None = None) -> TransducerModel:
    """Rebuild a model (and its adapters, if any) from a checkpoint file."""
    return loads_checkpoint(Path(path).read_bytes(), dtype=dtype)


def group_payload_bytes(model: TransducerModel, group_prefixes: tuple[str, ...]) -> bytes:
    """Concatenated f32 payloads of all parameters under the given prefixes.

    Byte-compare two snapshots of this to prove a freeze held exactly.
    """
    out = bytearray()
    for name, tensor in model.named_parameters():
        if group_of(name).startswith(group_prefixes):
            out += binio.f32_payload(tensor.data)
    return bytes(out)
