"""Residual adapter blocks, freezing masks, and the exportable adapter bundle.

An adapter is LayerNorm -> down-projection -> ReLU -> up-projection with a
residual connection, injected after an encoder layer. Training a model
"with adapters" means freezing every base parameter and updating only
these blocks; the result ships as a small bundle tied to its base model
by checksum.
"""

from __future__ import annotations

import fnmatch
import io
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import binio
from .autodiff import Tensor
from .errors import CompatibilityError, ContractError, FormatError
from .model import ParamStore, TransducerModel, group_of

BUNDLE_MAGIC = b"XDAB"
BUNDLE_VERSION = 1
ADAPTER_TENSORS = ("ln_scale", "ln_bias", "w_down", "b_down", "w_up", "b_up")


def adapter_param_count(d_i: int, d_b: int) -> int:
    """Closed form: LayerNorm 2*d_i, down d_i*d_b + d_b, up d_b*d_i + d_i."""
    return 2 * d_i * d_b + 3 * d_i + d_b


@dataclass
class AdapterConfig:
    d_b: int = 8
    init_std: float = 1e-3
    layers: tuple[int, ...] | None = None  # None = every encoder layer

    def __post_init__(self):
        if self.d_b < 1:
            raise ContractError(f"d_b must be >= 1, got {self.d_b}")
        if self.layers is not None:
            self.layers = tuple(self.layers)
            if not self.layers:
                raise ContractError("adapter layer list must be non-empty")

    def resolve_layers(self, num_encoder_layers: int) -> tuple[int, ...]:
        layers = self.layers if self.layers is not None else tuple(range(num_encoder_layers))
        bad = [i for i in layers if not 0 <= i < num_encoder_layers]
        if bad:
            raise ContractError(f"adapter layer indices {bad} outside "
                                f"0..{num_encoder_layers - 1}")
        return layers


class ResidualAdapter:
    """x + W_up^T relu(W_down^T LN(x) + b_down) + b_up, per frame."""

    def __init__(self, store: ParamStore, rng, prefix: str, d_i: int, d_b: int,
                 init_std: float, eps: float):
        self.d_i, self.d_b, self.eps = d_i, d_b, eps

        def draw(shape):
            return rng.normal(0.0, init_std, size=shape)

        self.ln_scale = store.register(f"{prefix}.ln_scale", draw((d_i,)))
        self.ln_bias = store.register(f"{prefix}.ln_bias", draw((d_i,)))
        self.w_down = store.register(f"{prefix}.w_down", draw((d_i, d_b)))
        self.b_down = store.register(f"{prefix}.b_down", draw((d_b,)))
        self.w_up = store.register(f"{prefix}.w_up", draw((d_b, d_i)))
        self.b_up = store.register(f"{prefix}.b_up", draw((d_i,)))

    def forward(self, x: Tensor) -> Tensor:
        h = ad.layer_norm(x, self.ln_scale, self.ln_bias, self.eps)
        h = ad.relu(ad.matmul(h, self.w_down) + self.b_down)
        return x + (ad.matmul(h, self.w_up) + self.b_up)

    def tensors(self) -> list[Tensor]:
        return [getattr(self, name) for name in ADAPTER_TENSORS]


def inject(model: TransducerModel, cfg: AdapterConfig, seed: int) -> TransducerModel:
    """Add freshly initialized adapters; base tensors stay bit-identical."""
    layers = cfg.resolve_layers(model.config.num_encoder_layers)
    already = [i for i in layers if i in model.adapters]
    if already:
        raise ContractError(f"layers {already} already carry adapters")
    rng = np.random.default_rng(seed)
    for i in layers:
        model.adapters[i] = ResidualAdapter(
            model.store, rng, f"encoder.adapter.{i}", model.config.d_model,
            cfg.d_b, cfg.init_std, model.config.layer_norm_eps)
    model.adapter_config = cfg
    return model


# ---------------------------------------------------------------------------
# freezing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainableMask:
    """Which parameter groups the optimizer may touch; patterns use fnmatch."""

    groups: tuple[str, ...]

    def resolve(self, model: TransducerModel) -> set[str]:
        existing = set(model.store.groups())
        out: set[str] = set()
        for pattern in self.groups:
            if any(ch in pattern for ch in "*?["):
                out.update(g for g in existing if fnmatch.fnmatch(g, pattern))
            elif pattern in existing:
                out.add(pattern)
            else:
                raise ContractError(f"unknown parameter group {pattern!r}")
        if not out:
            raise ContractError(f"mask {self.groups} selects nothing to train")
        return out


ADAPTERS_ONLY = TrainableMask(("encoder.adapter.*",))


def mask_for_mode(model: TransducerModel, mode: str) -> TrainableMask:
    """The adaptation styles compared in the experiments, as masks."""
    if mode == "adapters":
        return ADAPTERS_ONLY
    enc_layers = sorted(g for g in model.store.groups() if g.startswith("encoder.layer."))
    front = [g for g in model.store.groups() if g == "encoder.frontend"]
    if mode == "finetune-enc":
        return TrainableMask(tuple(enc_layers + front))
    if mode == "finetune-layer1":
        return TrainableMask(("encoder.layer.0",))
    if mode == "finetune-layers1-3":
        return TrainableMask(tuple(enc_layers[:3]))
    raise ContractError(f"unknown adaptation mode {mode!r}")


def apply_mask(model: TransducerModel, mask: TrainableMask) -> list[Tensor]:
    """Mark exactly the masked groups trainable; returns their tensors."""
    resolved = mask.resolve(model)
    trainable = []
    for name, tensor in model.named_parameters():
        tensor.requires_grad = group_of(name) in resolved
        if tensor.requires_grad:
            trainable.append(tensor)
    return trainable


# ---------------------------------------------------------------------------
# adapter bundles
# ---------------------------------------------------------------------------


def base_payload_checksum(model: TransducerModel) -> int:
    """FNV-1a over the f32 payload of every non-adapter parameter."""
    h = binio.FNV_OFFSET
    for name, tensor in model.named_parameters():
        if not group_of(name).startswith("encoder.adapter."):
            h = binio.fnv1a64(binio.f32_payload(tensor.data), h)
    return h


def export_bundle(model: TransducerModel) -> bytes:
    """Serialize only the adapter weights plus compatibility metadata."""
    if not model.adapters:
        raise ContractError("model has no adapters to export")
    buf = io.BytesIO()
    buf.write(BUNDLE_MAGIC)
    binio.write_u32(buf, BUNDLE_VERSION)
    binio.write_u64(buf, base_payload_checksum(model))
    binio.write_str(buf, model.config.encoder_kind)
    binio.write_u32(buf, len(model.adapters))
    payload_hash = binio.FNV_OFFSET
    for i in sorted(model.adapters):
        adapter = model.adapters[i]
        binio.write_u32(buf, i)
        binio.write_u32(buf, adapter.d_i)
        binio.write_u32(buf, adapter.d_b)
        for tensor in adapter.tensors():
            raw = binio.f32_payload(tensor.data)
            payload_hash = binio.fnv1a64(raw, payload_hash)
            buf.write(raw)
    binio.write_u64(buf, payload_hash)
    return buf.getvalue()


def import_bundle(model: TransducerModel, data: bytes) -> None:
    """Load adapter weights into a base model whose checksum matches.

    A fresh base model gains adapters; a model that already has adapters
    with the same geometry is overwritten in place.
    """
    buf = io.BytesIO(data)
    binio.expect_magic(buf, BUNDLE_MAGIC, "adapter bundle")
    version = binio.read_u32(buf)
    if version != BUNDLE_VERSION:
        raise FormatError(f"unsupported bundle version {version}")
    want_checksum = binio.read_u64(buf)
    have_checksum = base_payload_checksum(model)
    if want_checksum != have_checksum:
        raise CompatibilityError(
            f"bundle was trained against base {want_checksum:016x}, "
            f"this model is {have_checksum:016x}")
    kind = binio.read_str(buf)
    if kind != model.config.encoder_kind:
        raise CompatibilityError(f"bundle encoder kind {kind!r} != model "
                                 f"{model.config.encoder_kind!r}")
    n_layers = binio.read_u32(buf)
    entries = []
    payload_hash = binio.FNV_OFFSET
    for _ in range(n_layers):
        layer = binio.read_u32(buf)
        d_i = binio.read_u32(buf)
        d_b = binio.read_u32(buf)
        shapes = [(d_i,), (d_i,), (d_i, d_b), (d_b,), (d_b, d_i), (d_i,)]
        arrays = []
        for shape in shapes:
            raw = binio.read_exact(buf, 4 * int(np.prod(shape)))
            payload_hash = binio.fnv1a64(raw, payload_hash)
            arrays.append(np.frombuffer(raw, dtype="<f4").reshape(shape))
        entries.append((layer, d_i, d_b, arrays))
    if binio.read_u64(buf) != payload_hash:
        raise FormatError("bundle payload checksum mismatch (corrupt or truncated)")

    layers = tuple(e[0] for e in entries)
    d_b = entries[0][2]
    if model.adapters:
        if sorted(model.adapters) != sorted(layers) or any(
                model.adapters[l].d_b != db for l, _, db, _ in entries):
            raise ContractError("existing adapters do not match bundle geometry")
    else:
        inject(model, AdapterConfig(d_b=d_b, layers=layers), seed=0)
    for layer, d_i, _, arrays in entries:
        adapter = model.adapters[layer]
        if adapter.d_i != d_i:
            raise CompatibilityError(f"adapter width {d_i} != encoder width {adapter.d_i}")
        for tensor, arr in zip(adapter.tensors(), arrays):
            tensor.data = arr.astype(model.config.np_dtype)
