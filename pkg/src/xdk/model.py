"""Sequence-transducer model: encoder stack, prediction network, additive joint.

Two encoder flavours share everything else: a stack of unidirectional
LSTM layers, or a stack of causal pre-norm Transformer layers behind a
linear frontend with learned positions. Every trainable tensor is
registered under exactly one named group (``encoder.layer.i``,
``encoder.adapter.i``, ``encoder.frontend``, ``prediction``, ``joint``)
so freezing and parameter accounting stay byte-exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError
from .rnnt_loss import transducer_loss

ENCODER_KINDS = ("lstm", "transformer")
ADAPTER_POSITIONS = ("after_ffn", "after_attn")


@dataclass
class ModelConfig:
    encoder_kind: str = "lstm"
    num_encoder_layers: int = 4
    d_model: int = 64
    num_heads: int = 4          # transformer only
    d_pred: int = 32
    d_joint: int = 32
    vocab_size: int = 16        # real tokens; blank is the extra output
    input_dim: int = 512        # stacked feature width
    max_positions: int = 256    # transformer position table size
    adapter_position: str = "after_ffn"
    layer_norm_eps: float = 1e-5
    dtype: str = "f32"
    blank_id: int = field(default=-1)  # -1 resolves to vocab_size

    def __post_init__(self):
        if self.encoder_kind not in ENCODER_KINDS:
            raise ContractError(f"encoder_kind must be one of {ENCODER_KINDS}")
        if self.adapter_position not in ADAPTER_POSITIONS:
            raise ContractError(f"adapter_position must be one of {ADAPTER_POSITIONS}")
        if self.vocab_size < 2:
            raise ContractError("vocab_size must be >= 2")
        if self.blank_id == -1:
            self.blank_id = self.vocab_size
        if self.blank_id != self.vocab_size:
            raise ContractError(
                f"blank is the extra joint output: blank_id must equal vocab_size "
                f"({self.vocab_size}), got {self.blank_id}")
        if self.encoder_kind == "transformer" and self.d_model % self.num_heads:
            raise ContractError(f"d_model {self.d_model} not divisible by "
                                f"num_heads {self.num_heads}")
        if self.dtype not in ("f32", "f64"):
            raise ContractError("dtype must be 'f32' or 'f64'")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64

    def to_dict(self) -> dict:
        return asdict(self)


class ParamStore:
    """Ordered name -> Tensor registry with one group per parameter."""

    def __init__(self, dtype):
        self.np_dtype = dtype
        self.by_name: dict[str, Tensor] = {}

    def register(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.by_name:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=self.np_dtype), requires_grad=True)
        self.by_name[name] = t
        return t

    def groups(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for name in self.by_name:
            out.setdefault(group_of(name), []).append(name)
        return out


def group_of(param_name: str) -> str:
    parts = param_name.split(".")
    if parts[0] == "encoder":
        if parts[1] in ("layer", "adapter"):
            return ".".join(parts[:3])
        return "encoder.frontend"
    return parts[0]  # prediction | joint


def _uniform(rng, shape, fan_in):
    k = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-k, k, size=shape)


class LstmLayer:
    def __init__(self, store: ParamStore, rng, prefix: str, in_dim: int, hidden: int):
        self.hidden = hidden
        self.w_ih = store.register(f"{prefix}.w_ih", _uniform(rng, (in_dim, 4 * hidden), hidden))
        self.w_hh = store.register(f"{prefix}.w_hh", _uniform(rng, (hidden, 4 * hidden), hidden))
        self.b = store.register(f"{prefix}.b", _uniform(rng, (4 * hidden,), hidden))

    def forward(self, x: Tensor) -> Tensor:
        return ad.lstm_sequence(x, self.w_ih, self.w_hh, self.b)

    def step_np(self, x: np.ndarray, state):
        h, c = state
        h2, c2, _ = ad.lstm_cell_np(x, h, c, self.w_ih.data, self.w_hh.data, self.b.data)
        return h2, (h2, c2)

    def zero_state(self):
        z = np.zeros(self.hidden, dtype=self.w_hh.data.dtype)
        return z, z.copy()


class TransformerLayer:
    """Pre-norm causal self-attention + pre-norm feed-forward, residual around each."""

    def __init__(self, store: ParamStore, rng, prefix: str, d_model: int,
                 num_heads: int, eps: float):
        self.num_heads = num_heads
        self.eps = eps
        d_ff = 4 * d_model
        reg = store.register
        self.ln1_scale = reg(f"{prefix}.ln1_scale", np.ones(d_model))
        self.ln1_bias = reg(f"{prefix}.ln1_bias", np.zeros(d_model))
        self.w_q = reg(f"{prefix}.w_q", _uniform(rng, (d_model, d_model), d_model))
        self.b_q = reg(f"{prefix}.b_q", np.zeros(d_model))
        self.w_k = reg(f"{prefix}.w_k", _uniform(rng, (d_model, d_model), d_model))
        self.b_k = reg(f"{prefix}.b_k", np.zeros(d_model))
        self.w_v = reg(f"{prefix}.w_v", _uniform(rng, (d_model, d_model), d_model))
        self.b_v = reg(f"{prefix}.b_v", np.zeros(d_model))
        self.w_o = reg(f"{prefix}.w_o", _uniform(rng, (d_model, d_model), d_model))
        self.b_o = reg(f"{prefix}.b_o", np.zeros(d_model))
        self.ln2_scale = reg(f"{prefix}.ln2_scale", np.ones(d_model))
        self.ln2_bias = reg(f"{prefix}.ln2_bias", np.zeros(d_model))
        self.w_ff1 = reg(f"{prefix}.w_ff1", _uniform(rng, (d_model, d_ff), d_model))
        self.b_ff1 = reg(f"{prefix}.b_ff1", np.zeros(d_ff))
        self.w_ff2 = reg(f"{prefix}.w_ff2", _uniform(rng, (d_ff, d_model), d_ff))
        self.b_ff2 = reg(f"{prefix}.b_ff2", np.zeros(d_model))

    def forward(self, x: Tensor, adapter=None, adapter_position: str = "after_ffn") -> Tensor:
        h = ad.layer_norm(x, self.ln1_scale, self.ln1_bias, self.eps)
        q = ad.matmul(h, self.w_q) + self.b_q
        k = ad.matmul(h, self.w_k) + self.b_k
        v = ad.matmul(h, self.w_v) + self.b_v
        attn = ad.matmul(ad.causal_attention(q, k, v, self.num_heads), self.w_o) + self.b_o
        x = x + attn
        if adapter is not None and adapter_position == "after_attn":
            x = adapter.forward(x)
        h = ad.layer_norm(x, self.ln2_scale, self.ln2_bias, self.eps)
        ff = ad.matmul(ad.relu(ad.matmul(h, self.w_ff1) + self.b_ff1), self.w_ff2) + self.b_ff2
        x = x + ff
        if adapter is not None and adapter_position == "after_ffn":
            x = adapter.forward(x)
        return x


class PredictionNetwork:
    """Token embedding + 2 unidirectional LSTM layers; row 0 is the start state."""

    def __init__(self, store: ParamStore, rng, vocab_size: int, d_pred: int):
        self.embed = store.register("prediction.embed",
                                    rng.normal(0.0, 0.1, size=(vocab_size, d_pred)))
        self.sos = store.register("prediction.sos", rng.normal(0.0, 0.1, size=(1, d_pred)))
        self.layers = [LstmLayer(store, rng, f"prediction.lstm{i}", d_pred, d_pred)
                       for i in range(2)]

    def forward(self, labels) -> Tensor:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size:
            x = ad.concat([self.sos, ad.embedding_lookup(self.embed, labels)], axis=0)
        else:
            x = self.sos
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def start_state(self):
        return [layer.zero_state() for layer in self.layers]

    def step_np(self, token: int | None, state):
        """Advance by one token (None = start symbol); numpy-only decode path."""
        x = self.sos.data[0] if token is None else self.embed.data[token]
        new_state = []
        for layer, st in zip(self.layers, state):
            x, st2 = layer.step_np(x, st)
            new_state.append(st2)
        return x, new_state


class Joint:
    """Additive joint: tanh(W_enc e + W_pred p + b) projected to V+1 logits."""

    def __init__(self, store: ParamStore, rng, d_model: int, d_pred: int,
                 d_joint: int, vocab_size: int):
        self.w_enc = store.register("joint.w_enc", _uniform(rng, (d_model, d_joint), d_model))
        self.w_pred = store.register("joint.w_pred", _uniform(rng, (d_pred, d_joint), d_pred))
        self.b = store.register("joint.b", np.zeros(d_joint))
        self.w_out = store.register("joint.w_out", _uniform(rng, (d_joint, vocab_size + 1), d_joint))
        self.b_out = store.register("joint.b_out", np.zeros(vocab_size + 1))

    def forward(self, enc: Tensor, pred: Tensor) -> Tensor:
        tlen, u1 = enc.shape[0], pred.shape[0]
        d_joint = self.b.shape[0]
        grid = ad.pairwise_add(ad.matmul(enc, self.w_enc), ad.matmul(pred, self.w_pred))
        hidden = ad.tanh(grid + self.b)
        logits = ad.matmul(ad.reshape(hidden, (tlen * u1, d_joint)), self.w_out) + self.b_out
        lattice = ad.log_softmax(logits, axis=-1)
        return ad.reshape(lattice, (tlen, u1, self.b_out.shape[0]))

    def logits_np(self, enc_row: np.ndarray, pred_row: np.ndarray) -> np.ndarray:
        z = np.tanh(enc_row @ self.w_enc.data + pred_row @ self.w_pred.data + self.b.data)
        return z @ self.w_out.data + self.b_out.data


class TransducerModel:
    """Encoder + prediction + joint over one utterance at a time."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.store = ParamStore(config.np_dtype)
        self.adapters: dict[int, object] = {}
        self.adapter_config = None
        rng = np.random.default_rng(seed)
        c = config
        if c.encoder_kind == "lstm":
            self.frontend = None
            self.encoder_layers = [
                LstmLayer(self.store, rng, f"encoder.layer.{i}",
                          c.input_dim if i == 0 else c.d_model, c.d_model)
                for i in range(c.num_encoder_layers)]
        else:
            self.frontend = {
                "w_in": self.store.register("encoder.frontend.w_in",
                                            _uniform(rng, (c.input_dim, c.d_model), c.input_dim)),
                "b_in": self.store.register("encoder.frontend.b_in", np.zeros(c.d_model)),
                "positions": self.store.register(
                    "encoder.frontend.positions",
                    rng.normal(0.0, 0.02, size=(c.max_positions, c.d_model))),
            }
            self.encoder_layers = [
                TransformerLayer(self.store, rng, f"encoder.layer.{i}", c.d_model,
                                 c.num_heads, c.layer_norm_eps)
                for i in range(c.num_encoder_layers)]
        self.prediction = PredictionNetwork(self.store, rng, c.vocab_size, c.d_pred)
        self.joint = Joint(self.store, rng, c.d_model, c.d_pred, c.d_joint, c.vocab_size)

    # -- forward passes ------------------------------------------------

    def encoder_forward(self, features: Tensor) -> Tensor:
        c = self.config
        if features.data.ndim != 2 or features.shape[1] != c.input_dim:
            raise ShapeError(f"encoder expects (T, {c.input_dim}), got {features.shape}")
        if features.shape[0] < 1:
            raise ShapeError("encoder needs at least one frame")
        x = features
        if c.encoder_kind == "lstm":
            for i, layer in enumerate(self.encoder_layers):
                x = layer.forward(x)
                adapter = self.adapters.get(i)
                if adapter is not None:
                    x = adapter.forward(x)
        else:
            tlen = x.shape[0]
            if tlen > c.max_positions:
                raise ShapeError(f"sequence of {tlen} frames exceeds the "
                                 f"{c.max_positions}-position table")
            f = self.frontend
            x = ad.matmul(x, f["w_in"]) + f["b_in"]
            x = x + f["positions"][:tlen]
            for i, layer in enumerate(self.encoder_layers):
                x = layer.forward(x, self.adapters.get(i), c.adapter_position)
        return x

    def prediction_forward(self, labels) -> Tensor:
        self._check_labels(labels)
        return self.prediction.forward(labels)

    def joint_forward(self, enc: Tensor, pred: Tensor) -> Tensor:
        return self.joint.forward(enc, pred)

    def lattice(self, features: Tensor, labels) -> Tensor:
        return self.joint_forward(self.encoder_forward(features), self.prediction_forward(labels))

    def loss(self, features: Tensor, labels) -> Tensor:
        return transducer_loss(self.lattice(features, labels), labels, self.config.blank_id)

    def _check_labels(self, labels) -> None:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= self.config.vocab_size):
            raise ContractError("label id outside vocabulary (blank never appears in labels)")

    # -- parameter bookkeeping ------------------------------------------

    def named_parameters(self) -> Iterable[tuple[str, Tensor]]:
        return self.store.by_name.items()

    def parameters(self) -> Iterable[Tensor]:
        return self.store.by_name.values()

    def group_names(self) -> list[str]:
        return sorted(self.store.groups())

    def count_params(self, trainable_groups: set[str] | None = None) -> "ParamCount":
        groups = self.store.groups()
        if trainable_groups is not None:
            unknown = set(trainable_groups) - set(groups)
            if unknown:
                raise KeyError(f"unknown parameter group(s): {sorted(unknown)}")
        per_group = {g: sum(self.store.by_name[n].data.size for n in names)
                     for g, names in groups.items()}
        total = sum(per_group.values())
        if trainable_groups is None:
            trainable = total
        else:
            trainable = sum(per_group[g] for g in trainable_groups)
        return ParamCount(per_group=per_group, total=total, trainable_total=trainable,
                          trainable_ratio=trainable / total)


@dataclass
class ParamCount:
    per_group: dict[str, int]
    total: int
    trainable_total: int
    trainable_ratio: float
