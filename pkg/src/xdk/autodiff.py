"""Dense tensors with reverse-mode automatic differentiation.

Small by design: exactly the operations a sequence transducer needs
(matmul, elementwise nonlinearities, layer norm, log-space reductions,
fused LSTM / causal-attention steps) plus a finite-difference oracle.
The graph is implicit: every tensor carries a construction-order id and
its parents, and ``backward`` replays the tape in exact reverse
construction order, accumulating gradients with ``+=`` semantics.

Precision is chosen at construction time (float32 for training, float64
for gradient checks); binary ops refuse to mix the two.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DomainError, OracleError, ShapeError

_ids = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (decoding, evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional value with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_id", "_parents", "_backward")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=dtype)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def is_finite(self) -> bool:
        """Validity check: False when data holds any NaN or Inf."""
        return bool(np.isfinite(self.data).all())

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, dtype={self.data.dtype})"

    # arithmetic sugar; everything routes through the named primitives
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(other, -1.0)) if isinstance(other, Tensor) else shift(self, -other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # rebinds instead of += so aliased contributions can never corrupt each other
    t.grad = g if t.grad is None else t.grad + g


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._id = next(_ids)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _same_dtype(*ts: Tensor, op: str) -> None:
    dts = {t.data.dtype for t in ts}
    if len(dts) > 1:
        raise ContractError(f"{op}: mixed dtypes {sorted(map(str, dts))}")


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(tensor) into every requires_grad tensor.

    Gradients accumulate across multiple uses of the same tensor; the
    training loop is responsible for zeroing them between steps.
    """
    if loss.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        node = stack.pop()
        if node._id in seen:
            continue
        seen.add(node._id)
        nodes.append(node)
        stack.extend(p for p in node._parents if p.requires_grad)
    nodes.sort(key=lambda t: t._id, reverse=True)
    _accumulate(loss, np.ones((), dtype=loss.data.dtype))
    for node in nodes:
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise / linear primitives
# ---------------------------------------------------------------------------


def _broadcast_ok(a_shape, b_shape) -> bool:
    # b may broadcast over leading dims only (bias over batch/time rows)
    nb = len(b_shape)
    return nb <= len(a_shape) and a_shape[len(a_shape) - nb:] == b_shape


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra))) if extra else g


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    _same_dtype(a, b, op="add")

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, _reduce_to(g, b.shape))

    return _make(a.data + b.data, (a, b), bwd, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")
    _same_dtype(a, b, op="mul")

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, _reduce_to(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bwd, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        _accumulate(x, g * c)

    return _make(x.data * c, (x,), bwd, "scale")


def shift(x: Tensor, c: float) -> Tensor:
    def bwd(g):
        _accumulate(x, g)

    return _make(x.data + float(c), (x,), bwd, "shift")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    _same_dtype(a, b, op="matmul")

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bwd, "matmul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bwd(g):
        _accumulate(x, g * mask)

    return _make(np.where(mask, x.data, 0.0), (x,), bwd, "relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bwd(g):
        _accumulate(x, g * (1.0 - y * y))

    return _make(y, (x,), bwd, "tanh")


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid_np(x.data)

    def bwd(g):
        _accumulate(x, g * y * (1.0 - y))

    return _make(y, (x,), bwd, "sigmoid")


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def layer_norm(x: Tensor, ln_scale: Tensor, ln_bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise DomainError(f"layer_norm eps must be > 0, got {eps}")
    d = x.shape[-1]
    if ln_scale.shape != (d,) or ln_bias.shape != (d,):
        raise ShapeError(f"layer_norm: x {x.shape}, scale {ln_scale.shape}, bias {ln_bias.shape}")
    _same_dtype(x, ln_scale, ln_bias, op="layer_norm")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bwd(g):
        if ln_scale.requires_grad:
            _accumulate(ln_scale, (g * xhat).reshape(-1, d).sum(axis=0))
        if ln_bias.requires_grad:
            _accumulate(ln_bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxhat = g * ln_scale.data
            term = dxhat - dxhat.mean(axis=-1, keepdims=True)
            term -= xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, inv * term)

    return _make(xhat * ln_scale.data + ln_bias.data, (x, ln_scale, ln_bias), bwd, "layer_norm")


# ---------------------------------------------------------------------------
# log-space reductions
# ---------------------------------------------------------------------------


def logsumexp(x: Tensor, axis: int | None = None) -> Tensor:
    if x.data.size == 0:
        raise ShapeError("logsumexp of empty tensor")
    m = x.data.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    lse = np.log(np.exp(x.data - m).sum(axis=axis, keepdims=True)) + m
    out = lse.reshape(()) if axis is None else np.squeeze(lse, axis=axis)

    def bwd(g):
        safe = np.where(np.isfinite(lse), lse, 0.0)
        soft = np.where(np.isfinite(x.data), np.exp(x.data - safe), 0.0)
        ge = g if axis is None else np.expand_dims(g, axis)
        _accumulate(x, soft * ge)

    return _make(out.copy(), (x,), bwd, "logsumexp")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bwd(g):
        _accumulate(x, g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return _make(y, (x,), bwd, "log_softmax")


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    def bwd(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.shape).astype(x.data.dtype))
        else:
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())

    return _make(x.data.sum(axis=axis), (x,), bwd, "sum")


def mean(x: Tensor) -> Tensor:
    return scale(tsum(x), 1.0 / x.data.size)


# ---------------------------------------------------------------------------
# structural primitives
# ---------------------------------------------------------------------------


def getitem(x: Tensor, key) -> Tensor:
    data = x.data[key]

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        _accumulate(x, gx)

    return _make(np.asarray(data), (x,), bwd, "slice")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of zero tensors")
    _same_dtype(*tensors, op="concat")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(idx)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd, "concat")


def reshape(x: Tensor, shape) -> Tensor:
    def bwd(g):
        _accumulate(x, g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), bwd, "reshape")


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects 2-D, got {x.shape}")

    def bwd(g):
        _accumulate(x, g.T)

    return _make(x.data.T.copy(), (x,), bwd, "transpose")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"embedding ids must be 1-D, got {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"embedding id out of range [0, {table.shape[0]})")

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        _accumulate(table, gt)

    return _make(table.data[ids], (table,), bwd, "embedding_lookup")


def pairwise_add(a: Tensor, b: Tensor) -> Tensor:
    """Outer sum of two row sets: (m,h) x (n,h) -> (m,n,h).

    The joint network's additive combination of encoder frames and
    prediction states; kept as one primitive so no general broadcasting
    is needed elsewhere.
    """
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_add: {a.shape} vs {b.shape}")
    _same_dtype(a, b, op="pairwise_add")

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g.sum(axis=1))
        if b.requires_grad:
            _accumulate(b, g.sum(axis=0))

    return _make(a.data[:, None, :] + b.data[None, :, :], (a, b), bwd, "pairwise_add")


# ---------------------------------------------------------------------------
# fused sequence kernels (manual gradients, finite-difference checked)
# ---------------------------------------------------------------------------


def lstm_cell_np(x, h, c, w_ih, w_hh, b):
    """One LSTM step on raw arrays; shared by training and decoding paths."""
    hdim = h.shape[-1]
    z = x @ w_ih + h @ w_hh + b
    i = _sigmoid_np(z[..., :hdim])
    f = _sigmoid_np(z[..., hdim:2 * hdim])
    g = np.tanh(z[..., 2 * hdim:3 * hdim])
    o = _sigmoid_np(z[..., 3 * hdim:])
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, c_new, (i, f, g, o)


def lstm_sequence(x: Tensor, w_ih: Tensor, w_hh: Tensor, b: Tensor) -> Tensor:
    """Run a unidirectional LSTM over a (T, in) sequence, returning (T, hidden).

    Forward and backward both loop over time in numpy; the whole scan is a
    single graph node so deep stacks stay cheap. Initial state is zero.
    """
    tlen, in_dim = x.shape
    hdim = w_hh.shape[0]
    if w_ih.shape != (in_dim, 4 * hdim) or w_hh.shape != (hdim, 4 * hdim) or b.shape != (4 * hdim,):
        raise ShapeError(
            f"lstm_sequence: x {x.shape}, w_ih {w_ih.shape}, w_hh {w_hh.shape}, b {b.shape}")
    _same_dtype(x, w_ih, w_hh, b, op="lstm_sequence")
    dt = x.data.dtype
    hs = np.zeros((tlen + 1, hdim), dtype=dt)
    cs = np.zeros((tlen + 1, hdim), dtype=dt)
    gates = []
    for t in range(tlen):
        h, c, acts = lstm_cell_np(x.data[t], hs[t], cs[t], w_ih.data, w_hh.data, b.data)
        hs[t + 1], cs[t + 1] = h, c
        gates.append(acts)

    def bwd(g):
        dz = np.zeros((tlen, 4 * hdim), dtype=dt)
        dh = np.zeros(hdim, dtype=dt)
        dc = np.zeros(hdim, dtype=dt)
        for t in range(tlen - 1, -1, -1):
            i, f, gg, o = gates[t]
            tc = np.tanh(cs[t + 1])
            dh = dh + g[t]
            do = dh * tc
            dc = dc + dh * o * (1.0 - tc * tc)
            di = dc * gg
            dg = dc * i
            df = dc * cs[t]
            dz[t, :hdim] = di * i * (1.0 - i)
            dz[t, hdim:2 * hdim] = df * f * (1.0 - f)
            dz[t, 2 * hdim:3 * hdim] = dg * (1.0 - gg * gg)
            dz[t, 3 * hdim:] = do * o * (1.0 - o)
            dc = dc * f
            dh = dz[t] @ w_hh.data.T
        if x.requires_grad:
            _accumulate(x, dz @ w_ih.data.T)
        if w_ih.requires_grad:
            _accumulate(w_ih, x.data.T @ dz)
        if w_hh.requires_grad:
            _accumulate(w_hh, hs[:-1].T @ dz)
        if b.requires_grad:
            _accumulate(b, dz.sum(axis=0))

    return _make(hs[1:].copy(), (x, w_ih, w_hh, b), bwd, "lstm_sequence")


def causal_attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int) -> Tensor:
    """Multi-head self-attention where position t sees positions <= t only."""
    tlen, d = q.shape
    if k.shape != (tlen, d) or v.shape != (tlen, d):
        raise ShapeError(f"causal_attention: q {q.shape}, k {k.shape}, v {v.shape}")
    if d % num_heads:
        raise ShapeError(f"width {d} not divisible by {num_heads} heads")
    _same_dtype(q, k, v, op="causal_attention")
    dh = d // num_heads
    inv = 1.0 / np.sqrt(dh)

    def split(a):  # (T, d) -> (heads, T, dh)
        return a.reshape(tlen, num_heads, dh).transpose(1, 0, 2)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    scores = np.einsum("hik,hjk->hij", qh, kh) * inv
    scores = np.where(np.triu(np.ones((tlen, tlen), dtype=bool), k=1), -np.inf, scores)
    scores -= scores.max(axis=-1, keepdims=True)
    attn = np.exp(scores)
    attn /= attn.sum(axis=-1, keepdims=True)
    out = np.einsum("hij,hjk->hik", attn, vh)

    def merge(a):  # (heads, T, dh) -> (T, d)
        return a.transpose(1, 0, 2).reshape(tlen, d)

    def bwd(g):
        gh = split(g)
        dattn = np.einsum("hik,hjk->hij", gh, vh)
        dscores = (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) * attn
        if v.requires_grad:
            _accumulate(v, merge(np.einsum("hji,hjk->hik", attn, gh)))
        if q.requires_grad:
            _accumulate(q, merge(np.einsum("hij,hjk->hik", dscores, kh) * inv))
        if k.requires_grad:
            _accumulate(k, merge(np.einsum("hji,hjk->hik", dscores, qh) * inv))

    return _make(merge(out), (q, k, v), bwd, "causal_attention")


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def finite_difference_check(f: Callable[[], Tensor], wrt: Sequence[Tensor],
                            h: float = 1e-4) -> float:
    """Compare analytic gradients of the scalar ``f()`` against central differences.

    Returns the max over all coordinates of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    ``f`` must be deterministic; two disagreeing forward passes raise OracleError.
    """
    if h <= 0:
        raise DomainError(f"step must be > 0, got {h}")
    first = f()
    if first.shape != ():
        raise ContractError("finite_difference_check needs a scalar function")
    if f().item() != first.item():
        raise OracleError("function is not deterministic: forward passes disagree")
    zero_grads(wrt)
    backward(first)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in wrt]
    worst = 0.0
    for t, ga in zip(wrt, analytic):
        flat = t.data.reshape(-1)
        gflat = ga.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = f().item()
            flat[j] = orig - h
            down = f().item()
            flat[j] = orig
            numeric = (up - down) / (2.0 * h)
            err = abs(gflat[j] - numeric) / max(abs(gflat[j]), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
