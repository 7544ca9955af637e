"""Pure-Python reference kernel for the transducer-loss lattice DP.

Same contract as the compiled extension, one cell at a time. Slow but
dependency-free; the benchmark script quantifies the gap.
"""

from __future__ import annotations

import math

import numpy as np

NEG_INF = float("-inf")


def _lae(a: float, b: float) -> float:
    """log(exp(a) + exp(b)) without leaving log space."""
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a < b:
        a, b = b, a
    return a + math.log1p(math.exp(b - a))


def forward_alpha(lp: np.ndarray, labels: np.ndarray, blank: int):
    """Forward variables over the (T, U+1) lattice plus the sequence loss.

    lp is the T x (U+1) x (V+1) grid of joint log-probabilities. Cell
    (t, u) means: t frames consumed, u labels emitted. A blank at (t, u)
    advances t, the u-th label advances u, and every path ends with the
    forced blank at (T-1, U).
    """
    tlen, u1, _ = lp.shape
    ulen = u1 - 1
    alpha = np.full((tlen, u1), NEG_INF, dtype=np.float64)
    alpha[0, 0] = 0.0
    for t in range(tlen):
        for u in range(ulen + 1):
            if t == 0 and u == 0:
                continue
            via_blank = alpha[t - 1, u] + lp[t - 1, u, blank] if t > 0 else NEG_INF
            via_label = alpha[t, u - 1] + lp[t, u - 1, labels[u - 1]] if u > 0 else NEG_INF
            alpha[t, u] = _lae(via_blank, via_label)
    loss = -(alpha[tlen - 1, ulen] + lp[tlen - 1, ulen, blank])
    return alpha, loss


def forward_backward(lp: np.ndarray, labels: np.ndarray, blank: int,
                     want_grad: bool = True):
    """Loss and, optionally, its gradient w.r.t. every lattice entry.

    The gradient is the negated path-posterior occupancy of each edge,
    obtained from the forward and backward variables.
    """
    tlen, u1, _ = lp.shape
    ulen = u1 - 1
    alpha, loss = forward_alpha(lp, labels, blank)
    if not want_grad:
        return loss, None
    grad = np.zeros_like(lp, dtype=np.float64)
    total = -loss
    if not math.isfinite(total):
        return loss, grad
    beta = np.full((tlen, u1), NEG_INF, dtype=np.float64)
    beta[tlen - 1, ulen] = lp[tlen - 1, ulen, blank]
    for t in range(tlen - 1, -1, -1):
        for u in range(ulen, -1, -1):
            if t == tlen - 1 and u == ulen:
                continue
            via_blank = lp[t, u, blank] + beta[t + 1, u] if t + 1 < tlen else NEG_INF
            via_label = lp[t, u, labels[u]] + beta[t, u + 1] if u < ulen else NEG_INF
            beta[t, u] = _lae(via_blank, via_label)
    for t in range(tlen):
        for u in range(ulen + 1):
            a = alpha[t, u]
            if a == NEG_INF:
                continue
            if t + 1 < tlen:
                grad[t, u, blank] -= math.exp(a + lp[t, u, blank] + beta[t + 1, u] - total)
            elif u == ulen:
                grad[t, u, blank] -= math.exp(a + lp[t, u, blank] - total)
            if u < ulen:
                lab = labels[u]
                grad[t, u, lab] -= math.exp(a + lp[t, u, lab] + beta[t, u + 1] - total)
    return loss, grad
