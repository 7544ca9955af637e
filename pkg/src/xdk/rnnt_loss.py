"""Transducer loss: exact -log P(labels) marginalized over monotonic alignments.

Three routes to the same number, used to cross-check each other:

* ``transducer_loss`` — the production path; one autodiff node backed by
  the selected lattice kernel (compiled or numpy).
* ``transducer_loss_stepwise`` — the same recurrence built out of
  elementary autodiff ops, so the fused kernel's analytic gradient can be
  compared against plain reverse-mode differentiation.
* ``brute_force_loss`` — enumeration of every alignment, for small lattices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .errors import ContractError, OracleError, ShapeError

ENUM_GUARD = 14  # brute force enumerates C(T+U-1, U) paths; keep T+U small


def _check_inputs(shape, labels: np.ndarray, blank: int) -> None:
    tlen, u1, v1 = shape
    if tlen == 0:
        raise ContractError("transducer loss needs at least one frame (T == 0)")
    if len(labels) != u1 - 1:
        raise ShapeError(f"lattice U+1 = {u1} inconsistent with {len(labels)} labels")
    if blank >= v1:
        raise ShapeError(f"blank id {blank} outside vocabulary axis of size {v1}")
    if labels.size and (labels.min() < 0 or labels.max() >= v1):
        raise ContractError("label id outside lattice vocabulary axis")
    if np.any(labels == blank):
        raise ContractError("blank must not appear in the label sequence")


def _as_labels(labels) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(labels, dtype=np.int64))


@dataclass
class AlphaLattice:
    """Forward DP table plus the loss it implies."""

    alpha: np.ndarray  # (T, U+1) log-probabilities of reaching each cell
    loss: float


def alpha_lattice(log_probs: np.ndarray, labels, blank: int) -> AlphaLattice:
    labels = _as_labels(labels)
    lp = np.ascontiguousarray(log_probs, dtype=np.float64)
    _check_inputs(lp.shape, labels, blank)
    alpha, loss = kernels.forward_alpha(lp, labels, blank)
    return AlphaLattice(alpha=np.asarray(alpha), loss=loss)


def transducer_loss(lattice: Tensor, labels, blank: int) -> Tensor:
    """Differentiable loss over a T x (U+1) x (V+1) log-prob lattice."""
    labels = _as_labels(labels)
    _check_inputs(lattice.shape, labels, blank)
    lp = np.ascontiguousarray(lattice.data, dtype=np.float64)
    want_grad = ad._grad_enabled and lattice.requires_grad
    loss, grad = kernels.forward_backward(lp, labels, blank, want_grad)

    def bwd(g):
        ad._accumulate(lattice, np.asarray(grad, dtype=lattice.data.dtype) * g)

    return ad._make(np.asarray(loss, dtype=lattice.data.dtype), (lattice,), bwd, "transducer_loss")


def transducer_loss_stepwise(lattice: Tensor, labels, blank: int) -> Tensor:
    """The same DP expressed in elementary graph ops (logsumexp of slices).

    Exercises the reverse-mode engine end to end; only suitable for tiny
    lattices.
    """
    labels = _as_labels(labels)
    _check_inputs(lattice.shape, labels, blank)
    tlen, u1, _ = lattice.shape
    ulen = u1 - 1
    zero = Tensor(np.zeros((), dtype=lattice.data.dtype))
    alpha: dict[tuple[int, int], Tensor] = {(0, 0): zero}
    for t in range(tlen):
        for u in range(ulen + 1):
            if t == 0 and u == 0:
                continue
            terms = []
            if t > 0:
                terms.append(alpha[t - 1, u] + lattice[t - 1, u, blank])
            if u > 0:
                terms.append(alpha[t, u - 1] + lattice[t, u - 1, int(labels[u - 1])])
            if len(terms) == 1:
                alpha[t, u] = terms[0]
            else:
                alpha[t, u] = ad.logsumexp(ad.concat([ad.reshape(x, (1,)) for x in terms]))
    return -(alpha[tlen - 1, ulen] + lattice[tlen - 1, ulen, blank])


def path_count(tlen: int, ulen: int) -> int:
    """Number of monotonic alignments; the final emission is always blank."""
    return math.comb(tlen + ulen - 1, ulen)


def brute_force_loss(log_probs: np.ndarray, labels, blank: int) -> float:
    """Enumerate all alignments and sum their probabilities in log space.

    An alignment interleaves T blanks and the U labels, label order
    preserved, with the last emission forced to be a blank. Guarded to
    small lattices; this function is the ground truth the DP is tested
    against.
    """
    labels = _as_labels(labels)
    lp = np.asarray(log_probs, dtype=np.float64)
    _check_inputs(lp.shape, labels, blank)
    tlen, u1, _ = lp.shape
    ulen = u1 - 1
    if tlen + ulen > ENUM_GUARD:
        raise OracleError(f"T+U = {tlen + ulen} exceeds enumeration guard {ENUM_GUARD}")
    total = -np.inf
    free_slots = tlen + ulen - 1  # all emissions except the final blank
    for label_positions in combinations(range(free_slots), ulen):
        pos = set(label_positions)
        t = u = 0
        logp = 0.0
        for slot in range(free_slots):
            if slot in pos:
                logp += lp[t, u, labels[u]]
                u += 1
            else:
                logp += lp[t, u, blank]
                t += 1
        logp += lp[tlen - 1, ulen, blank]
        total = np.logaddexp(total, logp)
    return -float(total)
