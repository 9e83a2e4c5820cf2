"""Confidence updates, prototype bank and the three training losses.

Embeddings passed to the similarity functions must already be row-normalized
(see :func:`cel.network.normalize_embeddings`), so inner products are cosine
similarities.

Candidate-set similarities use the sums ``u = sum_{j in S} e_j`` and
``v = sum_{h not in S} e_h``: the mean over ordered pairs in ``S x S``
(diagonal included) is ``|u|^2 / |S|^2`` and the mean over ``S x S^c`` is
``<u, v> / (|S| (q - |S|))``.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np
import torch

from .exceptions import InvariantViolation

PROB_FLOOR = 1e-12

SELECTION_MODES = ("strict", "restricted")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 1.0
    gamma1: float = 1.0
    gamma2: float = 1.0
    tw: int = 50
    tmax: int = 100

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma1", "gamma2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0 <= self.tw <= self.tmax:
            raise ValueError(f"need 0 <= tw <= tmax, got tw={self.tw}, tmax={self.tmax}")


def _as_bool(candidates):
    if isinstance(candidates, torch.Tensor):
        return candidates.detach().cpu().numpy().astype(bool)
    return np.asarray(candidates, dtype=bool)


def _as_numpy(x):
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


# ---------------------------------------------------------------------------
# label confidence


def init_confidence(candidates) -> np.ndarray:
    S = _as_bool(candidates)
    sizes = S.sum(axis=1)
    if np.any(sizes == 0):
        raise ValueError(f"empty candidate set in rows {np.flatnonzero(sizes == 0)[:10].tolist()}")
    return S / sizes[:, None].astype(np.float64)


def update_confidence(P, candidates, counters: Counter | None = None) -> np.ndarray:
    """Renormalize predictions over each candidate set; zero elsewhere.

    A row whose candidate mass is exactly zero falls back to uniform over its
    candidates and is counted under ``"confidence_fallback"``.
    """
    P = _as_numpy(P).astype(np.float64)
    S = _as_bool(candidates)
    masked = np.where(S, P, 0.0)
    mass = masked.sum(axis=1, keepdims=True)
    dead = mass[:, 0] <= 0
    if dead.any():
        masked[dead] = S[dead]
        mass[dead] = S[dead].sum(axis=1, keepdims=True)
        if counters is not None:
            counters["confidence_fallback"] += int(dead.sum())
    return masked / mass


def cls_loss(P, T):
    """Cross-entropy of predictions against confidence targets, batch mean."""
    if tuple(P.shape) != tuple(T.shape):
        raise ValueError(f"shape mismatch: P {tuple(P.shape)} vs T {tuple(T.shape)}")
    T = torch.as_tensor(T, dtype=P.dtype, device=P.device)
    return -(T * torch.log(P.clamp_min(PROB_FLOOR))).sum(dim=1).mean()


# ---------------------------------------------------------------------------
# class associative loss


def cal_similarities(E_hat, candidates, counters: Counter | None = None):
    """Per-sample mean within-candidate and candidate/non-candidate similarity.

    Returns ``(s, d)`` tensors of shape ``(B,)``. ``d`` is 0 for samples whose
    candidate set covers every class (counted as ``"cal_full_sets"``).
    """
    S = torch.as_tensor(_as_bool(candidates), device=E_hat.device)
    mask = S.to(E_hat.dtype)
    q = mask.shape[1]
    n_in = mask.sum(dim=1)
    n_out = q - n_in
    u = torch.einsum("bq,bql->bl", mask, E_hat)
    v = torch.einsum("bq,bql->bl", 1.0 - mask, E_hat)
    s = (u * u).sum(dim=1) / (n_in * n_in)
    full = n_out == 0
    d = (u * v).sum(dim=1) / torch.where(full, torch.ones_like(n_out), n_in * n_out)
    if counters is not None and bool(full.any()):
        counters["cal_full_sets"] += int(full.sum())
    return s, d


def cal_loss(s_cal, d_cal, gamma1: float):
    return ((1.0 - s_cal) + gamma1 * d_cal.abs()).mean()


# ---------------------------------------------------------------------------
# prototypes


def select_high_confidence(P, candidates, mode: str = "strict") -> np.ndarray:
    """Pick a high-confidence class per row, or -1.

    ``strict``: the global argmax, kept only if it is a candidate.
    ``restricted``: the argmax over the candidate set (always defined).
    Ties go to the lowest class index. Accepts a single row or a batch.
    """
    if mode not in SELECTION_MODES:
        raise ValueError(f"selection mode must be one of {SELECTION_MODES}")
    P = _as_numpy(P).astype(np.float64)
    S = _as_bool(candidates)
    single = P.ndim == 1
    P, S = np.atleast_2d(P), np.atleast_2d(S)
    if mode == "strict":
        c = P.argmax(axis=1)
        c = np.where(S[np.arange(len(c)), c], c, -1)
    else:
        c = np.where(S, P, -np.inf).argmax(axis=1)
        c = np.where(S.any(axis=1), c, -1)
    return int(c[0]) if single else c


class PrototypeBank:
    """Unit-norm class prototypes, held outside the autograd graph."""

    def __init__(self, q: int, dim: int):
        self.Q = np.zeros((q, dim), dtype=np.float64)
        self.initialized = np.zeros(q, dtype=bool)
        self.counts = np.zeros(q, dtype=np.int64)

    @property
    def q(self):
        return self.Q.shape[0]

    def copy(self) -> "PrototypeBank":
        out = PrototypeBank(*self.Q.shape)
        out.Q[:] = self.Q
        out.initialized[:] = self.initialized
        out.counts[:] = self.counts
        return out

    def as_tensor(self, like: torch.Tensor) -> torch.Tensor:
        return torch.as_tensor(self.Q, dtype=like.dtype, device=like.device)

    def check(self, atol: float = 1e-9) -> None:
        norms = np.linalg.norm(self.Q, axis=1)
        if np.any(np.abs(norms[self.initialized] - 1.0) > atol):
            raise InvariantViolation("initialized prototype row is not unit norm")
        if np.any(self.Q[~self.initialized] != 0):
            raise InvariantViolation("uninitialized prototype row is non-zero")


def update_prototypes(bank: PrototypeBank, E_hat, selections) -> PrototypeBank:
    """Fold each selected embedding into its class prototype, in batch order.

    ``Q[c] <- normalize(Q[c] + e)``. A sum that vanishes (an embedding exactly
    opposite its prototype, or a zero embedding on an empty row) leaves the
    prototype untouched.
    """
    E = _as_numpy(E_hat).astype(np.float64)
    selections = np.asarray(selections)
    for i in np.flatnonzero(selections >= 0):
        c = int(selections[i])
        total = bank.Q[c] + E[i, c]
        norm = np.sqrt(total @ total)
        if norm == 0.0:
            continue
        bank.Q[c] = total / norm
        bank.initialized[c] = True
        bank.counts[c] += 1
    return bank


def pdl_similarities(E_hat, bank: PrototypeBank, selections, counters: Counter | None = None):
    """Similarity of each selected embedding to its own and to other prototypes.

    Returns ``(s, d, rows)`` where ``rows`` indexes the batch samples that
    contributed. Samples whose selected class has no prototype yet are
    skipped and counted as ``"pdl_skipped"``. Uninitialized prototypes add 0
    to the sum over other classes but still count in the ``q - 1`` divisor.
    """
    selections = np.asarray(selections)
    chosen = selections >= 0
    ready = chosen & bank.initialized[np.where(chosen, selections, 0)]
    skipped = int(chosen.sum() - ready.sum())
    if counters is not None and skipped:
        counters["pdl_skipped"] += skipped
    rows = np.flatnonzero(ready)
    Q = bank.as_tensor(E_hat)
    if rows.size == 0:
        empty = E_hat.new_zeros(0)
        return empty, empty, rows
    cls = torch.as_tensor(selections[rows], device=E_hat.device)
    rows_t = torch.as_tensor(rows, device=E_hat.device)
    e = E_hat[rows_t, cls]
    own = Q[cls]
    others = Q.sum(dim=0, keepdim=True) - own
    s = (e * own).sum(dim=1)
    d = (e * others).sum(dim=1) / (bank.q - 1)
    return s, d, rows


def pdl_loss(s_pdl, d_pdl, gamma2: float, counters: Counter | None = None):
    if s_pdl.numel() == 0:
        if counters is not None:
            counters["no_pdl_samples"] += 1
        return s_pdl.new_zeros(())
    return ((1.0 - s_pdl) + gamma2 * d_pdl.abs()).mean()


# ---------------------------------------------------------------------------
# objective


def in_second_stage(epoch: int, weights: LossWeights) -> bool:
    return epoch > weights.tw


def total_loss(epoch: int, losses, weights: LossWeights):
    """Combine loss components for the given 1-based epoch.

    ``losses`` maps ``"cls"``, ``"cal"`` and optionally ``"pdl"`` to scalars.
    The prototype term joins only after epoch ``tw``.
    """
    total = losses["cls"] + weights.alpha * losses["cal"]
    if in_second_stage(epoch, weights):
        total = total + weights.beta * losses["pdl"]
    return total
