"""CTC head, exact CTC loss and the spike trigger.

Label layout of the CTC head: class 0 is blank, class ``k + 1`` is token id
``k``. EOS is never a CTC target.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .layers import Linear
from .numerics import Tensor, _result, log_softmax, reshape, take

BLANK = 0


class CTCInfeasibleError(ValueError):
    """Target cannot be aligned to the available frames."""


@dataclass
class PosteriorGrid:
    """Per-frame log-probabilities over blank + V tokens."""

    log_probs: Tensor

    @property
    def frames(self) -> int:
        return self.log_probs.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.log_probs.shape[1] - 1

    def blank_probs(self) -> np.ndarray:
        return np.exp(self.log_probs.data[:, BLANK].astype(np.float64))


@dataclass
class TriggerSet:
    positions: np.ndarray
    beta: float

    def __len__(self) -> int:
        return len(self.positions)


def ctc_head(enc: Tensor, proj: Linear) -> PosteriorGrid:
    return PosteriorGrid(log_softmax(proj(enc), axis=-1))


def min_frames(target: Sequence[int]) -> int:
    """Shortest frame count that can emit ``target`` (repeats need a blank)."""
    target = list(target)
    return len(target) + sum(a == b for a, b in zip(target, target[1:]))


def _forward_backward(lp: np.ndarray, target: Sequence[int]) -> tuple[float, np.ndarray]:
    """Returns (log p(target), d log p / d lp) for one utterance.

    ``lp`` is ``(T, V+1)`` in float64, ``target`` holds token ids.
    """
    T = lp.shape[0]
    L = len(target)
    if L == 0:
        raise CTCInfeasibleError("empty target")
    if T < min_frames(target):
        raise CTCInfeasibleError(f"{T} frames cannot emit {L} labels ({min_frames(target)} needed)")
    ext = np.zeros(2 * L + 1, dtype=np.int64)
    ext[1::2] = np.asarray(target) + 1
    S = ext.size
    # skip transition s-2 -> s allowed for labels differing from the one two back
    skip = np.zeros(S, dtype=bool)
    skip[3::2] = ext[3::2] != ext[1:-2:2]
    emit = lp[:, ext]  # (T, S)
    neg = -np.inf

    alpha = np.full((T, S), neg)
    alpha[0, 0] = emit[0, 0]
    alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        a1 = np.concatenate(([neg], prev[:-1]))
        a2 = np.where(skip, np.concatenate(([neg, neg], prev[:-2])), neg)
        alpha[t] = _lse3(prev, a1, a2) + emit[t]

    beta = np.full((T, S), neg)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    beta[T - 1, S - 2] = emit[T - 1, S - 2]
    skip_next = np.concatenate((skip[2:], [False, False]))
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        b1 = np.concatenate((nxt[1:], [neg]))
        b2 = np.where(skip_next, np.concatenate((nxt[2:], [neg, neg])), neg)
        beta[t] = _lse3(nxt, b1, b2) + emit[t]

    logp = np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    if not np.isfinite(logp):
        raise CTCInfeasibleError("target has zero probability under the grid")
    gamma = alpha + beta - emit  # log occupancy of each (t, s)
    occ = np.zeros_like(lp)
    post = np.exp(gamma - logp)
    np.add.at(occ, (slice(None), ext), post)
    return float(logp), occ


def _lse3(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    m = np.maximum(np.maximum(a, b), c)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return safe + np.log(np.exp(a - safe) + np.exp(b - safe) + np.exp(c - safe))


def ctc_nll_batch(log_probs: Tensor, lengths: Sequence[int],
                  targets: Sequence[Sequence[int]]) -> Tensor:
    """Per-utterance -log p(target) for a padded ``(B, T, V+1)`` block."""
    nll = np.zeros(len(targets), dtype=log_probs.dtype)
    occs = []
    for b, (n, tgt) in enumerate(zip(lengths, targets)):
        lp = log_probs.data[b, :n].astype(np.float64)
        logp, occ = _forward_backward(lp, tgt)
        nll[b] = -logp
        occs.append(occ)

    def fn(g):
        full = np.zeros_like(log_probs.data)
        for b, (n, occ) in enumerate(zip(lengths, occs)):
            full[b, :n] = -g[b] * occ
        return (full,)

    return _result(nll, (log_probs,), fn)


def ctc_loss(grid: PosteriorGrid, target: Sequence[int], normalize: bool = False) -> Tensor:
    """-log p(target | grid) by the forward algorithm in log space.

    With ``normalize`` the value is divided by the label count, the form used
    inside the joint training objective.
    """
    lp = grid.log_probs
    nll = ctc_nll_batch(reshape(lp, (1,) + lp.shape), [lp.shape[0]], [list(target)])
    nll = take(nll, 0)
    if normalize:
        nll = nll * (1.0 / len(target))
    return nll


def trigger(grid: PosteriorGrid, beta: float) -> TriggerSet:
    """Frames whose non-blank probability 1 - p_b reaches ``beta``."""
    nonblank = 1.0 - grid.blank_probs()
    return TriggerSet(np.flatnonzero(nonblank >= beta), beta)


def trigger_positions(log_probs: np.ndarray, beta: float) -> np.ndarray:
    return np.flatnonzero(1.0 - np.exp(log_probs[:, BLANK].astype(np.float64)) >= beta)


def gather_triggered(enc: Tensor, trig: TriggerSet) -> Tensor:
    pos = np.asarray(trig.positions, dtype=np.int64)
    if pos.size and (pos.min() < 0 or pos.max() >= enc.shape[0]):
        raise IndexError(f"trigger position outside [0, {enc.shape[0]})")
    return take(enc, pos)


def ctc_greedy_path(grid: PosteriorGrid) -> list[int]:
    """Best label per frame, repeats merged, blanks dropped (token ids)."""
    best = np.argmax(grid.log_probs.data, axis=-1)
    out = []
    prev = None
    for k in best:
        if k != prev and k != BLANK:
            out.append(int(k) - 1)
        prev = k
    return out
