"""Scoring and analyses: CER, real-time factor, length-error histogram,
spike/boundary classification and source-attention export."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .data import FRAME_SHIFT

# encoder frame t covers feature frames [4t, 4t + 4)
SUBSAMPLING = 4


@dataclass
class EditCounts:
    distance: int
    substitutions: int
    deletions: int
    insertions: int
    ref_len: int

    @property
    def rate(self) -> float:
        return self.distance / self.ref_len


def edit_counts(hyp: Sequence, ref: Sequence) -> EditCounts:
    """Levenshtein alignment with unit costs; ties prefer substitution, then
    deletion, then insertion when backtracking."""
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]),
                          d[i - 1, j] + 1,
                          d[i, j - 1] + 1)
    i, j = n, m
    subs = dels = ins = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            subs += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditCounts(int(d[n, m]), int(subs), dels, ins, n)


def cer(hyp: Sequence, ref: Sequence) -> EditCounts:
    if len(ref) == 0:
        raise ValueError("reference must be non-empty")
    return edit_counts(hyp, ref)


def corpus_cer(pairs: Iterable[tuple[Sequence, Sequence]]) -> float:
    dist = total = 0
    for hyp, ref in pairs:
        c = cer(hyp, ref)
        dist += c.distance
        total += c.ref_len
    return dist / total if total else 0.0


# ---------------------------------------------------------------------------
# length prediction
# ---------------------------------------------------------------------------

@dataclass
class LengthErrorHistogram:
    counts: dict[int, int]      # (T - T') -> utterances
    total: int

    @property
    def miss_fraction(self) -> float:
        """Share of utterances with T' < T (characters necessarily lost)."""
        return sum(c for k, c in self.counts.items() if k > 0) / self.total if self.total else 0.0

    @property
    def exact_fraction(self) -> float:
        return self.counts.get(0, 0) / self.total if self.total else 0.0

    def rows(self) -> list[tuple[int, int]]:
        return sorted(self.counts.items())


def length_histogram(pairs: Iterable[tuple[int, int]]) -> LengthErrorHistogram:
    """Bin (T, T') pairs by T - T'."""
    counts = Counter(t - tp for t, tp in pairs)
    return LengthErrorHistogram(dict(counts), sum(counts.values()))


# ---------------------------------------------------------------------------
# real-time factor
# ---------------------------------------------------------------------------

@dataclass
class TimingRow:
    id: str
    audio_seconds: float
    decode_seconds: float


@dataclass
class RtfReport:
    rows: list[TimingRow]
    decode_seconds: float
    audio_seconds: float

    @property
    def rtf(self) -> float:
        return self.decode_seconds / self.audio_seconds


def rtf(ledger: Sequence[TimingRow]) -> RtfReport:
    if not ledger:
        raise ValueError("empty timing ledger")
    dec = float(sum(r.decode_seconds for r in ledger))
    aud = float(sum(r.audio_seconds for r in ledger))
    if aud <= 0:
        raise ValueError("no audio in ledger")
    return RtfReport(list(ledger), dec, aud)


def audio_seconds(frames: int) -> float:
    return frames * FRAME_SHIFT


def read_ledger(path) -> list[TimingRow]:
    rows = []
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                uid, a, d = line.split("\t")
                rows.append(TimingRow(uid, float(a), float(d)))
            except ValueError as e:
                raise ValueError(f"{path}:{n}: malformed ledger row") from e
    return rows


def write_ledger(rows: Sequence[TimingRow], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in rows:
            f.write(f"{r.id}\t{r.audio_seconds:.6f}\t{r.decode_seconds:.9f}\n")


# ---------------------------------------------------------------------------
# spikes versus token boundaries
# ---------------------------------------------------------------------------

SILENCE = -1


@dataclass
class SpikeReport:
    positions: list[int]            # encoder frames
    labels: list[int]               # token index, or SILENCE
    silence_gap_hits: int = 0       # spikes inside a silence gap longer than the limit

    @property
    def inside_fraction(self) -> float:
        if not self.labels:
            return 1.0
        return sum(k != SILENCE for k in self.labels) / len(self.labels)


def _silence_gaps(boundaries: Sequence[tuple[int, int]], frames: int) -> list[tuple[int, int]]:
    gaps, last = [], 0
    for s, e in boundaries:
        if s > last:
            gaps.append((last, s))
        last = e
    if frames > last:
        gaps.append((last, frames))
    return gaps


def spike_boundary_report(positions: Sequence[int], boundaries: Sequence[tuple[int, int]],
                          frames: int | None = None, long_gap: int = 4) -> SpikeReport:
    """Classify each trigger frame by the token interval it overlaps.

    Trigger frame t stands for feature frames [4t, 4t + 4); it is inside
    token k when that span overlaps token k's half-open interval. Spikes whose
    span lies within a silence gap longer than ``long_gap`` frames are also
    counted in ``silence_gap_hits``.
    """
    labels = []
    hits = 0
    frames = frames if frames is not None else (boundaries[-1][1] if boundaries else 0)
    gaps = [g for g in _silence_gaps(boundaries, frames) if g[1] - g[0] > long_gap]
    for t in positions:
        lo, hi = SUBSAMPLING * int(t), SUBSAMPLING * int(t) + SUBSAMPLING
        label = SILENCE
        for k, (s, e) in enumerate(boundaries):
            if lo < e and s < hi:
                label = k
                break
        labels.append(label)
        if label == SILENCE and any(s <= lo and min(hi, frames) <= e for s, e in gaps):
            hits += 1
    return SpikeReport([int(t) for t in positions], labels, hits)


# ---------------------------------------------------------------------------
# attention export
# ---------------------------------------------------------------------------

def export_attention(model, feat, layer: int, head: int) -> np.ndarray:
    """Source-attention weights (T' x T_enc) of one decoder layer and head
    from a spike-triggered pass; layers and heads count from 0."""
    if not 0 <= layer < model.cfg.n_dec_blocks:
        raise IndexError(f"layer {layer} outside [0, {model.cfg.n_dec_blocks})")
    if not 0 <= head < model.cfg.n_heads:
        raise IndexError(f"head {head} outside [0, {model.cfg.n_heads})")
    weights: list[np.ndarray] = []
    _, trig, _ = model.forward_st_nat(feat, src_weights_out=weights)
    if not weights:
        return np.zeros((0, model.encode(feat).shape[0]), dtype=np.float32)
    return np.asarray(weights[layer][head], dtype=np.float32)
