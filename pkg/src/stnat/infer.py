"""Decoding: greedy, LM-fused beam search and timed batch decoding."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Utterance, Vocab
from .evaluation import TimingRow, audio_seconds
from .network import MASKED, STNAT

LmStep = Callable[[list[int]], np.ndarray]


@dataclass
class Hypothesis:
    tokens: list[int]
    nat_logp: float = 0.0
    lm_logp: float = 0.0
    lam: float = 0.0
    finished: bool = False

    @property
    def combined(self) -> float:
        return self.nat_logp + self.lam * self.lm_logp


def truncate_at(tokens: Sequence[int], eos: int) -> list[int]:
    out = []
    for k in tokens:
        if k == eos:
            break
        out.append(int(k))
    return out


def nat_log_probs(model: STNAT, feat, beta: float | None = None) -> np.ndarray:
    """One encoder pass and one decoder pass; ``(T', V)`` log-probs."""
    if model.cfg.mode == MASKED:
        out = model.forward_masked_nat(feat)
    else:
        _, _, out = model.forward_st_nat(feat, beta)
    return out.data


def greedy_tokens(logp: np.ndarray, eos: int) -> list[int]:
    """Argmax per position (lowest id on ties), cut at the first EOS."""
    if logp.shape[0] == 0:
        return []
    return truncate_at(np.argmax(logp, axis=-1), eos)


def greedy_decode(model: STNAT, feat, beta: float | None = None) -> list[int]:
    return greedy_tokens(nat_log_probs(model, feat, beta), model.cfg.vocab_size - 1)


def beam_search(logp: np.ndarray, eos: int, beam: int = 5, lam: float = 0.0,
                lm_step: LmStep | None = None) -> Hypothesis:
    """Position-synchronous search over the ``T'`` NAT slots.

    Each active hypothesis proposes its ``min(beam, V)`` best next tokens
    under ``nat + lam * lm``; the ``beam`` best of all proposals survive.
    Choosing EOS finishes a hypothesis (the LM pays for EOS); so does reaching
    slot ``T'``. Every term is a log-probability scaled by ``lam >= 0``, so
    scores never rise and the search stops once the best finished hypothesis
    is at least as good as every active one.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    T, V = logp.shape
    use_lm = lm_step is not None and lam > 0
    active = [Hypothesis([], lam=lam)]
    done: list[Hypothesis] = []
    width = min(beam, V)
    for i in range(T):
        row = logp[i].astype(np.float64)
        cands = []
        for h in active:
            lm = lm_step(h.tokens) if use_lm else None
            score = row + lam * lm if use_lm else row
            # stable sort of -score: equal scores keep the lower id first
            top = np.argsort(-score, kind="stable")[:width]
            for k in top:
                k = int(k)
                cands.append(Hypothesis(
                    h.tokens + [k],
                    h.nat_logp + float(row[k]),
                    h.lm_logp + (float(lm[k]) if use_lm else 0.0),
                    lam,
                    finished=(k == eos)))
        cands.sort(key=lambda c: -c.combined)
        active = []
        for c in cands[:beam]:
            if c.finished:
                c.tokens = c.tokens[:-1]
                done.append(c)
            else:
                active.append(c)
        if not active:
            break
        if done and max(d.combined for d in done) >= max(a.combined for a in active):
            active = []
            break
    for a in active:
        a.finished = True
        done.append(a)
    if not done:
        return Hypothesis([], lam=lam, finished=True)
    best = done[0]
    for d in done[1:]:
        if d.combined > best.combined:
            best = d
    return best


def lm_step_fn(lm) -> LmStep:
    return lm.score_step


def beam_decode(model: STNAT, lm, feat, lam: float = 0.0, beam: int = 5,
                beta: float | None = None) -> Hypothesis:
    logp = nat_log_probs(model, feat, beta)
    step = lm.score_step if lm is not None else None
    return beam_search(logp, model.cfg.vocab_size - 1, beam, lam, step)


@dataclass
class DecodeResult:
    hypotheses: dict[str, list[int]]
    ledger: list[TimingRow]
    lengths: dict[str, int] = field(default_factory=dict)     # T' per utterance
    failures: dict[str, str] = field(default_factory=dict)


def batch_decode(model: STNAT, utts: Sequence[Utterance], lm=None, lam: float = 0.0,
                 beam: int = 1, beta: float | None = None) -> DecodeResult:
    """Decode utterances one at a time. The ledger times only the model
    work (encoder, decoder, search); I/O and scoring are outside it."""
    model.eval()
    eos = model.cfg.vocab_size - 1
    res = DecodeResult({}, [])
    step = lm.score_step if lm is not None else None
    for u in utts:
        try:
            t0 = time.perf_counter()
            logp = nat_log_probs(model, u.features, beta)
            if beam == 1 and (lam == 0 or lm is None):
                toks = greedy_tokens(logp, eos)
            else:
                toks = beam_search(logp, eos, beam, lam, step).tokens
            dt = time.perf_counter() - t0
        except (ValueError, FloatingPointError) as e:
            res.failures[u.id] = str(e)
            continue
        res.hypotheses[u.id] = toks
        res.lengths[u.id] = int(logp.shape[0])
        res.ledger.append(TimingRow(u.id, audio_seconds(u.frames), dt))
    return res


def write_hypotheses(hyps: dict[str, list[int]], vocab: Vocab, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for uid, toks in hyps.items():
            f.write(f"{uid}\t{vocab.decode(toks)}\n")
