"""Brute-force reference implementations used as test oracles."""

import itertools

import numpy as np


def collapse(path):
    out, prev = [], None
    for k in path:
        if k != prev and k != 0:
            out.append(k)
        prev = k
    return out


def ctc_brute_nll(logp: np.ndarray, target) -> float:
    """-log sum over every frame labelling that collapses to ``target``."""
    T, C = logp.shape
    want = [k + 1 for k in target]
    total = -np.inf
    for path in itertools.product(range(C), repeat=T):
        if collapse(path) == want:
            total = np.logaddexp(total, sum(logp[t, k] for t, k in enumerate(path)))
    return -total


def random_log_grid(rng, T, C):
    z = rng.standard_normal((T, C)) * 2
    return z - np.log(np.exp(z).sum(1, keepdims=True))


def exhaustive_best(logp: np.ndarray, eos: int, lam: float, lm_step):
    """Best combined score over every token string the search can return.

    Candidates: any prefix of length < T' followed by EOS, or any EOS-free
    string of length T'.
    """
    T, V = logp.shape
    best, best_toks = -np.inf, None
    non_eos = [k for k in range(V) if k != eos]
    for n in range(T + 1):
        for toks in itertools.product(non_eos, repeat=n):
            toks = list(toks)
            seq = toks + ([eos] if n < T else [])
            score = 0.0
            for i, k in enumerate(seq):
                score += logp[i, k]
                if lam > 0:
                    score += lam * lm_step(seq[:i])[k]
            if score > best:
                best, best_toks = score, toks
    return best, best_toks


class BruteCTC:
    """Alignment enumeration with the path tables cached per (T, C)."""

    def __init__(self):
        self._paths = {}

    def _table(self, T, C):
        if (T, C) not in self._paths:
            paths = np.array(list(itertools.product(range(C), repeat=T)), dtype=np.int64)
            labels = [tuple(collapse(p)) for p in paths]
            self._paths[T, C] = (paths, labels)
        return self._paths[T, C]

    def nll(self, logp: np.ndarray, target) -> float:
        T, C = logp.shape
        paths, labels = self._table(T, C)
        want = tuple(k + 1 for k in target)
        keep = np.array([lab == want for lab in labels])
        if not keep.any():
            return np.inf
        scores = logp[np.arange(T), paths[keep]].sum(1)
        return -float(np.logaddexp.reduce(scores))
