"""Causal character transformer LM for shallow fusion.

Input ids are the model vocabulary plus one extra BOS row (id ``V``) in the
embedding table; outputs are distributions over the ``V`` model ids, so EOS
is predictable and PAD/UNK are simply never targets.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .layers import BlockParams, LayerNorm, Linear, Module, encoder_block, positional_embedding
from .network import key_mask, load_checkpoint, load_state, save_checkpoint
from .numerics import (AdamState, Graph, NonFiniteError, Tensor, adam_step, check_finite,
                       log_softmax, mul, sum_, take)
from .train import lr_schedule

log = logging.getLogger(__name__)

MAGIC = b"STLM"


@dataclass
class LmConfig:
    vocab_size: int
    n_blocks: int = 2
    n_heads: int = 4
    d_m: int = 64
    d_ff: int = 128
    context: int = 128
    dropout: float = 0.1

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        if self.d_m % self.n_heads:
            raise ValueError(f"d_m={self.d_m} not divisible by n_heads={self.n_heads}")
        if self.context < 2:
            raise ValueError("context must hold BOS and at least one token")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LmConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class LmTrainConfig:
    epochs: int = 20
    batch_size: int = 32
    warmup: int = 200
    lr_scale: float = 1.0


def causal_mask(lengths: np.ndarray, width: int) -> np.ndarray:
    """(B, 1, W, W): query i may see keys j <= i that are not padding."""
    tri = np.tril(np.ones((width, width), dtype=bool))
    return tri[None, None] & key_mask(lengths, width)


class TransformerLM(Module):
    def __init__(self, cfg: LmConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.d_m
        self.embed = Tensor(rng.normal(0, d ** -0.5, (cfg.vocab_size + 1, d)).astype(dtype),
                            requires_grad=True)
        self.blocks = [BlockParams(d, cfg.n_heads, cfg.d_ff, rng, dtype=dtype)
                       for _ in range(cfg.n_blocks)]
        self.norm = LayerNorm(d, dtype)
        self.out_proj = Linear(d, cfg.vocab_size, rng, dtype)
        # zero output weights: training starts from the uniform distribution
        self.out_proj.weight.data[...] = 0
        self.drop_rng: np.random.Generator | None = None

    @property
    def bos(self) -> int:
        return self.cfg.vocab_size

    @property
    def dtype(self):
        return self.out_proj.weight.dtype

    def forward(self, ids: np.ndarray, lengths=None) -> Tensor:
        """``ids`` is ``(L,)`` or ``(B, L)`` starting with BOS; returns
        next-token log-probs of the same leading shape plus ``V``."""
        ids = np.asarray(ids, dtype=np.int64)
        width = ids.shape[-1]
        if width > self.cfg.context:
            raise ValueError(f"input of {width} ids exceeds context {self.cfg.context}")
        x = take(self.embed, ids) * math.sqrt(self.cfg.d_m)
        x = x + positional_embedding(width, self.cfg.d_m, self.dtype)
        if lengths is None:
            mask = np.tril(np.ones((width, width), dtype=bool))
        else:
            mask = causal_mask(np.asarray(lengths), width)
        drop = self.cfg.dropout if self.drop_rng is not None else 0.0
        for blk in self.blocks:
            x = encoder_block(x, blk, mask, drop, self.drop_rng)
        return log_softmax(self.out_proj(self.norm(x)), axis=-1)

    def score_step(self, prefix: Sequence[int]) -> np.ndarray:
        """log p(next | prefix) over the ``V`` ids. Prefixes longer than the
        context drop their oldest tokens."""
        keep = self.cfg.context - 1
        tail = list(prefix)[-keep:] if len(prefix) > keep else list(prefix)
        out = self.forward(np.array([self.bos] + tail, dtype=np.int64))
        return out.data[-1].astype(np.float64)

    def sequence_logp(self, tokens: Sequence[int], eos: int) -> float:
        """log p(tokens + EOS); sequences must fit the context."""
        ids = np.array([self.bos] + list(tokens), dtype=np.int64)
        tgt = list(tokens) + [eos]
        out = self.forward(ids).data.astype(np.float64)
        return float(out[np.arange(len(tgt)), tgt].sum())

    def save(self, path) -> None:
        save_checkpoint(path, MAGIC, self.cfg.to_dict(), self.named_parameters())

    @classmethod
    def load(cls, path) -> "TransformerLM":
        cfg, tensors = load_checkpoint(path, MAGIC)
        model = cls(LmConfig.from_dict(cfg))
        load_state(model, tensors)
        return model


def _lm_batch(seqs: Sequence[Sequence[int]], bos: int, eos: int, pad: int):
    width = max(len(s) for s in seqs) + 1
    ids = np.full((len(seqs), width), pad, dtype=np.int64)
    tgt = np.full((len(seqs), width), pad, dtype=np.int64)
    lens = np.zeros(len(seqs), dtype=np.int64)
    for b, s in enumerate(seqs):
        ids[b, : len(s) + 1] = [bos] + list(s)
        tgt[b, : len(s) + 1] = list(s) + [eos]
        lens[b] = len(s) + 1
    return ids, tgt, lens


def lm_loss(model: TransformerLM, seqs: Sequence[Sequence[int]], eos: int, pad: int) -> Tensor:
    """Mean per-token NLL (EOS included) over a batch of sequences."""
    ids, tgt, lens = _lm_batch(seqs, model.bos, eos, pad)
    logp = model.forward(ids, lens)
    valid = (np.arange(ids.shape[1])[None, :] < lens[:, None])
    onehot = np.zeros(logp.shape, dtype=model.dtype)
    b, t = np.nonzero(valid)
    onehot[b, t, tgt[b, t]] = 1.0
    return sum_(mul(logp, Tensor(onehot))) * (-1.0 / valid.sum())


def lm_train(corpus: Sequence[Sequence[int]], cfg: LmConfig, tcfg: LmTrainConfig, seed: int,
             eos: int, pad: int) -> tuple[TransformerLM, list[float]]:
    """Train on token-id sequences; returns the model and per-step losses."""
    seqs = [list(s)[: cfg.context - 1] for s in corpus]
    if not seqs:
        raise ValueError("empty LM corpus")
    model = TransformerLM(cfg, seed=seed)
    model.drop_rng = np.random.default_rng([seed, 1])
    params = model.parameters()
    state = AdamState.for_params(params)
    losses = []
    step = 0
    for epoch in range(1, tcfg.epochs + 1):
        order = np.random.default_rng([seed, 3, epoch]).permutation(len(seqs))
        for i in range(0, len(order), tcfg.batch_size):
            step += 1
            batch = [seqs[j] for j in order[i: i + tcfg.batch_size]]
            model.zero_grad()
            with Graph() as g:
                loss = lm_loss(model, batch, eos, pad)
            if not math.isfinite(loss.item()):
                raise NonFiniteError(f"LM loss diverged at step {step}")
            g.backward(loss)
            grads = [p.grad for p in params]
            check_finite(*grads, what=f"LM gradients at step {step}")
            adam_step(params, grads, state, lr_schedule(step, tcfg.warmup, cfg.d_m, tcfg.lr_scale))
            losses.append(loss.item())
        log.info("lm epoch %d loss %.4f", epoch, losses[-1])
    model.drop_rng = None
    return model, losses


def perplexity(model: TransformerLM, corpus: Sequence[Sequence[int]], eos: int) -> float:
    total = n = 0
    for s in corpus:
        s = list(s)[: model.cfg.context - 1]
        total -= model.sequence_logp(s, eos)
        n += len(s) + 1
    return math.exp(total / n)
