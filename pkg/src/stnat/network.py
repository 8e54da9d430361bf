"""The spike-triggered NAT model, its masked fixed-length baseline mode, and
the checkpoint container shared with the language model.

Checkpoint layout (little-endian)::

    magic            4 bytes ("STNT" model, "STLM" language model)
    version          u32 (1)
    config length    u32, then that many bytes of UTF-8 JSON
    tensor count     u32
    per tensor:      u32 name length, UTF-8 name, u32 rank, rank x u32 extents,
                     prod(extents) float32 values
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ctc import PosteriorGrid, TriggerSet, gather_triggered, trigger, trigger_positions
from .data import FEAT_DIM, FormatError
from .layers import (
    BlockParams,
    FrontEndParams,
    LayerNorm,
    Linear,
    Module,
    conv_front_end,
    decoder_block,
    encoder_block,
    front_end_lengths,
    positional_embedding,
)
from .numerics import Tensor, log_softmax, take

SPIKE = "spike-triggered"
MASKED = "masked-fixed-length"
CKPT_VERSION = 1


@dataclass
class ModelConfig:
    vocab_size: int
    n_enc_blocks: int = 6
    n_dec_blocks: int = 6
    n_heads: int = 4
    d_m: int = 320
    d_ff: int = 640
    feat_dim: int = FEAT_DIM
    alpha: float = 0.6
    beta: float = 0.3
    dropout: float = 0.1
    mode: str = SPIKE
    fixed_mask_len: int = 60
    blank_bias: float = 0.0

    def __post_init__(self):
        if self.d_m % self.n_heads:
            raise ValueError(f"d_m={self.d_m} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha={self.alpha} outside [0, 1]")
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta={self.beta} outside (0, 1)")
        if self.mode not in (SPIKE, MASKED):
            raise ValueError(f"unknown mode {self.mode!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def count_parameters(cfg: ModelConfig) -> int:
    """Closed-form parameter count for ``cfg``."""
    d, f, V = cfg.d_m, cfg.d_ff, cfg.vocab_size
    front = (3 * cfg.feat_dim * d + d) + (3 * d * d + d)
    ffn = d * 2 * f + 2 * f + f * d + d
    enc_block = 2 * (2 * d) + 4 * d * d + ffn
    dec_block = 3 * (2 * d) + 8 * d * d + ffn
    n = front + cfg.n_enc_blocks * enc_block + 2 * d
    n += cfg.n_dec_blocks * dec_block + 2 * d
    n += d * V + V
    if cfg.mode == SPIKE:
        n += d * (V + 1) + V + 1
    else:
        n += d
    return n


class STNAT(Module):
    """Encoder, CTC head and non-autoregressive decoder.

    ``decoder_calls`` counts decoder forward passes; a spike-triggered decode
    of one utterance adds exactly one.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.d_m
        self.front = FrontEndParams(cfg.feat_dim, d, rng, dtype)
        self.enc = [BlockParams(d, cfg.n_heads, cfg.d_ff, rng, dtype=dtype)
                    for _ in range(cfg.n_enc_blocks)]
        self.enc_norm = LayerNorm(d, dtype)
        if cfg.mode == SPIKE:
            self.ctc_proj = Linear(d, cfg.vocab_size + 1, rng, dtype)
            # start blank-dominated so label posteriors grow as isolated spikes
            self.ctc_proj.bias.data[0] = cfg.blank_bias
        else:
            self.mask_embed = Tensor(rng.normal(0, 1, d).astype(dtype), requires_grad=True)
        self.dec = [BlockParams(d, cfg.n_heads, cfg.d_ff, rng, source_attention=True, dtype=dtype)
                    for _ in range(cfg.n_dec_blocks)]
        self.dec_norm = LayerNorm(d, dtype)
        self.out_proj = Linear(d, cfg.vocab_size, rng, dtype)
        self.decoder_calls = 0
        self.drop_rng: np.random.Generator | None = None

    # -- modes -----------------------------------------------------------------
    def train(self, rng: np.random.Generator) -> "STNAT":
        self.drop_rng = rng
        return self

    def eval(self) -> "STNAT":
        self.drop_rng = None
        return self

    @property
    def dtype(self):
        return self.out_proj.weight.dtype

    @property
    def _drop(self) -> float:
        return self.cfg.dropout if self.drop_rng is not None else 0.0

    def _input(self, feat) -> Tensor:
        if isinstance(feat, Tensor):
            return feat
        return Tensor(np.asarray(feat, dtype=self.dtype))

    # -- pieces ----------------------------------------------------------------
    def encode(self, feat, lengths=None) -> Tensor:
        """``(T, F)`` -> ``(ceil(T/4), d_m)``; batched ``(B, T, F)`` needs
        ``lengths`` so padded frames are masked out."""
        x = conv_front_end(self._input(feat), self.front, lengths)
        mask = None
        if lengths is not None:
            enc_len = front_end_lengths(lengths)
            mask = key_mask(enc_len, x.shape[-2])
        for blk in self.enc:
            x = encoder_block(x, blk, mask, self._drop, self.drop_rng)
        return self.enc_norm(x)

    def ctc_log_probs(self, enc: Tensor) -> Tensor:
        return log_softmax(self.ctc_proj(enc), axis=-1)

    def decode_parallel(self, dec_in: Tensor, enc: Tensor, dec_lengths=None, enc_lengths=None,
                        src_weights_out: list | None = None) -> Tensor:
        """One non-autoregressive pass: unmasked self-attention over the
        decoder slots, source attention over ``enc``. Returns log-probs."""
        self.decoder_calls += 1
        V = self.cfg.vocab_size
        if dec_in.shape[-2] == 0:
            return Tensor(np.zeros(dec_in.shape[:-1] + (V,), dtype=self.dtype))
        self_mask = None if dec_lengths is None else key_mask(dec_lengths, dec_in.shape[-2])
        src_mask = None if enc_lengths is None else key_mask(enc_lengths, enc.shape[-2])
        x = dec_in
        for blk in self.dec:
            x = decoder_block(x, enc, blk, self_mask, src_mask, self._drop, self.drop_rng,
                              src_weights_out)
        return log_softmax(self.out_proj(self.dec_norm(x)), axis=-1)

    def decoder_inputs(self, enc: Tensor, positions: list[np.ndarray]) -> tuple[Tensor, np.ndarray]:
        """Gather triggered encoder rows of a batch into ``(B, T'_max, d)``
        slots plus fresh target positions; unused slots are zero."""
        lens = np.array([len(p) for p in positions], dtype=np.int64)
        width = max(1, int(lens.max()) if len(lens) else 1)
        b_idx = np.repeat(np.arange(len(positions)), width).reshape(len(positions), width)
        t_idx = np.zeros((len(positions), width), dtype=np.int64)
        for b, p in enumerate(positions):
            t_idx[b, : len(p)] = p
        valid = np.arange(width)[None, :] < lens[:, None]
        x = take(enc, (b_idx, t_idx)) * Tensor(valid[..., None].astype(self.dtype))
        x = x + positional_embedding(width, self.cfg.d_m, self.dtype)
        return x, lens

    # -- whole passes ----------------------------------------------------------
    def forward_st_nat(self, feat, beta: float | None = None,
                       src_weights_out: list | None = None
                       ) -> tuple[PosteriorGrid, TriggerSet, Tensor]:
        """encode -> CTC head -> trigger -> gather (+positions) -> decode."""
        if self.cfg.mode != SPIKE:
            raise ValueError("model was built for the masked fixed-length mode")
        beta = self.cfg.beta if beta is None else beta
        enc = self.encode(feat)
        grid = PosteriorGrid(self.ctc_log_probs(enc))
        trig = trigger(grid, beta)
        dec_in = gather_triggered(enc, trig)
        dec_in = dec_in + positional_embedding(len(trig), self.cfg.d_m, self.dtype)
        out = self.decode_parallel(dec_in, enc, src_weights_out=src_weights_out)
        return grid, trig, out

    def forward_masked_nat(self, feat, src_weights_out: list | None = None) -> Tensor:
        """Decode ``fixed_mask_len`` copies of the learned mask embedding."""
        if self.cfg.mode != MASKED:
            raise ValueError("model was built for the spike-triggered mode")
        enc = self.encode(feat)
        return self.decode_parallel(self.mask_inputs(enc.shape[:-2]), enc,
                                    src_weights_out=src_weights_out)

    def mask_inputs(self, lead: tuple[int, ...]) -> Tensor:
        L = self.cfg.fixed_mask_len
        ones = Tensor(np.ones(lead + (L, 1), dtype=self.dtype))
        return ones * self.mask_embed + positional_embedding(L, self.cfg.d_m, self.dtype)

    def batch_positions(self, ctc_logp: Tensor, enc_lengths, beta: float) -> list[np.ndarray]:
        return [trigger_positions(ctc_logp.data[b, :n], beta)
                for b, n in enumerate(enc_lengths)]

    # -- persistence -----------------------------------------------------------
    def save(self, path) -> None:
        save_checkpoint(path, b"STNT", self.cfg.to_dict(), self.named_parameters())

    @classmethod
    def load(cls, path) -> "STNAT":
        cfg, tensors = load_checkpoint(path, b"STNT")
        model = cls(ModelConfig.from_dict(cfg))
        model.load_state(tensors)
        return model

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        load_state(self, tensors)


def key_mask(lengths, width: int) -> np.ndarray:
    """``(B, 1, 1, width)`` attention mask, true on real positions."""
    lengths = np.asarray(lengths)
    return (np.arange(width)[None, :] < lengths[:, None])[:, None, None, :]


def load_state(module: Module, tensors: dict[str, np.ndarray]) -> None:
    params = dict(module.named_parameters())
    if set(params) != set(tensors):
        missing = sorted(set(params) ^ set(tensors))
        raise FormatError(f"parameter names differ: {missing[:5]}")
    for name, p in params.items():
        arr = tensors[name]
        if arr.shape != p.shape:
            raise FormatError(f"{name}: shape {arr.shape} != {p.shape}")
        p.data = arr.astype(p.dtype).copy()


def save_checkpoint(path, magic: bytes, config: dict, named) -> None:
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    named = list(named)
    parts = [magic, struct.pack("<II", CKPT_VERSION, len(cfg)), cfg, struct.pack("<I", len(named))]
    for name, t in named:
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    try:
        if blob[:4] != magic:
            raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {magic!r}")
        version, n_cfg = struct.unpack_from("<II", blob, 4)
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        off = 12
        config = json.loads(blob[off:off + n_cfg].decode("utf-8"))
        off += n_cfg
        (count,) = struct.unpack_from("<I", blob, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<I", blob, off)
            shape = struct.unpack_from(f"<{rank}I", blob, off + 4)
            off += 4 + 4 * rank
            size = int(np.prod(shape))
            if off + 4 * size > len(blob):
                raise FormatError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(blob, "<f4", size, off).astype(np.float32).reshape(shape)
            off += 4 * size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: corrupt checkpoint ({e})") from e
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes")
    return config, tensors
