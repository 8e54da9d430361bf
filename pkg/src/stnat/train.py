"""Joint CTC + cross-entropy training with the spike-conditioned branch rule,
warmup schedule, time/frequency masking and checkpoint averaging."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .ctc import PosteriorGrid, TriggerSet, ctc_loss, ctc_nll_batch
from .data import Batch, FormatError, Utterance, make_batches
from .layers import front_end_lengths
from .network import SPIKE, STNAT, ModelConfig, load_checkpoint, save_checkpoint
from .numerics import AdamState, Graph, NonFiniteError, Tensor, adam_step, check_finite, take

log = logging.getLogger(__name__)

JOINT, CTC_ONLY = "joint", "ctc-only"


@dataclass
class TrainConfig:
    alpha: float = 0.6
    beta: float = 0.3
    warmup: int = 400
    lr_scale: float = 1.0
    epochs: int = 80
    batch_size: int = 16
    n_time_masks: int = 2
    max_time_width: float = 0.1     # fraction of the utterance's frames
    n_freq_masks: int = 1
    max_freq_width: int = 8
    average_last_k: int = 20
    sort_by_length: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha={self.alpha} outside [0, 1]")
        if self.warmup < 1:
            raise ValueError("warmup must be >= 1")
        if self.average_last_k < 1:
            raise ValueError("average_last_k must be >= 1")


@dataclass
class LossReport:
    total: float
    ctc: float
    ce: float | None
    branch: str
    t_pred: int
    t_ref: int


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

def _coerce(raw: str, typ):
    if typ in (bool, "bool"):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ in (int, "int"):
        return int(raw)
    if typ in (float, "float"):
        return float(raw)
    return raw


def _field_types(cls) -> dict:
    return {f.name: f.type for f in dataclasses.fields(cls)}


def read_config(path) -> dict:
    """Parse a flat ``key = value`` file. ``#`` starts a comment."""
    known = {**_field_types(ModelConfig), **_field_types(TrainConfig)}
    out = {}
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{n}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise FormatError(f"{path}:{n}: unknown key {key!r}")
            try:
                out[key] = _coerce(val, known[key])
            except ValueError as e:
                raise FormatError(f"{path}:{n}: {e}") from e
    return out


def split_config(values: dict, vocab_size: int) -> tuple[ModelConfig, TrainConfig]:
    m_names = set(_field_types(ModelConfig))
    t_names = set(_field_types(TrainConfig))
    mkw = {k: v for k, v in values.items() if k in m_names}
    mkw["vocab_size"] = vocab_size
    tkw = {k: v for k, v in values.items() if k in t_names}
    return ModelConfig(**mkw), TrainConfig(**tkw)


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------

def build_ce_target(ref: Sequence[int], t_pred: int, eos: int) -> list[int]:
    """Reference followed by EOS up to ``t_pred`` slots."""
    if t_pred < len(ref):
        raise ValueError(f"predicted length {t_pred} < reference length {len(ref)}; "
                         "use the CTC-only branch")
    return list(ref) + [eos] * (t_pred - len(ref))


def joint_loss(grid: PosteriorGrid, trig: TriggerSet, dec_logp: Tensor, ref: Sequence[int],
               alpha: float, eos: int) -> tuple[Tensor, LossReport]:
    """alpha * CTC + (1 - alpha) * CE when T' >= T, otherwise CTC alone.

    CTC is normalised by the reference length and CE is the mean over the T'
    decoder slots.
    """
    T, Tp = len(ref), len(trig)
    l_ctc = ctc_loss(grid, ref, normalize=True)
    if Tp < T:
        return l_ctc, LossReport(l_ctc.item(), l_ctc.item(), None, CTC_ONLY, Tp, T)
    tgt = build_ce_target(ref, Tp, eos)
    l_ce = -take(dec_logp, (np.arange(Tp), np.asarray(tgt))).mean()
    total = l_ctc * alpha + l_ce * (1.0 - alpha)
    return total, LossReport(total.item(), l_ctc.item(), l_ce.item(), JOINT, Tp, T)


def batch_loss(model: STNAT, feats: np.ndarray, lengths: np.ndarray,
               refs: Sequence[Sequence[int]], alpha: float, beta: float,
               eos: int) -> tuple[Tensor, list[LossReport]]:
    """Mean per-utterance joint loss over a padded batch.

    The branch is chosen per utterance; only joint-branch utterances are sent
    through the decoder, so CTC-only utterances contribute no decoder gradient.
    """
    B = len(refs)
    x = Tensor(feats.astype(model.dtype))
    enc = model.encode(x, lengths)
    enc_len = front_end_lengths(lengths)
    ctc_lp = model.ctc_log_probs(enc)
    tlen = np.array([len(r) for r in refs], dtype=np.float64)
    ctc = ctc_nll_batch(ctc_lp, enc_len, refs) * Tensor((1.0 / tlen).astype(model.dtype))
    positions = model.batch_positions(ctc_lp, enc_len, beta)
    joint = [b for b in range(B) if len(positions[b]) >= len(refs[b])]

    per_utt = ctc
    ce_vals: dict[int, float] = {}
    if joint:
        jb = np.asarray(joint)
        enc_j = take(enc, jb)
        dec_in, dec_len = model.decoder_inputs(enc_j, [positions[b] for b in joint])
        logp = model.decode_parallel(dec_in, enc_j, dec_len, enc_len[jb])
        width = logp.shape[1]
        tgt = np.full((len(joint), width), eos, dtype=np.int64)
        for i, b in enumerate(joint):
            tgt[i, : len(refs[b])] = refs[b]
        picked = take(logp, (np.arange(len(joint))[:, None], np.arange(width)[None, :], tgt))
        valid = (np.arange(width)[None, :] < dec_len[:, None]).astype(model.dtype)
        ce = -(picked * Tensor(valid / dec_len[:, None].astype(model.dtype))).sum(axis=1)
        for i, b in enumerate(joint):
            ce_vals[b] = float(ce.data[i])
        # scatter CE back into a length-B vector; CTC-only rows keep weight 1 on CTC
        scatter = np.zeros((B, len(joint)), dtype=model.dtype)
        scatter[jb, np.arange(len(joint))] = 1.0
        w_ctc = np.ones(B, dtype=model.dtype)
        w_ctc[jb] = alpha
        per_utt = ctc * Tensor(w_ctc) + (Tensor(scatter) @ ce.reshape(-1, 1)).reshape(B) * (1.0 - alpha)
    loss = per_utt.mean()

    reports = []
    for b in range(B):
        branch = JOINT if b in ce_vals else CTC_ONLY
        reports.append(LossReport(float(per_utt.data[b]), float(ctc.data[b]), ce_vals.get(b),
                                  branch, len(positions[b]), len(refs[b])))
    return loss, reports


def masked_batch_loss(model: STNAT, feats: np.ndarray, lengths: np.ndarray,
                      refs: Sequence[Sequence[int]], eos: int) -> tuple[Tensor, list[LossReport]]:
    """Cross-entropy of the fixed-length mask decoder against EOS-padded refs."""
    L = model.cfg.fixed_mask_len
    B = len(refs)
    if max(len(r) for r in refs) > L:
        raise ValueError(f"reference longer than the fixed decoder length {L}")
    enc = model.encode(Tensor(feats.astype(model.dtype)), lengths)
    enc_len = front_end_lengths(lengths)
    logp = model.decode_parallel(model.mask_inputs((B,)), enc, None, enc_len)
    tgt = np.array([build_ce_target(r, L, eos) for r in refs])
    picked = take(logp, (np.arange(B)[:, None], np.arange(L)[None, :], tgt))
    per_utt = -picked.mean(axis=1)
    reports = [LossReport(float(per_utt.data[b]), 0.0, float(per_utt.data[b]), JOINT, L, len(refs[b]))
               for b in range(B)]
    return per_utt.mean(), reports


# ---------------------------------------------------------------------------
# schedule and augmentation
# ---------------------------------------------------------------------------

def lr_schedule(step: int, warmup: int, d_m: int, scale: float = 1.0) -> float:
    """scale * d_m^-0.5 * min(step^-0.5, step * warmup^-1.5)."""
    if step < 1:
        raise ValueError("step counts from 1")
    return scale * d_m ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def spec_mask(feat: np.ndarray, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Zero random time bands and frequency bands of a copy of ``feat``."""
    out = feat.copy()
    T, F = out.shape
    max_t = int(cfg.max_time_width * T)
    for _ in range(cfg.n_time_masks):
        w = int(rng.integers(0, max_t + 1))
        s = int(rng.integers(0, T - w + 1))
        out[s:s + w] = 0
    max_f = min(cfg.max_freq_width, F)
    for _ in range(cfg.n_freq_masks):
        w = int(rng.integers(0, max_f + 1))
        s = int(rng.integers(0, F - w + 1))
        out[:, s:s + w] = 0
    return out


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: STNAT
    checkpoints: list = field(default_factory=list)   # paths, or state dicts in memory
    metrics: list[dict] = field(default_factory=list)


def _augment(batch: Batch, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    feats = batch.features.copy()
    for b, n in enumerate(batch.frame_lengths):
        feats[b, :n] = spec_mask(feats[b, :n], cfg, rng)
    return feats


def train_loop(train_utts: Sequence[Utterance], model_cfg: ModelConfig, cfg: TrainConfig,
               seed: int, eos: int, pad: int, out_dir=None, metrics_path=None,
               on_epoch: Callable[[int, STNAT], None] | None = None) -> TrainResult:
    """Train from scratch; one checkpoint per epoch.

    Deterministic for a fixed seed: parameters, dropout, batching and
    augmentation each draw from their own generator derived from ``seed``.
    """
    if not train_utts:
        raise ValueError("empty training set")
    model = STNAT(model_cfg, seed=seed)
    model.train(np.random.default_rng([seed, 1]))
    params = model.parameters()
    state = AdamState.for_params(params)
    result = TrainResult(model)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    mlog = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    step = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            aug_rng = np.random.default_rng([seed, 2, epoch])
            batches = make_batches(train_utts, cfg.batch_size, seed * 100003 + epoch, pad,
                                   cfg.sort_by_length)
            for batch in batches:
                step += 1
                feats = _augment(batch, cfg, aug_rng)
                refs = [batch.target(b) for b in range(len(batch))]
                model.zero_grad()
                with Graph() as g:
                    if model_cfg.mode == SPIKE:
                        loss, reports = batch_loss(model, feats, batch.frame_lengths, refs,
                                                   cfg.alpha, cfg.beta, eos)
                    else:
                        loss, reports = masked_batch_loss(model, feats, batch.frame_lengths,
                                                          refs, eos)
                if not math.isfinite(loss.item()):
                    raise NonFiniteError(f"loss diverged at step {step}")
                g.backward(loss)
                grads = [p.grad for p in params]
                check_finite(*grads, what=f"gradients at step {step}")
                lr = lr_schedule(step, cfg.warmup, model_cfg.d_m, cfg.lr_scale)
                adam_step(params, grads, state, lr)
                rec = {
                    "epoch": epoch,
                    "step": step,
                    "lr": lr,
                    "loss": loss.item(),
                    "ctc": float(np.mean([r.ctc for r in reports])),
                    "ce": _mean_or_none([r.ce for r in reports]),
                    "joint_fraction": sum(r.branch == JOINT for r in reports) / len(reports),
                }
                result.metrics.append(rec)
                if mlog:
                    mlog.write(json.dumps(rec) + "\n")
            log.info("epoch %d step %d loss %.4f joint %.2f", epoch, step, rec["loss"],
                     rec["joint_fraction"])
            if out_dir is not None:
                path = out_dir / f"epoch_{epoch:03d}.ckpt"
                model.save(path)
                result.checkpoints.append(path)
            else:
                result.checkpoints.append(model.state())
            if on_epoch:
                on_epoch(epoch, model)
    finally:
        if mlog:
            mlog.close()
    model.eval()
    return result


def _mean_or_none(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


# ---------------------------------------------------------------------------
# averaging
# ---------------------------------------------------------------------------

def average_states(states: Sequence[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    if not states:
        raise ValueError("nothing to average")
    keys = set(states[0])
    for s in states[1:]:
        if set(s) != keys or any(s[k].shape != states[0][k].shape for k in keys):
            raise FormatError("checkpoints have different parameter layouts")
    return {k: (np.sum([s[k].astype(np.float64) for s in states], axis=0) / len(states))
            .astype(np.float32) for k in states[0]}


def average_checkpoints(paths: Sequence, magic: bytes = b"STNT") -> tuple[dict, dict[str, np.ndarray]]:
    """Elementwise mean of checkpoints written with identical configs."""
    if not paths:
        raise ValueError("need at least one checkpoint")
    loaded = [load_checkpoint(p, magic) for p in paths]
    cfg0 = loaded[0][0]
    for p, (cfg, _) in zip(paths, loaded):
        if cfg != cfg0:
            raise FormatError(f"{p}: config differs from {paths[0]}")
    return cfg0, average_states([t for _, t in loaded])


def write_averaged(paths: Sequence, out_path, magic: bytes = b"STNT") -> None:
    cfg, tensors = average_checkpoints(paths, magic)
    save_checkpoint(out_path, magic, cfg, tensors.items())
