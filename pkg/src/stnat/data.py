"""Vocabulary, feature files, manifests, batching and the synthetic corpus.

File formats
------------
FMAT
    ``b"FMAT"``, u32 version (1), u32 rows, u32 cols, then ``rows*cols``
    float32 values, row-major, everything little-endian.
Manifest
    UTF-8 TSV ``id<TAB>feature-path<TAB>transcript``; relative feature paths
    resolve against the manifest's directory.
Vocab
    UTF-8, one token per line, line number (from 0) is the id. The last three
    ids are always ``<PAD>``, ``<UNK>``, ``<EOS>``.
Alignments
    UTF-8 TSV ``id<TAB>start-end start-end ...`` with half-open feature-frame
    intervals, one per transcript token.
"""

from __future__ import annotations

import os
import string
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, EOS = "<PAD>", "<UNK>", "<EOS>"
RESERVED = (PAD, UNK, EOS)
FEAT_DIM = 40
FRAME_SHIFT = 0.010

_FMAT_MAGIC = b"FMAT"
_FMAT_VERSION = 1
_FMAT_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    """Malformed file content."""


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[-3:] != list(RESERVED):
            tokens = [t for t in tokens if t not in RESERVED] + list(RESERVED)
        if len(set(tokens)) != len(tokens):
            raise FormatError("duplicate token in vocabulary")
        self.tokens = tokens
        self._index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    @property
    def pad(self) -> int:
        return len(self.tokens) - 3

    @property
    def unk(self) -> int:
        return len(self.tokens) - 2

    @property
    def eos(self) -> int:
        return len(self.tokens) - 1

    def encode(self, text: str) -> list[int]:
        return [self._index.get(ch, self.unk) for ch in text]

    def decode(self, ids: Iterable[int]) -> str:
        return "".join(self.tokens[i] for i in ids)

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f if line.rstrip("\n")])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(self.tokens) + "\n")


def synth_characters(n: int) -> list[str]:
    base = string.ascii_lowercase + string.ascii_uppercase + string.digits
    if n <= len(base):
        return list(base[:n])
    return list(base) + [chr(0x4E00 + i) for i in range(n - len(base))]


def synth_vocab(n_chars: int) -> Vocab:
    return Vocab(synth_characters(n_chars))


# ---------------------------------------------------------------------------
# utterances and batches
# ---------------------------------------------------------------------------

@dataclass
class Utterance:
    id: str
    features: np.ndarray
    transcript: list[int]
    boundaries: list[tuple[int, int]] | None = None

    @property
    def frames(self) -> int:
        return self.features.shape[0]

    @property
    def seconds(self) -> float:
        return self.frames * FRAME_SHIFT

    def validate(self) -> None:
        if self.boundaries is None:
            return
        if len(self.boundaries) != len(self.transcript):
            raise FormatError(f"{self.id}: {len(self.boundaries)} boundaries for "
                              f"{len(self.transcript)} tokens")
        last = 0
        for s, e in self.boundaries:
            if not (last <= s < e <= self.frames):
                raise FormatError(f"{self.id}: bad boundary interval ({s}, {e})")
            last = e


@dataclass
class Batch:
    ids: list[str]
    features: np.ndarray          # (B, T_max, F)
    frame_lengths: np.ndarray     # (B,)
    targets: np.ndarray           # (B, L_max), PAD-filled
    target_lengths: np.ndarray    # (B,)
    mask: np.ndarray              # (B, T_max), true on real frames

    def __len__(self) -> int:
        return len(self.ids)

    def target(self, b: int) -> list[int]:
        return self.targets[b, : self.target_lengths[b]].tolist()


def collate(utts: Sequence[Utterance], pad_id: int) -> Batch:
    lengths = np.array([u.frames for u in utts], dtype=np.int64)
    tlens = np.array([len(u.transcript) for u in utts], dtype=np.int64)
    feat_dim = utts[0].features.shape[1]
    feats = np.zeros((len(utts), lengths.max(), feat_dim), dtype=np.float32)
    targets = np.full((len(utts), max(1, tlens.max())), pad_id, dtype=np.int64)
    for b, u in enumerate(utts):
        feats[b, : u.frames] = u.features
        targets[b, : len(u.transcript)] = u.transcript
    mask = np.arange(lengths.max())[None, :] < lengths[:, None]
    return Batch([u.id for u in utts], feats, lengths, targets, tlens, mask)


def make_batches(utts: Sequence[Utterance], batch_size: int, seed: int, pad_id: int,
                 sort_by_length: bool = False) -> list[Batch]:
    """Shuffled mini-batches. With ``sort_by_length`` utterances of similar
    length share a batch and the batch order is shuffled instead."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(utts))
    if sort_by_length:
        order = sorted(order, key=lambda i: (utts[i].frames, i))
        chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
        chunks = [chunks[i] for i in rng.permutation(len(chunks))]
    else:
        chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    return [collate([utts[i] for i in c], pad_id) for c in chunks]


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

@dataclass
class SynthParams:
    min_tokens: int = 2
    max_tokens: int = 12
    min_segment: int = 4
    max_segment: int = 10
    max_silence: int = 6
    noise: float = 0.1
    feat_dim: int = FEAT_DIM
    render: str = "onset"
    onset_frames: int = 1


def token_templates(n_tokens: int, seed: int, feat_dim: int = FEAT_DIM) -> np.ndarray:
    return np.random.default_rng([seed, 0]).standard_normal((n_tokens, feat_dim))


def sustain_template(seed: int, feat_dim: int = FEAT_DIM) -> np.ndarray:
    return np.random.default_rng([seed, 2]).standard_normal(feat_dim)


def render_segment(template: np.ndarray, sustain: np.ndarray, n: int, p: SynthParams) -> np.ndarray:
    """Noise-free frames of one token.

    ``flat`` repeats the token template for the whole segment. ``onset``
    plays the template for the first ``onset_frames`` frames and then a
    sustain shared by every token, so identity is only audible at the onset
    (a consonant-vowel syllable in miniature).
    """
    frames = np.repeat(template[None, :], n, axis=0)
    if p.render == "onset":
        frames[p.onset_frames:] = sustain
    elif p.render != "flat":
        raise ValueError(f"unknown render style {p.render!r}")
    return frames


def synth_corpus(n_utts: int, vocab_size: int, seed: int,
                 params: SynthParams | None = None, prefix: str = "synth") -> list[Utterance]:
    """Speech-like utterances with known token boundaries.

    Each token id owns a fixed random template. An utterance is a random
    token sequence (consecutive tokens differ) rendered segment by segment,
    with zero-signal silence gaps before, between and after tokens, plus
    Gaussian noise on every frame.
    """
    if vocab_size < 2:
        raise ValueError("synthetic corpus needs at least 2 characters")
    p = params or SynthParams()
    templates = token_templates(vocab_size, seed, p.feat_dim)
    sustain = sustain_template(seed, p.feat_dim)
    rng = np.random.default_rng([seed, 1])
    utts = []
    for n in range(n_utts):
        length = int(rng.integers(p.min_tokens, p.max_tokens + 1))
        tokens = [int(rng.integers(vocab_size))]
        while len(tokens) < length:
            # draw from the other vocab_size - 1 ids
            k = int(rng.integers(vocab_size - 1))
            tokens.append(k + (k >= tokens[-1]))
        pieces, bounds, t = [], [], 0
        for tok in tokens:
            gap = int(rng.integers(0, p.max_silence + 1))
            pieces.append(np.zeros((gap, p.feat_dim)))
            t += gap
            seg = int(rng.integers(p.min_segment, p.max_segment + 1))
            pieces.append(render_segment(templates[tok], sustain, seg, p))
            bounds.append((t, t + seg))
            t += seg
        gap = int(rng.integers(0, p.max_silence + 1))
        pieces.append(np.zeros((gap, p.feat_dim)))
        feats = np.concatenate(pieces, axis=0)
        feats = feats + p.noise * rng.standard_normal(feats.shape)
        utts.append(Utterance(f"{prefix}{n:05d}", feats.astype(np.float32), tokens, bounds))
    return utts


# ---------------------------------------------------------------------------
# FMAT and manifests
# ---------------------------------------------------------------------------

def write_features(mat: np.ndarray, path) -> None:
    mat = np.asarray(mat)
    if mat.ndim != 2:
        raise FormatError(f"FMAT holds a matrix, got shape {mat.shape}")
    rows, cols = mat.shape
    with open(path, "wb") as f:
        f.write(_FMAT_HEADER.pack(_FMAT_MAGIC, _FMAT_VERSION, rows, cols))
        f.write(np.ascontiguousarray(mat, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _FMAT_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, rows, cols = _FMAT_HEADER.unpack_from(blob)
    if magic != _FMAT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != _FMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    need = rows * cols * 4
    have = len(blob) - _FMAT_HEADER.size
    if need > have:
        raise FormatError(f"{path}: payload has {have} bytes, header promises {need}")
    if need < have:
        raise FormatError(f"{path}: {have - need} trailing bytes")
    data = np.frombuffer(blob, dtype="<f4", offset=_FMAT_HEADER.size, count=rows * cols)
    return data.astype(np.float32).reshape(rows, cols)


def write_manifest(utts: Sequence[Utterance], vocab: Vocab, path, feat_dir) -> None:
    path = Path(path)
    feat_dir = Path(feat_dir)
    feat_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for u in utts:
        fp = feat_dir / f"{u.id}.fmat"
        write_features(u.features, fp)
        rel = os.path.relpath(fp, path.parent)
        lines.append(f"{u.id}\t{rel}\t{vocab.decode(u.transcript)}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_alignments(utts: Sequence[Utterance], path) -> None:
    rows = []
    for u in utts:
        spans = " ".join(f"{s}-{e}" for s, e in u.boundaries or [])
        rows.append(f"{u.id}\t{spans}")
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def read_alignments(path) -> dict[str, list[tuple[int, int]]]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                uid, spans = line.split("\t")
                out[uid] = [tuple(int(v) for v in s.split("-")) for s in spans.split()]
            except ValueError as e:
                raise FormatError(f"{path}:{n}: malformed alignment row") from e
    return out


def load_manifest(path, vocab: Vocab, alignments=None) -> list[Utterance]:
    """Read a manifest and its feature files.

    Characters outside ``vocab`` map to UNK. ``alignments`` is an optional
    alignment file whose intervals are attached as token boundaries.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    bounds = read_alignments(alignments) if alignments else {}
    utts, seen = [], set()
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != 3:
                raise FormatError(f"{path}:{n}: expected 3 tab-separated fields, got {len(cols)}")
            uid, fpath, text = cols
            if uid in seen:
                raise FormatError(f"{path}:{n}: duplicate utterance id {uid!r}")
            if not text:
                raise FormatError(f"{path}:{n}: empty transcript for {uid!r}")
            seen.add(uid)
            fp = Path(fpath)
            if not fp.is_absolute():
                fp = path.parent / fp
            u = Utterance(uid, read_features(fp), vocab.encode(text), bounds.get(uid))
            u.validate()
            utts.append(u)
    return utts


def read_transcripts(path) -> dict[str, str]:
    """``id<TAB>text`` or manifest rows; the last field is the text."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            uid, text = cols[0], (cols[-1] if len(cols) > 1 else "")
            if uid in out:
                raise FormatError(f"{path}:{n}: duplicate utterance id {uid!r}")
            out[uid] = text
    return out
