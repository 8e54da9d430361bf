import numpy as np
import pytest

from stnat.data import Utterance
from stnat.evaluation import rtf
from stnat.infer import (Hypothesis, batch_decode, beam_decode, beam_search, greedy_decode,
                         greedy_tokens, nat_log_probs, write_hypotheses)
from stnat.lm import LmConfig, LmTrainConfig, TransformerLM, lm_train
from stnat.network import MASKED, STNAT

from conftest import tiny_config
from oracles import exhaustive_best

V = 7
EOS = V - 1
A, B, C = 0, 1, 2


def onehot_rows(labels, v=V):
    lp = np.full((len(labels), v), -30.0)
    lp[np.arange(len(labels)), labels] = 0.0
    return lp


def random_logp(rng, T, v=V, scale=2.0):
    z = rng.standard_normal((T, v)) * scale
    return z - np.log(np.exp(z).sum(1, keepdims=True))


def test_greedy_truncation_rules():
    assert greedy_tokens(onehot_rows([A, B, EOS, C]), EOS) == [A, B]
    assert greedy_tokens(onehot_rows([A, B, C]), EOS) == [A, B, C]
    assert greedy_tokens(np.zeros((0, V)), EOS) == []


def test_greedy_ties_lowest_id():
    lp = np.log(np.full((2, V), 1.0 / V))
    assert greedy_tokens(lp, EOS) == [0, 0]


def test_hypothesis_combined():
    h = Hypothesis([1, 2], nat_logp=-1.5, lm_logp=-4.0, lam=0.25)
    assert h.combined == -1.5 + 0.25 * -4.0


def test_beam1_lambda0_equals_greedy_random(rng):
    for _ in range(100):
        T = int(rng.integers(0, 9))
        lp = random_logp(rng, T).astype(np.float32)
        if T and rng.random() < 0.3:
            lp[:, 3] = lp[:, 1]          # exact ties
        assert beam_search(lp, EOS, beam=1, lam=0.0).tokens == greedy_tokens(lp, EOS)


def test_beam1_lambda0_equals_greedy_models(rng):
    for seed in range(5):
        m = STNAT(tiny_config(vocab_size=V), seed=seed)
        for _ in range(4):
            x = rng.standard_normal((int(rng.integers(8, 40)), 6)).astype(np.float32)
            assert beam_decode(m, None, x, lam=0.0, beam=1, beta=0.2).tokens == \
                greedy_decode(m, x, beta=0.2)


class TableLM:
    """Fixed random next-token table keyed by prefix; stands in for an LM."""

    def __init__(self, v, seed):
        self.v, self.seed, self.cache = v, seed, {}

    def score_step(self, prefix):
        key = tuple(prefix)
        if key not in self.cache:
            rng = np.random.default_rng([self.seed, len(key)] + list(key))
            z = rng.standard_normal(self.v) * 1.5
            self.cache[key] = z - np.log(np.exp(z).sum())
        return self.cache[key]


def test_wide_beam_equals_exhaustive(rng):
    for case in range(40):
        v = int(rng.integers(2, 6))
        T = int(rng.integers(1, 4))
        eos = v - 1
        lp = random_logp(rng, T, v)
        lam = float(rng.choice([0.0, 0.3, 1.0, 2.5]))
        lm = TableLM(v, case)
        hyp = beam_search(lp, eos, beam=v ** T, lam=lam, lm_step=lm.score_step)
        best, toks = exhaustive_best(lp, eos, lam, lm.score_step)
        assert hyp.combined == pytest.approx(best, abs=1e-9)
        assert hyp.tokens == toks


def test_wide_beam_with_real_lm(rng):
    lm = TransformerLM(LmConfig(vocab_size=5, n_blocks=1, d_m=8, n_heads=2, d_ff=8, dropout=0.0),
                       seed=1, dtype=np.float64)
    lm.out_proj.weight.data = rng.standard_normal(lm.out_proj.weight.shape)
    for _ in range(10):
        lp = random_logp(rng, 3, 5)
        hyp = beam_search(lp, 4, beam=125, lam=0.7, lm_step=lm.score_step)
        best, toks = exhaustive_best(lp, 4, 0.7, lm.score_step)
        assert hyp.combined == pytest.approx(best, abs=1e-9) and hyp.tokens == toks


def test_strong_lm_wins_on_flat_nat(rng):
    cfg = LmConfig(vocab_size=V, n_blocks=1, d_m=16, n_heads=2, d_ff=16, context=8, dropout=0.0)
    sentence = [3, 1, 4]
    lm, _ = lm_train([sentence], cfg, LmTrainConfig(epochs=80, batch_size=1, warmup=10), 0, EOS, 4)
    for _ in range(5):
        lp = random_logp(rng, 5, scale=0.05)
        assert beam_search(lp, EOS, beam=5, lam=5.0, lm_step=lm.score_step).tokens == sentence


def test_beam_finalizes_on_eos():
    lp = onehot_rows([A, EOS, B, C])
    hyp = beam_search(lp, EOS, beam=3)
    assert hyp.tokens == [A] and hyp.finished


def test_beam_argument_checks():
    with pytest.raises(ValueError):
        beam_search(np.zeros((1, V)), EOS, beam=0)
    with pytest.raises(ValueError):
        beam_search(np.zeros((1, V)), EOS, lam=-1.0)


def test_one_decoder_pass_per_utterance(rng):
    m = STNAT(tiny_config(vocab_size=V), seed=0)
    lm = TransformerLM(LmConfig(vocab_size=V, n_blocks=1, d_m=8, n_heads=2, d_ff=8), seed=0)
    for _ in range(6):
        x = rng.standard_normal((int(rng.integers(4, 40)), 6)).astype(np.float32)
        for decode in (lambda: greedy_decode(m, x, beta=0.1),
                       lambda: beam_decode(m, lm, x, lam=0.5, beam=5, beta=0.1)):
            before = m.decoder_calls
            decode()
            assert m.decoder_calls == before + 1


def test_nat_log_probs_masked_mode(rng):
    m = STNAT(tiny_config(vocab_size=V, mode=MASKED, fixed_mask_len=9), seed=0)
    assert nat_log_probs(m, rng.standard_normal((20, 6)).astype(np.float32)).shape == (9, V)


def test_batch_decode_ledger_and_failures(rng, tmp_path):
    m = STNAT(tiny_config(vocab_size=V), seed=0)
    utts = [Utterance(f"u{i}", rng.standard_normal((20 + i, 6)).astype(np.float32), [0])
            for i in range(4)]
    utts.append(Utterance("empty", np.zeros((0, 6), np.float32), [0]))
    res = batch_decode(m, utts, beta=0.2)
    assert set(res.failures) == {"empty"}
    assert len(res.ledger) == len(res.hypotheses) == 4
    assert [r.audio_seconds for r in res.ledger] == pytest.approx([0.2, 0.21, 0.22, 0.23])
    report = rtf(res.ledger)
    assert report.decode_seconds == pytest.approx(sum(r.decode_seconds for r in res.ledger))
    from stnat.data import synth_vocab
    vocab = synth_vocab(4)
    write_hypotheses({"a": [0, 1], "b": []}, vocab, tmp_path / "h.txt")
    assert (tmp_path / "h.txt").read_text() == "a\t" + vocab.decode([0, 1]) + "\nb\t\n"
