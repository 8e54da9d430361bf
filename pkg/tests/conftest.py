import time
from dataclasses import dataclass

import numpy as np
import pytest

from stnat.data import Vocab, synth_corpus, synth_vocab
from stnat.network import STNAT, ModelConfig
from stnat.train import TrainResult, average_states, read_config, split_config, train_loop
from stnat.cli import _config_path


def tiny_config(vocab_size=7, **kw):
    base = dict(n_enc_blocks=1, n_dec_blocks=1, n_heads=2, d_m=8, d_ff=8, feat_dim=6,
                dropout=0.0)
    base.update(kw)
    return ModelConfig(vocab_size=vocab_size, **base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@dataclass
class ToyRun:
    vocab: Vocab
    train: list
    dev: list
    result: TrainResult
    model: STNAT            # averaged over the last k epochs
    seconds: float


@pytest.fixture(scope="session")
def toy_run() -> ToyRun:
    """The toy preset trained once on the 128/32 synthetic split."""
    vocab = synth_vocab(20)
    utts = synth_corpus(160, 20, seed=1)
    train, dev = utts[:128], utts[128:]
    model_cfg, train_cfg = split_config(read_config(_config_path("toy")), len(vocab))
    t0 = time.perf_counter()
    res = train_loop(train, model_cfg, train_cfg, seed=0, eos=vocab.eos, pad=vocab.pad)
    k = train_cfg.average_last_k
    model = STNAT(model_cfg)
    model.load_state(average_states(res.checkpoints[-k:]))
    model.eval()
    return ToyRun(vocab, train, dev, res, model, time.perf_counter() - t0)


ACCEPTANCE: list[str] = []


def record_acceptance(n: int, name: str, ok: bool, detail: str) -> None:
    """Log one criterion result; the lines are repeated in the run summary."""
    line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
