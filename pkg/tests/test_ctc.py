import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stnat.ctc import (CTCInfeasibleError, PosteriorGrid, TriggerSet, ctc_greedy_path, ctc_head,
                       ctc_loss, gather_triggered, min_frames, trigger, trigger_positions)
from stnat.layers import Linear
from stnat.numerics import Graph, Tensor, grad_check

from oracles import collapse, ctc_brute_nll, random_log_grid


def grid(lp):
    return PosteriorGrid(Tensor(np.asarray(lp, dtype=np.float64)))


def test_head_zero_weights_uniform(rng):
    proj = Linear(4, 6, rng, np.float64)
    proj.weight.data[...] = 0
    g = ctc_head(Tensor(rng.standard_normal((3, 4))), proj)
    assert np.allclose(g.blank_probs(), 1 / 6)
    assert g.vocab_size == 5 and g.frames == 3


def test_head_rows_normalize_and_grad(rng):
    proj = Linear(4, 6, rng, np.float64)
    g = ctc_head(Tensor(rng.standard_normal((5, 4)) * 10), proj)
    assert np.allclose(np.exp(g.log_probs.data).sum(1), 1, atol=1e-5)
    assert grad_check(lambda e: ctc_head(e, proj).log_probs, [Tensor(rng.standard_normal((3, 4)))]) <= 1e-5


def test_single_frame_single_label(rng):
    lp = random_log_grid(rng, 1, 4)
    assert ctc_loss(grid(lp), [1]).item() == pytest.approx(-lp[0, 2])


def test_two_frames_three_alignments(rng):
    lp = random_log_grid(rng, 2, 3)
    p = np.exp(lp)
    a, b = 1, 0   # token 0 is class 1; blank is class 0
    expected = -np.log(p[0, a] * p[1, a] + p[0, a] * p[1, b] + p[0, b] * p[1, a])
    assert ctc_loss(grid(lp), [0]).item() == pytest.approx(expected, abs=1e-12)


def test_uniform_grid_counts_paths():
    C = 4
    lp = np.full((4, C), -np.log(C))
    n_paths = sum(collapse(p) == [1, 2] for p in itertools.product(range(C), repeat=4))
    assert ctc_loss(grid(lp), [0, 1]).item() == pytest.approx(-np.log(n_paths * C ** -4.0))


def test_matches_brute_force_random(rng):
    for _ in range(60):
        T = int(rng.integers(1, 6))
        C = int(rng.integers(2, 5))
        L = int(rng.integers(1, 4))
        tgt = list(rng.integers(0, C - 1, L))
        lp = random_log_grid(rng, T, C)
        if T < min_frames(tgt):
            with pytest.raises(CTCInfeasibleError):
                ctc_loss(grid(lp), tgt)
            continue
        assert ctc_loss(grid(lp), tgt).item() == pytest.approx(ctc_brute_nll(lp, tgt), abs=1e-9)


def test_gradient_matches_fd(rng):
    tgt = [0, 0, 2]
    lp = Tensor(rng.standard_normal((6, 4)))
    assert grad_check(lambda z: ctc_loss(PosteriorGrid(z), tgt), [lp]) <= 1e-6


def test_normalized_loss_divides_by_label_count(rng):
    lp = random_log_grid(rng, 5, 4)
    full = ctc_loss(grid(lp), [0, 1, 2]).item()
    assert ctc_loss(grid(lp), [0, 1, 2], normalize=True).item() == pytest.approx(full / 3)


def test_infeasible_targets(rng):
    lp = random_log_grid(rng, 2, 3)
    with pytest.raises(CTCInfeasibleError):
        ctc_loss(grid(lp), [1, 1])     # needs a blank between repeats: 3 frames
    with pytest.raises(CTCInfeasibleError):
        ctc_loss(grid(lp), [])
    assert min_frames([1, 1, 2, 2, 2]) == 8


# -- trigger -------------------------------------------------------------------

def test_trigger_examples():
    blank = np.array([0.9, 0.2, 0.95, 0.1])
    lp = np.log(np.stack([blank, 1 - blank], 1))
    trig = trigger(grid(lp), 0.3)
    assert list(trig.positions) == [1, 3] and len(trig) == 2
    all_blank = np.log(np.stack([np.ones(4), np.full(4, 1e-300)], 1))
    assert len(trigger(grid(all_blank), 0.3)) == 0


def test_trigger_threshold_equality_fires():
    lp = np.log(np.array([[0.5, 0.5], [0.75, 0.25]]))
    assert list(trigger(grid(lp), 0.5).positions) == [0]


def naive_scan(lp, beta):
    out = []
    for t in range(lp.shape[0]):
        if 1.0 - np.exp(lp[t, 0]) >= beta:
            out.append(t)
    return out


def test_trigger_equals_naive_scan_long(rng):
    lp = random_log_grid(rng, 1000, 6)
    for beta in (0.1, 0.3, 0.5, 0.7):
        assert list(trigger(grid(lp), beta).positions) == naive_scan(lp, beta)
        assert list(trigger_positions(lp, beta)) == naive_scan(lp, beta)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(2, 6), st.integers(0, 2 ** 31))
def test_trigger_monotone_in_beta(T, C, seed):
    lp = random_log_grid(np.random.default_rng(seed), T, C)
    sets = [set(trigger(grid(lp), b).positions) for b in (0.1, 0.3, 0.5, 0.7)]
    for lo, hi in zip(sets, sets[1:]):
        assert hi <= lo


def test_gather(rng):
    enc = Tensor(rng.standard_normal((5, 3)))
    empty = gather_triggered(enc, TriggerSet(np.array([], dtype=np.int64), 0.5))
    assert empty.shape == (0, 3)
    assert np.array_equal(gather_triggered(enc, TriggerSet(np.array([0]), 0.5)).data, enc.data[:1])
    with pytest.raises(IndexError):
        gather_triggered(enc, TriggerSet(np.array([5]), 0.5))


def test_gather_gradient_scatters(rng):
    enc = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
    with Graph() as g:
        out = gather_triggered(enc, TriggerSet(np.array([1, 3]), 0.5)).sum()
    g.backward(out)
    expect = np.zeros((5, 3))
    expect[[1, 3]] = 1
    assert np.array_equal(enc.grad, expect)


def test_gather_after_trigger_gives_tprime_rows(rng):
    lp = random_log_grid(rng, 30, 5)
    enc = Tensor(rng.standard_normal((30, 4)))
    trig = trigger(grid(lp), 0.4)
    assert gather_triggered(enc, trig).shape == (len(trig), 4)


def test_greedy_path():
    C = 4
    def onehot(labels):
        lp = np.full((len(labels), C), -20.0)
        lp[np.arange(len(labels)), labels] = 0
        return grid(lp)
    assert ctc_greedy_path(onehot([0, 1, 1, 0, 3])) == [0, 2]
    assert ctc_greedy_path(onehot([0, 0, 0])) == []


def test_greedy_path_matches_recount(rng):
    for _ in range(20):
        lp = random_log_grid(rng, 12, 5)
        expect = [k - 1 for k in collapse(lp.argmax(1))]
        assert ctc_greedy_path(grid(lp)) == expect
