import numpy as np
import pytest
from hypothesis import given, strategies as st

from oiastory.data import BOS, EOS, PAD, UNK, build_vocabulary
from oiastory.history import (StoryFrequencyTable, effective_count, effective_counts, empty_histogram,
                              init_histogram, story_frequency_table, teacher_forced_histograms, update_histogram)

V = 10
tokens = st.integers(0, V - 1)
sentences = st.lists(st.lists(tokens, max_size=6), max_size=4)


def test_rho_hand_counts():
    a, b, c = [[5, 5], [5, 6]], [[5, 7]], [[6, 8]]
    rho = story_frequency_table([a, b, c], V)
    assert rho[5] == 2.0        # 3 + 1 over two stories
    assert rho[7] == 1.0        # once in one story
    assert rho[9] == 1.0        # never seen
    assert rho[6] == 1.0


def test_rho_unk_forced_to_one():
    rho = story_frequency_table([[[UNK, UNK, UNK]]], V)
    assert rho[UNK] == 1.0


def test_rho_empty_corpus():
    with pytest.raises(ValueError):
        story_frequency_table([], V)


@pytest.mark.parametrize("phi,rho,want", [(2, 3, 0), (3, 3, 1), (5, 2, 4)])
def test_effective_count_examples(phi, rho, want):
    hist = np.zeros(V)
    hist[4] = phi
    table = StoryFrequencyTable(np.full(V, float(rho)))
    assert effective_count(hist, table, 4) == want
    assert effective_counts(hist, table)[4] == want


def test_effective_counts_without_normalization():
    hist = np.arange(V)
    assert np.array_equal(effective_counts(hist, np.full(V, 3.0), count_norm=False), hist)


def test_init_histogram_counts():
    a, b = 4, 5
    assert np.all(init_histogram([], V) == 0)
    hist = init_histogram([[a, b, a, EOS], [b, EOS]], V)
    assert hist[a] == 2 and hist[b] == 2 and hist[EOS] == 0


def test_update_histogram():
    h = update_histogram(update_histogram(empty_histogram(V), 6), 6)
    assert h[6] == 2
    for reserved in (PAD, BOS, EOS):
        assert np.array_equal(update_histogram(h, reserved), h)
    assert update_histogram(h, UNK)[UNK] == 1


def test_update_does_not_mutate():
    h = empty_histogram(V)
    update_histogram(h, 5)
    assert h.sum() == 0


@given(sentences)
def test_fold_equals_batch_init(sents):
    h = empty_histogram(V)
    for s in sents:
        for t in s:
            h = update_histogram(h, t)
    assert np.array_equal(h, init_histogram(sents, V))


@given(st.integers(0, 6), st.floats(0.5, 5), st.floats(0.5, 5))
def test_effective_count_monotone(phi, rho_a, rho_b):
    lo, hi = sorted((rho_a, rho_b))
    h = np.zeros(V)
    h[4] = phi
    h2 = h.copy()
    h2[4] += 1
    t = StoryFrequencyTable(np.full(V, lo))
    assert effective_count(h2, t, 4) >= effective_count(h, t, 4)
    assert effective_count(h, StoryFrequencyTable(np.full(V, hi)), 4) <= effective_count(h, t, 4)


@given(st.lists(st.lists(tokens, min_size=1, max_size=5), min_size=1, max_size=4))
def test_teacher_forced_rows(sents):
    hists = teacher_forced_histograms(sents, V)
    for s, sentence in enumerate(sents):
        assert np.array_equal(hists[s][0], init_histogram(sents[:s], V))
        for t in range(len(sentence)):
            assert np.array_equal(hists[s][t], init_histogram(sents[:s] + [sentence[:t]], V))


def test_table_round_trip(tmp_path):
    vocab = build_vocabulary([["a b a", "c"]], min_count=1)
    rho = story_frequency_table([[[vocab.id("a"), vocab.id("a")]]], len(vocab))
    rho.save(tmp_path / "rho.tsv", vocab)
    text = (tmp_path / "rho.tsv").read_text()
    assert text.splitlines()[0] == "a\t2.0"
    assert np.array_equal(StoryFrequencyTable.load(tmp_path / "rho.tsv", vocab).values, rho.values)


def test_table_rejects_negative():
    with pytest.raises(ValueError):
        StoryFrequencyTable(np.array([1.0, -1.0]))
