"""Bag-of-words histograms and per-word story frequencies.

Training (teacher forcing) and decoding both advance histograms through
:func:`update_histogram`, so the two paths cannot drift apart.
"""
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .data import BOS, EOS, PAD, RESERVED, UNK

# UNK is deliberately counted so repeated unknown words are penalized.
NOT_COUNTED = frozenset((PAD, BOS, EOS))


def empty_histogram(vocab_size):
    return np.zeros(vocab_size, dtype=np.int64)


def update_histogram(histogram, token):
    out = histogram.copy()
    if token not in NOT_COUNTED:
        out[token] += 1
    return out


def init_histogram(previous_sentences, vocab_size):
    hist = empty_histogram(vocab_size)
    for sentence in previous_sentences:
        for token in sentence:
            if token not in NOT_COUNTED:
                hist[token] += 1
    return hist


def teacher_forced_histograms(sentences, vocab_size):
    """For every sentence, the ``T x |Y|`` histograms seen before each target token.

    Row ``t`` of sentence ``s`` holds the counts of sentences ``< s`` plus the first
    ``t`` ground-truth tokens of sentence ``s``.
    """
    out = []
    for s, sentence in enumerate(sentences):
        hist = init_histogram(sentences[:s], vocab_size)
        rows = []
        for token in sentence:
            rows.append(hist)
            hist = update_histogram(hist, token)
        out.append(np.stack(rows))
    return out


@dataclass(frozen=True, eq=False)
class StoryFrequencyTable:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or np.any(v < 0):
            raise ValueError("story frequencies must be a nonnegative vector")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __getitem__(self, w):
        return float(self.values[w])

    def __len__(self):
        return len(self.values)

    @classmethod
    def uniform(cls, vocab_size):
        return cls(np.ones(vocab_size))

    def dumps(self, vocab):
        lines = [f"{vocab.token(w)}\t{float(self.values[w])!r}" for w in range(len(RESERVED), len(vocab))]
        return "\n".join(lines) + "\n"

    def save(self, path, vocab):
        with open(path, "w") as f:
            f.write(self.dumps(vocab))

    @classmethod
    def load(cls, path, vocab):
        values = np.ones(len(vocab))
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                token, _, value = line.rstrip("\n").rpartition("\t")
                if not token:
                    raise ValueError(f"{path}:{lineno}: expected 'token<TAB>value'")
                if token in vocab:
                    values[vocab.id(token)] = float(value)
        return cls(values)


def story_frequency_table(stories, vocab_size):
    """Average count of each word over the stories that use it (default 1).

    ``stories`` is a list of encoded stories (lists of token-id sentences).
    """
    if not stories:
        raise ValueError("story frequencies need a nonempty corpus")
    appearances = Counter()
    used_in = Counter()
    for story in stories:
        counts = Counter(t for sentence in story for t in sentence if t not in NOT_COUNTED)
        appearances.update(counts)
        used_in.update(counts.keys())
    values = np.ones(vocab_size)
    for w, total in appearances.items():
        values[w] = total / used_in[w]
    values[UNK] = 1.0
    return StoryFrequencyTable(values)


def effective_count(histogram, table, w):
    return max(0.0, histogram[w] - table[w] + 1)


def effective_counts(histogram, rho, count_norm=True):
    """Vectorized effective counts; ``count_norm=False`` falls back to raw counts."""
    hist = np.asarray(histogram, dtype=np.float64)
    if not count_norm:
        return hist
    rho = rho.values if isinstance(rho, StoryFrequencyTable) else np.asarray(rho, dtype=np.float64)
    return np.maximum(0.0, hist - rho + 1.0)
