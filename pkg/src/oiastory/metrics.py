"""Within-story repetition measurements."""
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass

from .data import BOS, EOS

MAX_ORDER = 4


def _strip(sentence):
    return tuple(t for t in sentence if t not in (BOS, EOS, "<bos>", "<eos>"))


def ngram_rates(tokens, max_order=MAX_ORDER):
    """Fraction of n-gram types seen at least twice, for n = 1..max_order (None if no n-grams)."""
    rates = []
    for n in range(1, max_order + 1):
        counts = Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))
        rates.append(sum(c >= 2 for c in counts.values()) / len(counts) if counts else None)
    return rates


def repetition_rate(story, max_order=MAX_ORDER):
    """Geometric mean of the non-singleton n-gram type fractions over the concatenated story."""
    if not story:
        raise ValueError("empty story")
    tokens = [t for sentence in story for t in _strip(sentence)]
    if not tokens:
        return 0.0
    rates = [r for r in ngram_rates(tokens, max_order) if r is not None]
    if min(rates) == 0:
        return 0.0
    return math.exp(sum(math.log(r) for r in rates) / len(rates))


def sentence_repetition(story):
    """Number of sentences equal to some earlier sentence of the same story."""
    if not story:
        raise ValueError("empty story")
    seen, repeats = set(), 0
    for sentence in story:
        key = _strip(sentence)
        repeats += key in seen
        seen.add(key)
    return repeats


@dataclass
class RepetitionReport:
    text_rep: list
    sent_rep: list

    @property
    def mean_text_rep(self):
        return sum(self.text_rep) / len(self.text_rep)

    @property
    def mean_sent_rep(self):
        return sum(self.sent_rep) / len(self.sent_rep)

    def record(self, config=None):
        return {"config": config, "text_rep": self.mean_text_rep, "sent_rep": self.mean_sent_rep}

    def to_json(self, config=None):
        out = self.record(config)
        out["stories"] = asdict(self)
        return json.dumps(out, sort_keys=True)


def corpus_report(stories):
    stories = list(stories)
    if not stories:
        raise ValueError("need at least one story")
    return RepetitionReport([repetition_rate(s) for s in stories], [sentence_repetition(s) for s in stories])
