"""Vocabularies, stories, region-feature containers and their file formats.

Feature files are plain text. The first line is a JSON header::

    {"format": "oia-features", "version": 1, "n": 5, "k": 36, "d": 512, "has_boxes": false}

followed by ``n*k`` lines of ``d`` whitespace-separated decimal floats (row-major,
image-major then region), and, when ``has_boxes`` is true, ``n*k`` more lines of
4 box coordinates ``x1 y1 x2 y2`` normalized to [0, 1].  Floats are written with
``repr`` so a save/load round trip is bit-exact.

Corpus files are JSON lines, one story per line::

    {"story_id": "s0", "split": "train", "features": "features/s0.txt",
     "image_ids": ["a", "b"], "sentences": [["we", "went"], ["it", "rained"]]}

``features`` is resolved relative to the corpus file.  Vocabulary files hold one
token per line; the id of line ``i`` (0-based) is ``len(RESERVED) + i``.
"""
import hashlib
import json
import math
import os
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import torch

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<bos>", "<eos>")
FEATURE_FORMAT = "oia-features"


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple

    def __post_init__(self):
        if tuple(self.tokens[: len(RESERVED)]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved block")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self._index

    @property
    def size(self):
        return len(self.tokens)

    def id(self, token):
        return self._index.get(token, UNK)

    def token(self, idx):
        return self.tokens[idx]

    def encode(self, sentence):
        """Token strings -> ids, terminated with EOS."""
        return [self.id(t) for t in sentence] + [EOS]

    def decode(self, ids, strip=True):
        out = []
        for i in ids:
            if strip and i in (PAD, BOS, EOS):
                continue
            out.append(self.tokens[i])
        return out

    def digest(self):
        return hashlib.sha256("\n".join(self.tokens).encode()).hexdigest()[:16]

    def save(self, path):
        with open(path, "w") as f:
            for tok in self.tokens[len(RESERVED):]:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            words = [line.rstrip("\n") for line in f if line.strip()]
        return cls(RESERVED + tuple(words))


def _sentence_tokens(sentence):
    return sentence.split() if isinstance(sentence, str) else list(sentence)


def build_vocabulary(stories, min_count=3):
    """Count tokens over training stories; rare ones fall back to UNK.

    Ordering is frequency descending then lexicographic, so ids are stable.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter()
    seen = False
    for story in stories:
        sentences = story.sentences if isinstance(story, Story) else story
        for sentence in sentences:
            seen = True
            counts.update(_sentence_tokens(sentence))
    if not seen:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = [t for t, c in counts.items() if c >= min_count and t not in RESERVED]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(RESERVED + tuple(kept))


@dataclass(frozen=True)
class Story:
    image_ids: tuple
    sentences: tuple
    story_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "image_ids", tuple(self.image_ids))
        object.__setattr__(self, "sentences", tuple(tuple(_sentence_tokens(s)) for s in self.sentences))
        if not self.sentences:
            raise ValueError("a story needs at least one sentence")
        if len(self.sentences) != len(self.image_ids):
            raise ValueError(
                f"story {self.story_id!r}: {len(self.sentences)} sentences for {len(self.image_ids)} images")
        if any(len(s) == 0 for s in self.sentences):
            raise ValueError(f"story {self.story_id!r} has an empty sentence")

    @property
    def n(self):
        return len(self.sentences)

    def encode(self, vocab):
        return [vocab.encode(s) for s in self.sentences]


@dataclass(frozen=True, eq=False)
class SequenceFeatures:
    regions: np.ndarray
    boxes: np.ndarray | None = None

    def __post_init__(self):
        regions = np.asarray(self.regions, dtype=np.float64)
        if regions.ndim != 3:
            raise ValueError(f"regions must be N x K x d, got shape {regions.shape}")
        if not np.all(np.isfinite(regions)):
            raise ValueError("region features contain non-finite values")
        regions.setflags(write=False)
        object.__setattr__(self, "regions", regions)
        if self.boxes is not None:
            boxes = np.asarray(self.boxes, dtype=np.float64)
            if boxes.shape != regions.shape[:2] + (4,):
                raise ValueError(f"boxes must be N x K x 4, got {boxes.shape}")
            if not np.all(np.isfinite(boxes)) or boxes.min() < 0 or boxes.max() > 1:
                raise ValueError("box coordinates must lie in [0, 1]")
            boxes.setflags(write=False)
            object.__setattr__(self, "boxes", boxes)

    @property
    def n(self):
        return self.regions.shape[0]

    @property
    def k(self):
        return self.regions.shape[1]

    @property
    def d(self):
        return self.regions.shape[2]

    def tensor(self, dtype=torch.float64):
        return torch.as_tensor(np.array(self.regions), dtype=dtype)


def save_sequence_features(features, path):
    header = {"format": FEATURE_FORMAT, "version": 1, "n": features.n, "k": features.k,
              "d": features.d, "has_boxes": features.boxes is not None}
    with open(path, "w") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for row in features.regions.reshape(-1, features.d):
            f.write(" ".join(repr(float(x)) for x in row) + "\n")
        if features.boxes is not None:
            for row in features.boxes.reshape(-1, 4):
                f.write(" ".join(repr(float(x)) for x in row) + "\n")


def load_sequence_features(path):
    with open(path) as f:
        first = f.readline()
        try:
            header = json.loads(first)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: bad header line") from e
        for key in ("n", "k", "d", "has_boxes"):
            if key not in header:
                raise FormatError(f"{path}: header is missing {key!r}")
        if header.get("format", FEATURE_FORMAT) != FEATURE_FORMAT:
            raise FormatError(f"{path}: unknown format {header['format']!r}")
        n, k, d = int(header["n"]), int(header["k"]), int(header["d"])
        if min(n, k, d) < 1:
            raise FormatError(f"{path}: sizes must be positive")
        try:
            values = [float(x) for x in f.read().split()]
        except ValueError as e:
            raise FormatError(f"{path}: non-numeric payload") from e
    expected = n * k * d + (n * k * 4 if header["has_boxes"] else 0)
    if len(values) != expected:
        raise FormatError(f"{path}: header declares {expected} values, payload has {len(values)}")
    if not all(math.isfinite(v) for v in values):
        raise FormatError(f"{path}: payload contains non-finite values")
    arr = np.array(values, dtype=np.float64)
    regions = arr[: n * k * d].reshape(n, k, d)
    boxes = arr[n * k * d:].reshape(n, k, 4) if header["has_boxes"] else None
    try:
        return SequenceFeatures(regions, boxes)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from e


def fuse_box_coordinates(features, projection):
    """Concatenate each region with its box and project back to ``d`` dims.

    ``projection`` is a ``d x (raw_dim + 4)`` matrix.  Accepts either a
    :class:`SequenceFeatures` (returns one without boxes) or a pair of tensors
    ``(regions, boxes)`` so the projection can be trained.
    """
    if isinstance(features, SequenceFeatures):
        if features.boxes is None:
            raise ValueError("features carry no box coordinates")
        weight = np.asarray(projection, dtype=np.float64)
        joined = np.concatenate([features.regions, features.boxes], axis=-1)
        return SequenceFeatures(joined @ weight.T)
    regions, boxes = features
    if boxes.min() < 0 or boxes.max() > 1:
        raise ValueError("box coordinates must lie in [0, 1]")
    return torch.cat([regions, boxes], dim=-1) @ projection.T


@dataclass(frozen=True, eq=False)
class CorpusEntry:
    story: Story
    features: SequenceFeatures
    split: str = "train"
    features_path: str | None = None

    def __post_init__(self):
        if self.story.n != self.features.n:
            raise ValueError(
                f"story {self.story.story_id!r} has {self.story.n} sentences but features for {self.features.n} images")


@dataclass
class Corpus:
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def split(self, name):
        return [e for e in self.entries if e.split == name]

    def stories(self, split=None):
        return [e.story for e in self.entries if split is None or e.split == split]


def save_corpus(corpus, path, features_dir="features"):
    root = os.path.dirname(os.path.abspath(path))
    os.makedirs(os.path.join(root, features_dir), exist_ok=True)
    with open(path, "w") as f:
        for i, entry in enumerate(corpus):
            sid = entry.story.story_id or f"story{i}"
            rel = entry.features_path or os.path.join(features_dir, f"{sid}.txt")
            save_sequence_features(entry.features, os.path.join(root, rel))
            record = {"story_id": sid, "split": entry.split, "features": rel,
                      "image_ids": list(entry.story.image_ids),
                      "sentences": [list(s) for s in entry.story.sentences]}
            f.write(json.dumps(record) + "\n")


def load_corpus(path):
    root = os.path.dirname(os.path.abspath(path))
    corpus = Corpus()
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                story = Story(rec["image_ids"], rec["sentences"], rec.get("story_id", f"story{lineno}"))
                rel = rec["features"]
            except (KeyError, json.JSONDecodeError, ValueError) as e:
                raise FormatError(f"{path}:{lineno}: {e}") from e
            feats = load_sequence_features(os.path.join(root, rel))
            corpus.entries.append(CorpusEntry(story, feats, rec.get("split", "train"), rel))
    return corpus


# --- synthetic sequences -------------------------------------------------

THEMES = [
    ("beach", "vacation"), ("cake", "birthday"), ("bride", "wedding"), ("tree", "hike"),
    ("car", "trip"), ("ball", "game"), ("flag", "parade"), ("fish", "fishing"),
    ("snow", "winter"), ("book", "class"), ("horse", "farm"), ("boat", "cruise"),
    ("tent", "camping"), ("guitar", "concert"), ("gift", "holiday"), ("bike", "race"),
    ("dog", "walk"), ("lamp", "evening"), ("peak", "climb"), ("pool", "swim"),
    ("robot", "fair"), ("plane", "flight"), ("train", "journey"), ("kite", "picnic"),
]
# scene phrases use words found nowhere else and are drawn independently per
# sentence, so the data itself never discourages reusing one
SCENES = [
    ("under", "blue", "skies"), ("near", "tall", "pines"), ("beside", "calm", "water"),
    ("among", "happy", "crowds"), ("after", "heavy", "rain"), ("during", "golden", "sunset"),
]
# remarks share common words and never repeat within a story
REMARKS = [
    ("it", "was", "fun"), ("we", "had", "fun"), ("it", "was", "a", "great", "day"),
    ("we", "had", "a", "great", "time"), ("what", "a", "fun", "day"), ("it", "was", "a", "fun", "time"),
]

PLAIN_WORDS = ("this", "story", "is", "about", "a", "with", "next", "we", "saw")
REPETITIVE_WORDS = ("on", "our", "the", ",")


def template_words(variant="plain"):
    """Words a synthetic story can use besides theme nouns and events."""
    if variant == "plain":
        return set(PLAIN_WORDS)
    return set(REPETITIVE_WORDS) | {w for p in SCENES + REMARKS for w in p}


def theme_words(theme):
    if theme < len(THEMES):
        return THEMES[theme]
    return f"thing{theme}", f"event{theme}"


def theme_prototypes(theme_count, dim, seed=0):
    rng = np.random.default_rng([abs(seed), 7919 + (seed < 0)])
    protos = rng.normal(size=(theme_count, dim))
    return protos / np.linalg.norm(protos, axis=1, keepdims=True) * math.sqrt(dim) / 2


def generate_synthetic_sequence(seed, n, k, dim, theme_count, *, prototypes=None, noise=0.1, clutter=0,
                                backgrounds=None, variant="plain", with_boxes=False, story_id=None, max_len=30):
    """Deterministic toy image sequence and its story.

    Each image gets a theme; its regions are the theme prototype plus uniform noise
    in ``[-noise, noise]``.  With ``clutter > 0`` that many regions per image are
    replaced by background prototypes (plus noise) at random positions, so only
    some regions show the theme.  Sentence ``i`` names image ``i``'s theme and the
    first sentence also names the event of the *last* image, so the first sentence
    cannot be written without looking forward.  The ``repetitive`` variant adds
    a scene phrase and a closing remark that the images do not determine.
    """
    if min(n, k, dim, theme_count) < 1:
        raise ValueError("all sizes must be >= 1")
    if not 0 <= clutter < k:
        raise ValueError("clutter must leave at least one theme region")
    if variant not in ("plain", "repetitive"):
        raise ValueError(f"unknown variant {variant!r}")
    rng = np.random.default_rng(seed)
    if prototypes is None:
        prototypes = theme_prototypes(theme_count, dim)
    themes = rng.choice(theme_count, size=n, replace=theme_count < n)
    centers = np.repeat(prototypes[themes][:, None, :], k, axis=1)
    if clutter:
        if backgrounds is None:
            backgrounds = theme_prototypes(4, dim, seed=-1)
        for i in range(n):
            slots = rng.permutation(k)[:clutter]
            centers[i, slots] = backgrounds[rng.integers(len(backgrounds), size=clutter)]
    regions = centers + rng.uniform(-noise, noise, size=(n, k, dim))
    boxes = None
    if with_boxes:
        corners = rng.uniform(0, 1, size=(n, k, 2, 2))
        boxes = np.concatenate([corners.min(axis=2), corners.max(axis=2)], axis=-1)

    event = theme_words(int(themes[-1]))[1]
    sentences = []
    if variant == "plain":
        for i, t in enumerate(themes):
            noun = theme_words(int(t))[0]
            if i == 0:
                sentences.append(["this", "story", "is", "about", "a", event, "with", "a", noun])
            else:
                sentences.append(["next", "we", "saw", "a", noun])
    else:
        scenes = rng.integers(len(SCENES), size=n)
        remarks = rng.choice(len(REMARKS), size=n, replace=len(REMARKS) < n)
        for i, t in enumerate(themes):
            noun = theme_words(int(t))[0]
            head = ["on", "our", event, "the"] if i == 0 else ["the"]
            sentences.append(head + [noun, ","] + list(SCENES[scenes[i]]) + [","] + list(REMARKS[remarks[i]]))
    if max(len(s) for s in sentences) + 1 > max_len:
        raise ValueError(f"sentence longer than max_len={max_len}")
    sid = story_id if story_id is not None else f"seq{seed}"
    story = Story([f"{sid}-img{i}" for i in range(n)], sentences, sid)
    return SequenceFeatures(regions, boxes), story
