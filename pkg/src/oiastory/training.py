"""Maximum-likelihood training, gradient verification and toy corpora."""
import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import TrainConfig
from .data import (BOS, PAD, Corpus, CorpusEntry, build_vocabulary, generate_synthetic_sequence, template_words,
                   theme_prototypes)
from .history import teacher_forced_histograms
from .model import StoryModel

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Example:
    regions: torch.Tensor
    boxes: torch.Tensor | None
    inputs: torch.Tensor
    targets: torch.Tensor
    mask: torch.Tensor
    histograms: torch.Tensor

    @property
    def n_tokens(self):
        return int(self.mask.sum())


def prepare_example(regions, sentences, vocab_size, boxes=None):
    """Teacher-forcing tensors for one story of encoded sentences (each ending in EOS)."""
    for sentence in sentences:
        if any(not 0 <= t < vocab_size for t in sentence):
            raise ValueError(f"token id outside vocabulary of size {vocab_size}")
    hists = teacher_forced_histograms(sentences, vocab_size)
    n, t = len(sentences), max(len(s) for s in sentences)
    inputs = torch.full((n, t), PAD, dtype=torch.long)
    targets = torch.full((n, t), PAD, dtype=torch.long)
    mask = torch.zeros(n, t)
    hist = torch.zeros(n, t, vocab_size)
    for s, sentence in enumerate(sentences):
        length = len(sentence)
        inputs[s, :length] = torch.tensor([BOS] + list(sentence[:-1]))
        targets[s, :length] = torch.tensor(sentence)
        mask[s, :length] = 1
        hist[s, :length] = torch.as_tensor(hists[s], dtype=torch.float32)
    regions = torch.as_tensor(np.array(regions), dtype=torch.float64)
    boxes = None if boxes is None else torch.as_tensor(np.array(boxes), dtype=torch.float64)
    return Example(regions, boxes, inputs, targets, mask, hist)


def collate(examples):
    """Stack stories into one batch; sentences are flattened to ``B*N`` rows."""
    t = max(e.inputs.shape[1] for e in examples)

    def pad(x, value=0):
        extra = t - x.shape[1]
        if extra == 0:
            return x
        shape = (x.shape[0], extra) + tuple(x.shape[2:])
        return torch.cat([x, x.new_full(shape, value)], dim=1)

    boxes = None if examples[0].boxes is None else torch.stack([e.boxes for e in examples])
    return Example(
        torch.stack([e.regions for e in examples]), boxes,
        torch.cat([pad(e.inputs, PAD) for e in examples]),
        torch.cat([pad(e.targets, PAD) for e in examples]),
        torch.cat([pad(e.mask) for e in examples]),
        torch.cat([pad(e.histograms) for e in examples]),
    )


def story_loss(model, example):
    """(summed cross-entropy, mean per token) of one story or batch, teacher forced."""
    nll = model.token_nll(example)
    total = nll.sum()
    return total, total / example.mask.sum()


def examples_from_corpus(entries, vocab, fuse_boxes=False):
    return [prepare_example(e.features.regions, e.story.encode(vocab), len(vocab),
                            e.features.boxes if fuse_boxes else None) for e in entries]


@torch.no_grad()
def evaluate(model, examples, batch_size=32):
    was = model.training
    model.eval()
    total, count = 0.0, 0.0
    for i in range(0, len(examples), batch_size):
        batch = collate(examples[i:i + batch_size])
        nll = model.token_nll(batch)
        total += float(nll.sum())
        count += float(batch.mask.sum())
    model.train(was)
    return total / max(count, 1.0)


@dataclass
class TrainState:
    model: StoryModel
    optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.ReduceLROnPlateau
    epoch: int = 0
    history: list = field(default_factory=list)
    best_val: float = math.inf


def make_state(config, vocab_size, box_raw_dim=None):
    torch.manual_seed(config.seed)
    model = StoryModel.from_config(config, vocab_size, box_raw_dim)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(optimizer, mode="min", factor=config.lr_decay,
                                                           patience=config.patience)
    return TrainState(model, optimizer, scheduler)


def train(config, train_examples, val_examples=None, state=None, on_epoch=None, vocab_size=None):
    """Adam over shuffled minibatches of whole stories, LR decayed on a validation plateau.

    Validation loss stands in for the plateau metric; without a validation set the
    eval-mode training loss is used.  Returns the :class:`TrainState`; its
    ``history`` holds one record per epoch.  ``on_epoch(state, record, improved)``
    is called after every epoch (checkpointing hook).
    """
    if not train_examples:
        raise ValueError("training needs at least one story")
    if state is None:
        vocab_size = vocab_size or train_examples[0].histograms.shape[-1]
        box_dim = None if train_examples[0].boxes is None else train_examples[0].regions.shape[-1]
        state = make_state(config, vocab_size, box_dim)
    model = state.model
    while state.epoch < config.max_epochs:
        epoch = state.epoch
        # per-epoch seeding keeps resumed runs identical to uninterrupted ones
        torch.manual_seed(config.seed * 100003 + epoch)
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_examples))
        model.train()
        running, tokens = 0.0, 0.0
        for start in range(0, len(order), config.batch_size):
            batch = collate([train_examples[i] for i in order[start:start + config.batch_size]])
            total, mean = story_loss(model, batch)
            if not torch.isfinite(total):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch starting {start}")
            state.optimizer.zero_grad()
            mean.backward()
            state.optimizer.step()
            running += total.item()
            tokens += float(batch.mask.sum())
        train_eval = evaluate(model, train_examples)
        val = evaluate(model, val_examples) if val_examples else train_eval
        state.scheduler.step(val)
        improved = val < state.best_val
        state.best_val = min(state.best_val, val)
        record = {"epoch": epoch, "train_loss": running / tokens, "train_eval_loss": train_eval,
                  "val_loss": val, "lr": state.optimizer.param_groups[0]["lr"]}
        state.history.append(record)
        state.epoch += 1
        log.info("epoch %d train %.4f eval %.4f val %.4f lr %.2e", epoch, record["train_loss"], train_eval, val,
                 record["lr"])
        if on_epoch is not None:
            on_epoch(state, record, improved)
        if config.target_loss is not None and train_eval < config.target_loss:
            break
    return state


# --- gradient verification -----------------------------------------------

@dataclass
class GradCheckReport:
    errors: dict
    checked: dict
    tolerance: float

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self):
        return self.max_error < self.tolerance

    def lines(self):
        out = [f"{name}: max rel err {err:.3e} over {self.checked[name]} coords" for name, err in self.errors.items()]
        out.append(f"max {self.max_error:.3e} ({'PASS' if self.passed else 'FAIL'} at {self.tolerance:g})")
        return out


def relative_error(analytic, numeric, floor=1e-8):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradient_check(model, loss_fn, step=1e-5, tolerance=1e-4, samples=200, seed=0, grad_hook=None):
    """Compare autograd gradients of ``loss_fn(model)`` with central differences.

    Runs in double precision with dropout disabled on a private copy of the model.
    Up to ``samples`` random coordinates are probed per parameter tensor (all of
    them when the tensor is smaller).  ``grad_hook(name, grad)`` may mutate the
    analytic gradient before comparison (used to validate the checker itself).

    ``loss_fn`` may return a tensor of terms whose sum is the loss.  Differences
    are then taken term by term before summing, which keeps rounding noise at the
    scale of one term instead of the whole total.
    """
    model = copy.deepcopy(model).double().eval()
    rng = np.random.default_rng(seed)
    model.zero_grad()
    loss_fn(model).sum().backward()
    errors, checked = {}, {}
    with torch.no_grad():
        for name, param in model.named_parameters():
            if param.grad is None:
                continue
            grad = param.grad.detach().clone()
            if grad_hook is not None:
                grad_hook(name, grad)
            flat, gflat = param.data.view(-1), grad.view(-1)
            idx = np.arange(flat.numel())
            if flat.numel() > samples:
                idx = rng.choice(flat.numel(), size=samples, replace=False)
            worst = 0.0
            for i in idx:
                orig = float(flat[i])
                flat[i] = orig + step
                plus = loss_fn(model)
                flat[i] = orig - step
                minus = loss_fn(model)
                flat[i] = orig
                numeric = math.fsum((plus - minus).reshape(-1).tolist()) / (2 * step)
                worst = max(worst, relative_error(float(gflat[i]), numeric))
            errors[name] = worst
            checked[name] = len(idx)
    return GradCheckReport(errors, checked, tolerance)


def gradient_check_story(model, example, **kwargs):
    """Gradient check of the summed story cross-entropy."""
    return gradient_check(model, lambda m: m.token_nll(example), **kwargs)


# --- toy corpora -----------------------------------------------------------

def toy_theme_count(vocab_size, variant="plain"):
    fixed = len(template_words(variant))
    count = (vocab_size - fixed) // 2
    if count < 1:
        raise ValueError(f"vocab_size {vocab_size} too small for the {variant} template")
    return count


def make_toy_corpus(seed, num_stories, n, k, dim, vocab_size, variant="plain", splits=None, noise=0.1,
                    clutter=None):
    """Deterministic corpus of synthetic stories plus its vocabulary.

    ``splits`` maps split name to story count (default: all ``train``).  Theme
    and background prototypes are shared by every story of the corpus; by default
    all but two regions of each image are background clutter.
    """
    if min(num_stories, n, k, dim, vocab_size) < 1:
        raise ValueError("all sizes must be >= 1")
    themes = toy_theme_count(vocab_size, variant)
    protos = theme_prototypes(themes, dim, seed)
    backgrounds = theme_prototypes(4, dim, -1 - seed)
    if clutter is None:
        clutter = max(0, k - 2)
    splits = splits or {"train": num_stories}
    corpus = Corpus()
    idx = 0
    for split, count in splits.items():
        for _ in range(count):
            feats, story = generate_synthetic_sequence(
                [seed, idx], n, k, dim, themes, prototypes=protos, noise=noise, clutter=clutter,
                backgrounds=backgrounds, variant=variant,
                story_id=f"{split}{idx:04d}")
            corpus.entries.append(CorpusEntry(story, feats, split))
            idx += 1
    vocab = build_vocabulary(corpus.stories("train"), min_count=1)
    return corpus, vocab


def toy_config(**overrides):
    """Desk-scale configuration used by the toy experiments."""
    base = dict(d=32, k=6, n=5, gamma=16, min_count=1, batch_size=4, max_epochs=500, lr=3e-3, dropout=0.0,
                dtype="float32")
    base.update(overrides)
    return TrainConfig(**base)
