"""Command line entry point: ``oiastory <command> ...``."""
import argparse
import json
import logging
import os
import sys

import numpy as np
import torch

from .config import Ablation, TrainConfig
from .data import FormatError, Vocabulary, build_vocabulary, load_corpus, load_sequence_features, save_corpus
from .history import StoryFrequencyTable, story_frequency_table
from .metrics import corpus_report
from .model import StoryModel, generate_story
from .training import (TrainingDiverged, examples_from_corpus, gradient_check_story, make_state, make_toy_corpus,
                       prepare_example, train)

log = logging.getLogger("oiastory")

CHECKPOINT_FORMAT = "oiastory-checkpoint"
# flags that only change decoding, so they may differ from the trained model
DECODE_FLAGS = ("no_penalty", "no_count_norm")


class CliError(Exception):
    pass


def _out(args, name):
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def _config(args, **overrides):
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.ablate:
        merged = set(cfg.ablation.names()) | set(Ablation.from_names(args.ablate).names())
        overrides["ablation"] = Ablation.from_names(sorted(merged))
    return cfg.replace(**{k: v for k, v in overrides.items() if v is not None})


def _load_corpus(path):
    corpus = load_corpus(path)
    if not len(corpus):
        raise CliError(f"{path}: corpus is empty")
    return corpus


def _vocab(args, corpus, min_count):
    if args.vocab:
        return Vocabulary.load(args.vocab)
    stories = corpus.stories("train") or corpus.stories()
    return build_vocabulary(stories, min_count=min_count)


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


# --- commands -----------------------------------------------------------------

def cmd_make_toy(args):
    splits = {"train": args.stories}
    if args.val:
        splits["val"] = args.val
    if args.test:
        splits["test"] = args.test
    corpus, vocab = make_toy_corpus(args.seed or 0, args.stories, args.images, args.regions, args.dim,
                                    args.vocab_size, args.variant, splits, args.noise, args.clutter)
    save_corpus(corpus, _out(args, "corpus.jsonl"))
    vocab.save(_out(args, "vocab.txt"))
    print(f"wrote {len(corpus)} stories and {len(vocab)} vocabulary entries to {args.out}")


def cmd_stats(args):
    cfg = _config(args)
    corpus = _load_corpus(args.corpus)
    vocab = _vocab(args, corpus, cfg.min_count)
    stories = corpus.stories("train") or corpus.stories()
    table = story_frequency_table([s.encode(vocab) for s in stories], len(vocab))
    table.save(_out(args, "rho.tsv"), vocab)
    if not args.vocab:
        vocab.save(_out(args, "vocab.txt"))
    print(f"story frequencies for {len(vocab)} words over {len(stories)} stories -> {_out(args, 'rho.tsv')}")


def _checkpoint(state, cfg, vocab, rho, box_dim):
    return {
        "header": {"format": CHECKPOINT_FORMAT, "config": cfg.to_dict(), "vocab_digest": vocab.digest(),
                   "tied_direction": state.model.oia.weights.tied, "box_raw_dim": box_dim},
        "vocab": list(vocab.tokens),
        "rho": rho.values.tolist(),
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "scheduler": state.scheduler.state_dict(),
        "epoch": state.epoch,
        "best_val": state.best_val,
        "history": state.history,
    }


def load_checkpoint(path):
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    if ckpt.get("header", {}).get("format") != CHECKPOINT_FORMAT:
        raise CliError(f"{path}: not a checkpoint written by this tool")
    cfg = TrainConfig.from_dict(ckpt["header"]["config"])
    vocab = Vocabulary(tuple(ckpt["vocab"]))
    if vocab.digest() != ckpt["header"]["vocab_digest"]:
        raise CliError(f"{path}: stored vocabulary does not match its hash")
    return ckpt, cfg, vocab


def _restore(ckpt, cfg, vocab):
    state = make_state(cfg, len(vocab), ckpt["header"]["box_raw_dim"])
    state.model.load_state_dict(ckpt["model"])
    state.optimizer.load_state_dict(ckpt["optimizer"])
    state.scheduler.load_state_dict(ckpt["scheduler"])
    state.epoch, state.best_val, state.history = ckpt["epoch"], ckpt["best_val"], list(ckpt["history"])
    return state


def cmd_train(args):
    corpus = _load_corpus(args.corpus)
    state = None
    if args.resume:
        ckpt, cfg, vocab = load_checkpoint(args.resume)
        if args.vocab and Vocabulary.load(args.vocab).digest() != vocab.digest():
            raise CliError("vocabulary does not match the checkpoint being resumed")
        cfg = cfg.replace(**{k: v for k, v in dict(max_epochs=args.epochs, target_loss=args.target_loss).items()
                             if v is not None})
        rho = StoryFrequencyTable(np.array(ckpt["rho"]))
        state = _restore(ckpt, cfg, vocab)
    else:
        cfg = _config(args, max_epochs=args.epochs, target_loss=args.target_loss)
        vocab = _vocab(args, corpus, cfg.min_count)
        train_stories = corpus.stories("train") or corpus.stories()
        rho = (StoryFrequencyTable.load(args.rho, vocab) if args.rho
               else story_frequency_table([s.encode(vocab) for s in train_stories], len(vocab)))
    train_entries = corpus.split("train") or list(corpus)
    tr = examples_from_corpus(train_entries, vocab, cfg.fuse_boxes)
    va = examples_from_corpus(corpus.split("val"), vocab, cfg.fuse_boxes) or None
    box_dim = tr[0].regions.shape[-1] if cfg.fuse_boxes else None
    metrics_path = _out(args, "metrics.jsonl")
    if state is None and os.path.exists(metrics_path):
        os.remove(metrics_path)

    def on_epoch(st, record, improved):
        with open(metrics_path, "a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")
        ckpt = _checkpoint(st, cfg, vocab, rho, box_dim)
        torch.save(ckpt, _out(args, "last.pt"))
        if improved:
            torch.save(ckpt, _out(args, "best.pt"))

    state = train(cfg, tr, va, state=state, on_epoch=on_epoch, vocab_size=len(vocab))
    last = state.history[-1] if state.history else {}
    print(json.dumps({"epochs": state.epoch, "train_loss": last.get("train_eval_loss"),
                      "val_loss": last.get("val_loss"), "best_val": state.best_val,
                      "ablation": cfg.ablation.names()}, sort_keys=True))


def _sequences(args):
    if args.corpus:
        corpus = _load_corpus(args.corpus)
        entries = corpus.split(args.split) if args.split else list(corpus)
        if not entries:
            raise CliError(f"no stories in split {args.split!r}")
        return [(e.story.story_id, e.features) for e in entries]
    if not args.features:
        raise CliError("generate needs --corpus or --features")
    return [(os.path.splitext(os.path.basename(p))[0], load_sequence_features(p)) for p in args.features]


def cmd_generate(args):
    ckpt, cfg, vocab = load_checkpoint(args.checkpoint)
    if args.vocab and Vocabulary.load(args.vocab).digest() != vocab.digest():
        raise CliError("vocabulary mismatch: the checkpoint was trained with a different vocabulary")
    flags = cfg.ablation
    if args.ablate:
        extra = Ablation.from_names(args.ablate)
        bad = [n for n in extra.names() if n.replace("-", "_") not in DECODE_FLAGS and n not in flags.names()]
        if bad:
            raise CliError(f"ablations {bad} change the trained model; retrain instead")
        flags = Ablation.from_names(sorted(set(flags.names()) | set(extra.names())))
    model = StoryModel.from_config(cfg.replace(ablation=flags), len(vocab), ckpt["header"]["box_raw_dim"])
    model.load_state_dict(ckpt["model"])
    rho = StoryFrequencyTable(np.array(ckpt["rho"]))
    width = args.width or cfg.beam_width
    max_len = args.max_len or cfg.max_len
    stories, attention, isa = [], [], []
    for sid, feats in _sequences(args):
        if feats.n != model.n:
            raise CliError(f"{sid}: model expects {model.n} images, got {feats.n}")
        out = generate_story(model, feats.regions, rho, boxes=feats.boxes, width=width, max_len=max_len,
                             penalty=cfg.penalty)
        record = {"story_id": sid, "sentences": [vocab.decode(s) for s in out.sentences],
                  "attention": "attention.jsonl", "isa": "isa.jsonl"}
        if args.betas:
            record["betas"] = out.betas
        stories.append(record)
        for s in range(model.n):
            for i in range(model.n):
                attention.append({"story_id": sid, "s": s, "i": i, "beliefs": out.beliefs[s, i].tolist()})
            isa.append({"story_id": sid, "s": s, "image_weights": out.isa_weights[s].tolist()})
    for name, records in (("stories.jsonl", stories), ("attention.jsonl", attention), ("isa.jsonl", isa)):
        with open(_out(args, name), "w") as f:
            for r in records:
                f.write(json.dumps(r, sort_keys=True) + "\n")
    _write_json(_out(args, "alphas.json"), {
        "oia": model.oia.calib.export(),
        "isa": {"local": model.isa.alpha_local.tolist(), "self": model.isa.alpha_self.tolist()},
    })
    for r in stories:
        print(r["story_id"] + ": " + " / ".join(" ".join(s) for s in r["sentences"]))


def read_stories(path):
    stories = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                sentences = rec["sentences"] if isinstance(rec, dict) else rec
                if not isinstance(sentences, list) or not sentences:
                    raise ValueError("expected a nonempty list of sentences")
                stories.append([s.split() if isinstance(s, str) else list(s) for s in sentences])
            except (ValueError, KeyError, TypeError) as e:
                raise FormatError(f"{path}:{lineno}: {e}") from e
    if not stories:
        raise CliError(f"{path}: no stories")
    return stories


def cmd_eval_rep(args):
    report = corpus_report(read_stories(args.stories))
    label = args.label or os.path.splitext(os.path.basename(args.stories))[0]
    record = report.record(label)
    _write_json(_out(args, f"rep_{label}.json"), dict(record, text_rep_per_story=report.text_rep,
                                                      sent_rep_per_story=report.sent_rep))
    print(json.dumps(record, sort_keys=True))


def cmd_grad_check(args):
    seed = args.seed or 0
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = StoryModel(args.vocab_size, args.images, args.dim, args.gamma, dropout=0.3,
                       ablation=Ablation.from_names(args.ablate))
    sentences = [list(rng.integers(4, args.vocab_size, size=rng.integers(2, 6))) + [3] for _ in range(args.images)]
    ex = prepare_example(rng.normal(size=(args.images, args.regions, args.dim)), sentences, args.vocab_size)
    report = gradient_check_story(model, ex, step=args.step, tolerance=args.tolerance, samples=args.samples,
                                  seed=seed)
    for line in report.lines():
        print(line)
    return 0 if report.passed else 1


# --- parser ---------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="oiastory", description="Ordered image attention story generation.")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", help="JSON file with training configuration fields")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--ablate", action="append", default=[], metavar="NAME",
                   help="disable a component (repeatable), e.g. no-prior, no-direction")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-toy", help="write a synthetic corpus")
    s.add_argument("--stories", type=int, default=8)
    s.add_argument("--val", type=int, default=0)
    s.add_argument("--test", type=int, default=0)
    s.add_argument("--images", type=int, default=5)
    s.add_argument("--regions", type=int, default=6)
    s.add_argument("--dim", type=int, default=32)
    s.add_argument("--vocab-size", type=int, default=40)
    s.add_argument("--variant", choices=["plain", "repetitive"], default="plain")
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--clutter", type=int, default=None)
    s.set_defaults(func=cmd_make_toy)

    s = sub.add_parser("stats", help="compute per-word story frequencies")
    s.add_argument("--corpus", required=True)
    s.add_argument("--vocab")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--corpus", required=True)
    s.add_argument("--vocab")
    s.add_argument("--rho", help="story frequency table from `stats`")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--target-loss", type=float, default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("generate", help="write stories and attention maps")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--corpus")
    s.add_argument("--split", default=None)
    s.add_argument("--features", nargs="*")
    s.add_argument("--vocab")
    s.add_argument("--width", type=int, default=None)
    s.add_argument("--max-len", type=int, default=None)
    s.add_argument("--betas", action="store_true", help="also export gate values")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("eval-rep", help="repetition report for generated stories")
    s.add_argument("--stories", required=True, help="JSON lines with a `sentences` field")
    s.add_argument("--label")
    s.set_defaults(func=cmd_eval_rep)

    s = sub.add_parser("grad-check", help="finite-difference gradient check")
    s.add_argument("--dim", type=int, default=8)
    s.add_argument("--regions", type=int, default=4)
    s.add_argument("--images", type=int, default=3)
    s.add_argument("--vocab-size", type=int, default=20)
    s.add_argument("--gamma", type=int, default=8)
    s.add_argument("--samples", type=int, default=200)
    s.add_argument("--step", type=float, default=1e-5)
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args) or 0
    except TrainingDiverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return 3
    except (CliError, FormatError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
