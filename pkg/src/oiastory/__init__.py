"""Story generation from image sequences with ordered image attention."""
from .config import Ablation, TrainConfig
from .data import (BOS, EOS, PAD, UNK, Corpus, CorpusEntry, SequenceFeatures, Story, Vocabulary, build_vocabulary,
                   generate_synthetic_sequence, load_corpus, load_sequence_features, save_corpus,
                   save_sequence_features)
from .decoder import apply_repetition_penalty, beam_search, word_distribution
from .history import StoryFrequencyTable, effective_count, init_histogram, story_frequency_table, update_histogram
from .isa import context_embedding
from .metrics import RepetitionReport, corpus_report, repetition_rate, sentence_repetition
from .model import StoryModel, generate_story
from .oia import OrderedImageAttention, attention_beliefs
from .training import gradient_check, make_toy_corpus, train

__version__ = "0.1.0"
