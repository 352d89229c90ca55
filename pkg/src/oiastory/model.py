"""The full story model and story generation."""
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .config import Ablation
from .data import EOS, fuse_box_coordinates
from .decoder import DecoderParams, beam_search_hypotheses, sequence_log_probs
from .history import StoryFrequencyTable, init_histogram
from .isa import IsaParams, all_contexts
from .oia import OrderedImageAttention, _uniform


@dataclass
class Encoding:
    beliefs: torch.Tensor       # (..., N, N, K) indexed [s, i, k]
    attended: torch.Tensor      # (..., N, N, d) indexed [s, i]
    isa_weights: torch.Tensor   # (..., N, N) indexed [s, i]
    contexts: torch.Tensor      # (..., N, d)


class StoryModel(nn.Module):
    def __init__(self, vocab_size, n, d, gamma, embed_dim=None, dropout=0.0, ablation=None,
                 box_raw_dim=None):
        super().__init__()
        self.ablation = ablation or Ablation()
        self.n, self.d, self.vocab_size = n, d, vocab_size
        self.oia = OrderedImageAttention(n, d, flags=self.ablation)
        self.isa = IsaParams(n, d)
        self.decoder = DecoderParams(vocab_size, d, gamma, embed_dim, dropout)
        self.box_projection = _uniform((d, box_raw_dim + 4), box_raw_dim + 4) if box_raw_dim else None

    @classmethod
    def from_config(cls, config, vocab_size, box_raw_dim=None):
        model = cls(vocab_size, config.n, config.d, config.gamma, config.embed_dim, config.dropout,
                    config.ablation, box_raw_dim if config.fuse_boxes else None)
        return model.to(getattr(torch, config.dtype))

    @property
    def dtype(self):
        return self.decoder.out.weight.dtype

    def prepare_regions(self, regions, boxes=None):
        if isinstance(regions, np.ndarray):
            regions = np.array(regions)
        regions = torch.as_tensor(regions, dtype=self.dtype)
        if self.box_projection is None:
            return regions
        if boxes is None:
            raise ValueError("this model fuses box coordinates but none were given")
        return fuse_box_coordinates((regions, torch.as_tensor(boxes, dtype=self.dtype)), self.box_projection)

    def encode(self, regions, boxes=None):
        regions = self.prepare_regions(regions, boxes)
        if regions.shape[-3] != self.n:
            raise ValueError(f"model expects {self.n} images, got {regions.shape[-3]}")
        beliefs, attended = self.oia(regions)
        contexts, weights = all_contexts(attended, self.isa, disabled=self.ablation.no_isa)
        return Encoding(beliefs, attended, weights, contexts)

    def token_nll(self, batch):
        """Per-token negative log-likelihood ``(B*N, T)``, zero on padding."""
        enc = self.encode(batch.regions, batch.boxes)
        contexts = enc.contexts.reshape(-1, self.d)
        logp = sequence_log_probs(self.decoder, batch.inputs, contexts, batch.histograms.to(self.dtype),
                                  use_prior=not self.ablation.no_prior)
        nll = -logp.gather(-1, batch.targets.unsqueeze(-1)).squeeze(-1)
        return nll * batch.mask

    def count_parameters(self):
        return sum(p.numel() for p in self.parameters() if p.requires_grad)


@dataclass
class GeneratedStory:
    sentences: list
    beliefs: np.ndarray
    isa_weights: np.ndarray
    betas: list = field(default_factory=list)
    scores: list = field(default_factory=list)


@torch.no_grad()
def generate_story(model, regions, rho=None, *, boxes=None, width=3, max_len=30, penalty=2.0):
    """Decode all sentences in order, seeding each histogram with earlier output."""
    was_training = model.training
    model.eval()
    try:
        enc = model.encode(regions, boxes)
        flags = model.ablation
        if rho is None:
            rho = StoryFrequencyTable.uniform(model.vocab_size)
        pi = 0.0 if flags.no_penalty else penalty
        sentences, betas, scores = [], [], []
        for s in range(model.n):
            hist = init_histogram(sentences, model.vocab_size)
            best = beam_search_hypotheses(model.decoder, enc.contexts[s], hist, rho, width, max_len, pi,
                                          count_norm=not flags.no_count_norm, use_prior=not flags.no_prior)[0]
            tokens = list(best.tokens)
            if not tokens or tokens[-1] != EOS:
                tokens.append(EOS)
            sentences.append(tokens)
            betas.append(list(best.betas))
            scores.append(best.score)
    finally:
        model.train(was_training)
    return GeneratedStory(sentences, enc.beliefs.double().numpy(), enc.isa_weights.double().numpy(), betas, scores)
