"""Gated GRU / bag-of-words decoder, repetition penalty and beam search."""
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .data import BOS, EOS, PAD
from .history import effective_counts, update_histogram

BANNED_OUTPUTS = (PAD, BOS)


class DecoderParams(nn.Module):
    def __init__(self, vocab_size, d, gamma, embed_dim=None, dropout=0.0):
        super().__init__()
        if gamma < 1:
            raise ValueError("bottleneck dimension must be >= 1")
        embed_dim = embed_dim or d
        self.vocab_size, self.d, self.gamma, self.embed_dim = vocab_size, d, gamma, embed_dim
        self.embedding = nn.Embedding(vocab_size, embed_dim)
        self.gru = nn.GRU(embed_dim + d, d, batch_first=True)
        self.out = nn.Linear(d, vocab_size)
        self.W1 = nn.Linear(vocab_size, gamma, bias=False)
        self.W2 = nn.Linear(gamma, vocab_size, bias=False)
        self.G_g = nn.Linear(d, d, bias=False)
        self.G_f = nn.Linear(gamma, d, bias=False)
        self.v_beta = nn.Linear(d, 1, bias=False)
        self.dropout = nn.Dropout(dropout)

    def load_pretrained_embeddings(self, path, vocab):
        """Copy vectors from a GloVe-style text file (``word v1 ... vD``); returns hits."""
        hits = 0
        with open(path, encoding="utf8") as f, torch.no_grad():
            for line in f:
                parts = line.rstrip().split(" ")
                if len(parts) != self.embed_dim + 1 or parts[0] not in vocab:
                    continue
                self.embedding.weight[vocab.id(parts[0])] = torch.tensor([float(x) for x in parts[1:]])
                hits += 1
        return hits


def gru_step(inp, hidden, params):
    """One GRU update with the decoder's weights (same algebra as ``nn.GRU``)."""
    g = params.gru
    gi = inp @ g.weight_ih_l0.T + g.bias_ih_l0
    gh = hidden @ g.weight_hh_l0.T + g.bias_hh_l0
    i_r, i_z, i_n = gi.chunk(3, dim=-1)
    h_r, h_z, h_n = gh.chunk(3, dim=-1)
    r = torch.sigmoid(i_r + h_r)
    z = torch.sigmoid(i_z + h_z)
    n = torch.tanh(i_n + r * h_n)
    return (1 - z) * n + z * hidden


def bow_prior(histogram, params):
    return params.W2(params.W1(histogram))


def gate(hidden, histogram, params):
    pre = torch.tanh(params.G_g(hidden) + params.G_f(params.W1(histogram)))
    return torch.sigmoid(params.v_beta(pre)).squeeze(-1)


def mixed_logits(hidden, histogram, params, beta=None, use_prior=True):
    """Gate-weighted sum of GRU logits and prior logits; returns (logits, beta)."""
    g = params.out(params.dropout(hidden))
    if not use_prior:
        return g, torch.ones(g.shape[:-1], dtype=g.dtype)
    if beta is None:
        beta = gate(hidden, histogram, params)
    elif not torch.is_tensor(beta):
        beta = torch.full(g.shape[:-1], float(beta), dtype=g.dtype)
    f = bow_prior(histogram, params)
    return beta.unsqueeze(-1) * g + (1 - beta.unsqueeze(-1)) * f, beta


def word_distribution(prev_token, hidden, context, histogram, params, beta=None, use_prior=True):
    """Next-word probabilities, the new hidden state and the gate value.

    The GRU consumes ``[embedding(prev_token); context]``; the gate is evaluated on
    the new hidden state.  Works on single items or batches.
    """
    emb = params.embedding(torch.as_tensor(prev_token))
    new_hidden = gru_step(torch.cat([emb, context], dim=-1), hidden, params)
    logits, beta = mixed_logits(new_hidden, histogram, params, beta, use_prior)
    return torch.softmax(logits, dim=-1), new_hidden, beta


def sequence_log_probs(params, inputs, contexts, histograms, use_prior=True):
    """Teacher-forced log-probabilities ``(B, T, |Y|)``.

    ``inputs`` (B, T) are previous tokens, ``contexts`` (B, d) and
    ``histograms`` (B, T, |Y|) the counts visible before each target.
    """
    emb = params.embedding(inputs)
    ctx = contexts.unsqueeze(1).expand(-1, inputs.shape[1], -1)
    x = params.dropout(torch.cat([emb, ctx], dim=-1))
    h0 = contexts.new_zeros(1, inputs.shape[0], params.d)
    hidden, _ = params.gru(x, h0)
    logits, _ = mixed_logits(hidden, histograms, params, use_prior=use_prior)
    return torch.log_softmax(logits, dim=-1)


def apply_repetition_penalty(probs, effective, pi, normalize=True):
    """Divide each probability by ``pi * effective + 1`` and renormalize.

    ``normalize=False`` returns the raw divided scores, which rank words the same way.
    """
    if pi < 0:
        raise ValueError("penalty must be >= 0")
    probs = np.asarray(probs, dtype=np.float64)
    scaled = probs / (pi * np.asarray(effective, dtype=np.float64) + 1.0)
    if not normalize:
        return scaled
    return scaled / scaled.sum(-1, keepdims=True)


@dataclass
class BeamHypothesis:
    tokens: tuple
    score: float
    hidden: torch.Tensor = field(repr=False)
    histogram: np.ndarray = field(repr=False)
    betas: tuple = ()

    @property
    def finished(self):
        return bool(self.tokens) and self.tokens[-1] == EOS

    def key(self):
        return (-self.score, len(self.tokens), self.tokens)


@torch.no_grad()
def beam_search_hypotheses(params, context, init_histogram, rho, width=3, max_len=30, penalty=2.0,
                           count_norm=True, use_prior=True):
    """Beam search over the penalized, renormalized word distribution.

    Each step expands every live hypothesis, keeps the best ``width`` expansions
    overall, and retires those ending in EOS (or reaching ``max_len``).  Search
    stops once no live hypothesis can beat the best finished one, since scores
    never increase.  Returns finished hypotheses best first.
    """
    if width < 1 or max_len < 1:
        raise ValueError("width and max_len must be >= 1")
    dtype = next(params.parameters()).dtype
    context = torch.as_tensor(context, dtype=dtype)
    alive = [BeamHypothesis((), 0.0, context.new_zeros(params.d), np.asarray(init_histogram).copy())]
    finished = []
    allowed = np.ones(params.vocab_size, dtype=bool)
    allowed[list(BANNED_OUTPUTS)] = False
    allowed_ids = np.flatnonzero(allowed)
    for step in range(max_len):
        prev = torch.tensor([h.tokens[-1] if h.tokens else BOS for h in alive])
        hidden = torch.stack([h.hidden for h in alive])
        hists = torch.as_tensor(np.stack([h.histogram for h in alive]), dtype=dtype)
        probs, new_hidden, beta = word_distribution(prev, hidden, context.expand(len(alive), -1), hists,
                                                    params, use_prior=use_prior)
        probs = probs.double().numpy()
        candidates = []
        for b, hyp in enumerate(alive):
            eff = effective_counts(hyp.histogram, rho, count_norm)
            with np.errstate(divide="ignore"):
                logp = np.log(apply_repetition_penalty(probs[b], eff, penalty))
            # only a hypothesis's own top `width` expansions can survive the global cut
            top = allowed_ids[np.argsort(-logp[allowed_ids], kind="stable")[:width]]
            for w in top:
                candidates.append((hyp.score + float(logp[w]), hyp.tokens + (int(w),), b))
        candidates.sort(key=lambda c: (-c[0], c[1]))
        alive_next = []
        for score, tokens, b in candidates[:width]:
            parent = alive[b]
            hyp = BeamHypothesis(tokens, score, new_hidden[b], update_histogram(parent.histogram, tokens[-1]),
                                 parent.betas + (float(beta[b]),))
            if hyp.finished or step == max_len - 1:
                finished.append(hyp)
            else:
                alive_next.append(hyp)
        alive = alive_next
        if not alive:
            break
        if finished and max(h.score for h in alive) <= max(h.score for h in finished):
            break
    finished.sort(key=BeamHypothesis.key)
    return finished


def beam_search(params, context, init_histogram, rho, width=3, max_len=30, penalty=2.0, count_norm=True,
                use_prior=True):
    """Best token list (ends with EOS unless truncated at ``max_len``)."""
    best = beam_search_hypotheses(params, context, init_histogram, rho, width, max_len, penalty, count_norm,
                                  use_prior)[0]
    return list(best.tokens)


def sequence_score(params, context, init_histogram, rho, tokens, penalty=2.0, count_norm=True, use_prior=True):
    """Cumulative penalized log-probability of a fixed token sequence."""
    dtype = next(params.parameters()).dtype
    context = torch.as_tensor(context, dtype=dtype)
    hidden = context.new_zeros(params.d)
    hist = np.asarray(init_histogram).copy()
    prev, score = BOS, 0.0
    with torch.no_grad():
        for w in tokens:
            probs, hidden, _ = word_distribution(torch.tensor(prev), hidden, context,
                                                 torch.as_tensor(hist, dtype=dtype), params, use_prior=use_prior)
            p = apply_repetition_penalty(probs.double().numpy(), effective_counts(hist, rho, count_norm), penalty)
            score += math.log(p[w]) if p[w] > 0 else -math.inf
            hist = update_histogram(hist, w)
            prev = w
    return score
