"""Ordered image attention: per-sentence beliefs over every image's regions.

For sentence ``s`` each image ``i`` gets a distribution over its ``K`` regions.
The logits of image ``i`` combine a local factor, a self-message and messages
along the edges that join image ``s`` to the other images; preceding images use
the backward factor and subsequent images the forward factor.  Indices are
0-based throughout.
"""
import math

import torch
from torch import nn

from .config import Ablation


def unit(x):
    """Row-normalize; rows with zero norm map to zero (the factor then vanishes)."""
    sq = (x * x).sum(-1, keepdim=True)
    pos = sq > 0
    norm = torch.sqrt(torch.where(pos, sq, torch.ones_like(sq)))
    return torch.where(pos, x / norm, torch.zeros_like(x))


def _uniform(shape, fan_in):
    bound = math.sqrt(3.0 / fan_in)
    return nn.Parameter(torch.empty(shape).uniform_(-bound, bound))


class FactorWeights(nn.Module):
    """Projection pairs for the three interaction factors plus the local factor."""

    def __init__(self, d, tied=False):
        super().__init__()
        self.d = d
        self.tied = tied
        for name in ("L_fwd", "R_fwd", "L_self", "R_self", "V"):
            setattr(self, name, _uniform((d, d), d))
        if not tied:
            self.L_bwd = _uniform((d, d), d)
            self.R_bwd = _uniform((d, d), d)
        self.v = _uniform((d,), d)

    def pair(self, kind):
        if kind == "self":
            return self.L_self, self.R_self
        if kind == "bwd" and not self.tied:
            return self.L_bwd, self.R_bwd
        return self.L_fwd, self.R_fwd


class AttentionCalibration(nn.Module):
    """Calibration scalars indexed by sentence ``s`` and image ``i`` (and ``j``).

    ``current[s, j]`` weighs the message from image ``j`` into image ``s``;
    ``context[s, i]`` weighs the message from image ``s`` into image ``i != s``.
    Diagonals of both are structurally unused, leaving ``4N - 2`` live scalars
    per sentence.
    """

    def __init__(self, n, init=1.0):
        super().__init__()
        self.n = n
        self.local = nn.Parameter(torch.full((n, n), float(init)))
        self.self_ = nn.Parameter(torch.full((n, n), float(init)))
        off = 1.0 - torch.eye(n)
        self.register_buffer("off_diagonal", off)
        self.current = nn.Parameter(torch.full((n, n), float(init)) * off)
        self.context = nn.Parameter(torch.full((n, n), float(init)) * off)

    def scalar_count(self):
        return 4 * self.n - 2

    def pairwise(self):
        return self.current * self.off_diagonal, self.context * self.off_diagonal

    @torch.no_grad()
    def export(self):
        cur, ctx = self.pairwise()
        records = []
        for s in range(self.n):
            records.append({
                "s": s,
                "local": self.local[s].tolist(),
                "self": self.self_[s].tolist(),
                "current_from": {j: float(cur[s, j]) for j in range(self.n) if j != s},
                "context_to": {i: float(ctx[s, i]) for i in range(self.n) if i != s},
            })
        return records


def local_factor(region, weights):
    """v^T relu(V r); broadcasts over leading dimensions."""
    return torch.relu(region @ weights.V.T) @ weights.v


def interaction_factor(target, source, left, right):
    """Cosine between ``left @ target`` and ``right @ source``; 0 if either is zero."""
    return (unit(target @ left.T) * unit(source @ right.T)).sum(-1)


def message(target_regions, source_regions, left, right):
    """Entry k sums the factor between target region k and every source region."""
    return unit(target_regions @ left.T) @ unit(source_regions @ right.T).sum(-2)


def _message_table(features, left, right):
    # table[..., i, j, k]: message from image j into region k of image i
    lh = unit(features @ left.T)
    rs = unit(features @ right.T).sum(-2)
    return torch.einsum("...ikd,...jd->...ijk", lh, rs)


def _self_messages(features, weights):
    left, right = weights.pair("self")
    lh = unit(features @ left.T)
    rs = unit(features @ right.T).sum(-2)
    return (lh * rs.unsqueeze(-2)).sum(-1)


def attention_beliefs(features, s, weights, calib, flags=None):
    """Beliefs ``N x K`` of every image for sentence ``s`` (literal three-case form)."""
    flags = flags or Ablation()
    n, k, _ = features.shape
    if not 0 <= s < n:
        raise IndexError(f"sentence index {s} out of range for {n} images")
    cur, ctx = calib.pairwise()
    zeros = features.new_zeros(n, k)
    logits = zeros.clone()
    if not flags.no_local:
        logits = logits + calib.local[s].unsqueeze(-1) * local_factor(features, weights)
    if not flags.no_self:
        logits = logits + calib.self_[s].unsqueeze(-1) * _self_messages(features, weights)
    if not flags.no_directional:
        rows = []
        for i in range(n):
            if i == s:
                term = zeros[0]
                for j in range(n):
                    if j == s:
                        continue
                    left, right = weights.pair("bwd" if j < s else "fwd")
                    term = term + cur[s, j] * message(features[i], features[j], left, right)
            else:
                left, right = weights.pair("bwd" if i < s else "fwd")
                term = ctx[s, i] * message(features[i], features[s], left, right)
            rows.append(term)
        logits = logits + torch.stack(rows)
    return torch.softmax(logits, dim=-1)


def attended_representations(beliefs, features):
    """Convex combination of each image's regions: ``a_i = sum_k b_ik r_ik``."""
    return torch.einsum("...ik,...ikd->...id", beliefs, features)


def belief_logits(features, weights, calib, flags=None):
    """Logits for all sentences at once, shape ``(..., N, N, K)`` indexed [s, i, k]."""
    flags = flags or Ablation()
    n = features.shape[-3]
    k = features.shape[-2]
    logits = features.new_zeros(features.shape[:-3] + (n, n, k))
    if not flags.no_local:
        logits = logits + calib.local.unsqueeze(-1) * local_factor(features, weights).unsqueeze(-3)
    if not flags.no_self:
        logits = logits + calib.self_.unsqueeze(-1) * _self_messages(features, weights).unsqueeze(-3)
    if not flags.no_directional and n > 1:
        cur, ctx = calib.pairwise()
        before = torch.ones(n, n, dtype=features.dtype).tril(-1)
        after = torch.ones(n, n, dtype=features.dtype).triu(1)
        fwd = _message_table(features, *weights.pair("fwd"))
        bwd = fwd if weights.tied else _message_table(features, *weights.pair("bwd"))
        # image s itself: messages from every other image j
        own = torch.einsum("sj,...sjk->...sk", cur * before, bwd) + torch.einsum("sj,...sjk->...sk", cur * after, fwd)
        # image i != s: one message from image s
        other = (ctx * before).unsqueeze(-1) * bwd.transpose(-3, -2) + (ctx * after).unsqueeze(-1) * fwd.transpose(-3, -2)
        eye = torch.eye(n, dtype=features.dtype)
        logits = logits + other + eye.unsqueeze(-1) * own.unsqueeze(-2)
    return logits


def all_attention_maps(features, weights, calib, flags=None):
    """Beliefs ``(..., N, N, K)`` and attended images ``(..., N, N, d)``, both indexed [s, i]."""
    flags = flags or Ablation()
    if flags.no_oia:
        n, k = features.shape[-3], features.shape[-2]
        beliefs = features.new_full(features.shape[:-3] + (n, n, k), 1.0 / k)
    else:
        beliefs = torch.softmax(belief_logits(features, weights, calib, flags), dim=-1)
    attended = torch.einsum("...sik,...ikd->...sid", beliefs, features)
    return beliefs, attended


class OrderedImageAttention(nn.Module):
    def __init__(self, n, d, tied=False, flags=None):
        super().__init__()
        self.flags = flags or Ablation(no_direction=tied)
        self.weights = FactorWeights(d, tied=tied or self.flags.no_direction)
        self.calib = AttentionCalibration(n)

    def forward(self, features):
        return all_attention_maps(features, self.weights, self.calib, self.flags)
