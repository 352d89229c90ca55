"""Image-sentence attention: pick which attended images feed sentence ``s``.

Only a local factor and a self-message among the attended images of the same
sentence enter the logits, so ``c_s`` never depends on other sentences' maps.
"""
import torch
from torch import nn

from .oia import _uniform, unit


class IsaParams(nn.Module):
    def __init__(self, n, d, init=1.0):
        super().__init__()
        self.n = n
        self.L = _uniform((d, d), d)
        self.R = _uniform((d, d), d)
        self.V = _uniform((d, d), d)
        self.v = _uniform((d,), d)
        self.alpha_local = nn.Parameter(torch.full((n,), float(init)))
        self.alpha_self = nn.Parameter(torch.full((n,), float(init)))


def isa_local(attended, params):
    return torch.relu(attended @ params.V.T) @ params.v


def isa_self_messages(attended, params):
    """Self-message of every attended image: sum of cosines to all of them."""
    lh = unit(attended @ params.L.T)
    rs = unit(attended @ params.R.T).sum(-2)
    return (lh * rs.unsqueeze(-2)).sum(-1)


def isa_self_message(attended, i, params):
    return isa_self_messages(attended, params)[..., i]


def context_embedding(attended, s, params):
    """Context ``c_s`` (d,) and image weights (N,) from the ``N x d`` attended images of sentence ``s``."""
    logits = params.alpha_local[s] * isa_local(attended, params) + params.alpha_self[s] * isa_self_messages(attended, params)
    weights = torch.softmax(logits, dim=-1)
    return weights @ attended, weights


def all_contexts(attended, params, disabled=False):
    """Contexts ``(..., N, d)`` and weights ``(..., N, N)`` for attended images indexed [s, i]."""
    if disabled:
        n = attended.shape[-2]
        weights = attended.new_full(attended.shape[:-1], 1.0 / n)
    else:
        logits = (params.alpha_local.unsqueeze(-1) * isa_local(attended, params)
                  + params.alpha_self.unsqueeze(-1) * isa_self_messages(attended, params))
        weights = torch.softmax(logits, dim=-1)
    contexts = torch.einsum("...si,...sid->...sd", weights, attended)
    return contexts, weights
