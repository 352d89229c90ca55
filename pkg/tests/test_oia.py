import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from conftest import random_oia
from oiastory.config import Ablation
from oiastory.oia import (AttentionCalibration, FactorWeights, OrderedImageAttention, all_attention_maps,
                          attended_representations, attention_beliefs, belief_logits, interaction_factor,
                          local_factor, message)


def feats(rng, n, k, d):
    return torch.as_tensor(rng.normal(size=(n, k, d)))


def test_beliefs_shape_and_normalization(rng):
    w, c = random_oia(rng, 5, 8)
    b = attention_beliefs(feats(rng, 5, 4, 8), 2, w, c)
    assert b.shape == (5, 4)
    assert torch.allclose(b.sum(-1), torch.ones(5, dtype=b.dtype), atol=1e-12)


def test_single_region_gets_full_belief(rng):
    w, c = random_oia(rng, 3, 4)
    b = attention_beliefs(feats(rng, 3, 1, 4), 1, w, c)
    assert torch.all(b == 1.0)


def test_sentence_index_out_of_range(rng):
    w, c = random_oia(rng, 3, 4)
    with pytest.raises(IndexError):
        attention_beliefs(feats(rng, 3, 2, 4), 3, w, c)


def test_zero_projection_drops_factor(rng):
    w, _ = random_oia(rng, 2, 4)
    with torch.no_grad():
        w.L_fwd.zero_()
    x = torch.as_tensor(rng.normal(size=(3, 4)))
    assert torch.all(interaction_factor(x, x, w.L_fwd, w.R_fwd) == 0)
    assert torch.all(message(x, x, w.L_fwd, w.R_fwd) == 0)


def test_message_is_sum_of_pairwise_factors(rng):
    w, _ = random_oia(rng, 2, 5)
    t, s = torch.as_tensor(rng.normal(size=(3, 5))), torch.as_tensor(rng.normal(size=(4, 5)))
    want = torch.stack([sum(interaction_factor(t[k], s[j], w.L_fwd, w.R_fwd) for j in range(4)) for k in range(3)])
    assert torch.allclose(message(t, s, w.L_fwd, w.R_fwd), want, atol=1e-12)


def test_local_factor_value(rng):
    w, _ = random_oia(rng, 1, 3)
    r = rng.normal(size=3)
    got = local_factor(torch.as_tensor(r), w).item()
    assert got == pytest.approx(oracles.local(oracles.mat(w.V), oracles.vec(w.v), list(r)), abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 5), st.booleans(), st.integers(0, 2**31))
def test_matches_loop_oracle(n, k, d, tied, seed):
    rng = np.random.default_rng(seed)
    w, c = random_oia(rng, n, d, tied)
    x = feats(rng, n, k, d)
    W, A, F = oracles.oia_weights(w), oracles.oia_calibration(c), x.tolist()
    vec = torch.softmax(belief_logits(x, w, c), -1)
    for s in range(n):
        want = torch.tensor(oracles.oia_beliefs(F, W, A, s), dtype=torch.float64)
        assert torch.allclose(attention_beliefs(x, s, w, c), want, rtol=0, atol=1e-9)
        assert torch.allclose(vec[s], want, rtol=0, atol=1e-9)


def test_batched_maps_match_unbatched(rng):
    w, c = random_oia(rng, 3, 4)
    x = torch.as_tensor(rng.normal(size=(2, 3, 5, 4)))
    b, a = all_attention_maps(x, w, c)
    for j in range(2):
        bj, aj = all_attention_maps(x[j], w, c)
        assert torch.allclose(b[j], bj) and torch.allclose(a[j], aj)
    assert a.shape == (2, 3, 3, 4)


def test_attended_lies_in_region_hull(rng):
    w, c = random_oia(rng, 3, 4)
    x = feats(rng, 3, 5, 4)
    a = attended_representations(attention_beliefs(x, 0, w, c), x)
    assert torch.all(a <= x.max(1).values + 1e-12) and torch.all(a >= x.min(1).values - 1e-12)


def test_order_matters_with_untied_weights(rng):
    w, c = random_oia(rng, 3, 6)
    x = feats(rng, 3, 4, 6)
    swapped = x[[2, 1, 0]]
    b = attention_beliefs(x, 1, w, c)
    b2 = attention_beliefs(swapped, 1, w, c)
    assert (b[1] - b2[1]).abs().max() > 1e-6


def test_tied_weights_and_equal_scalars_are_order_free(rng):
    w, c = random_oia(rng, 4, 6, tied=True)
    with torch.no_grad():
        c.current.fill_(0.7)
        c.context.fill_(0.3)
        c.local.fill_(1.1)
        c.self_.fill_(0.9)
    x = feats(rng, 4, 3, 6)
    perm = [3, 1, 0, 2]
    b = attention_beliefs(x, 1, w, c)
    b2 = attention_beliefs(x[perm], 1, w, c)
    assert torch.allclose(b[1], b2[1], rtol=0, atol=1e-12)


def test_calibration_scalar_count():
    for n in (1, 3, 5):
        calib = AttentionCalibration(n)
        assert calib.scalar_count() == 4 * n - 2
        cur, ctx = calib.pairwise()
        live = calib.local.shape[1] + calib.self_.shape[1] + int((cur[0] != 0).sum()) + int((ctx[0] != 0).sum())
        assert live == 4 * n - 2
        assert torch.all(calib.local == 1.0)


def test_calibration_export_shape():
    records = AttentionCalibration(3).export()
    assert [r["s"] for r in records] == [0, 1, 2]
    assert sorted(records[1]["current_from"]) == [0, 2]


def test_factor_weights_init_range():
    w = FactorWeights(64)
    bound = (3.0 / 64) ** 0.5
    assert all(p.abs().max() <= bound for p in w.parameters())
    assert not hasattr(FactorWeights(4, tied=True), "L_bwd")


@pytest.mark.parametrize("flag", ["no_local", "no_self", "no_directional"])
def test_ablation_flags_remove_terms(rng, flag):
    w, c = random_oia(rng, 3, 4)
    x = feats(rng, 3, 2, 4)
    full = belief_logits(x, w, c)
    ablated = belief_logits(x, w, c, Ablation(**{flag: True}))
    assert not torch.allclose(full, ablated)
    b = attention_beliefs(x, 1, w, c, Ablation(**{flag: True}))
    assert torch.allclose(torch.softmax(ablated[1], -1), b, atol=1e-12)


def test_no_oia_gives_uniform_beliefs(rng):
    module = OrderedImageAttention(3, 4, flags=Ablation(no_oia=True)).double()
    b, _ = module(feats(rng, 3, 5, 4))
    assert torch.all(b == 0.2)


def test_no_direction_ties_module_weights():
    module = OrderedImageAttention(3, 4, flags=Ablation(no_direction=True))
    assert module.weights.tied
