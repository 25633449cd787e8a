import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from necil.backbone import TokenSet
from necil.errors import RejectedInputError
from necil.pks import WeightMode, compute_patch_weights, pks_loss

import oracles
from oracles import central_difference_grad, relative_error


def _tokens(cls, patches):
    return TokenSet(torch.as_tensor(patches, dtype=torch.float64), torch.as_tensor(cls, dtype=torch.float64))


def test_all_patches_on_cls_gives_unit_weights():
    cls = torch.tensor([0.3, -1.0, 2.0], dtype=torch.float64)
    pw = compute_patch_weights(_tokens(cls, cls.repeat(5, 1)), epsilon=1e-8)
    assert torch.allclose(pw.raw, torch.full((5,), 1e8, dtype=torch.float64))
    assert torch.equal(pw.normalized, torch.ones(5, dtype=torch.float64))


def test_two_patch_closed_form():
    eps, d = 1e-8, 3.0
    tokens = _tokens([0.0, 0.0], [[0.0, 0.0], [d, 0.0]])
    w = compute_patch_weights(tokens, epsilon=eps).normalized
    assert w[0] == 1.0
    assert abs(w[1].item() - eps / (d + eps)) < 1e-20
    assert abs(w[1].item() - eps / d) / (eps / d) < 1e-8


def test_four_patch_distances():
    dists = [1.0, 2.0, 4.0, 0.5]
    tokens = _tokens([0.0, 0.0], [[r, 0.0] for r in dists])
    w = compute_patch_weights(tokens, epsilon=1e-8).normalized.numpy()
    expected = oracles.patch_weights([0.0, 0.0], [[r, 0.0] for r in dists], eps=1e-8)
    np.testing.assert_allclose(w, expected, rtol=0, atol=1e-12)
    np.testing.assert_allclose(w, [0.5, 0.25, 0.125, 1.0], atol=1e-7)


@pytest.mark.parametrize("mode", list(WeightMode))
def test_modes_match_oracle(mode):
    rng = np.random.default_rng(0)
    cls, patches = rng.normal(size=4), rng.normal(size=(6, 4))
    pw = compute_patch_weights(_tokens(cls, patches), mode)
    np.testing.assert_allclose(pw.normalized.numpy(), oracles.patch_weights(cls, patches, mode.value),
                               rtol=0, atol=1e-12)
    assert pw.mode is mode and (pw.raw > 0).all()
    assert pw.normalized.max() == 1.0


def test_epsilon_must_be_positive():
    with pytest.raises(RejectedInputError):
        compute_patch_weights(_tokens([0.0], [[1.0]]), epsilon=0.0)


vectors = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 5)),
                 elements=st.floats(-10, 10, allow_nan=False))


@settings(max_examples=50, deadline=None)
@given(vectors)
def test_inverse_distance_monotone_and_bounded(patches):
    cls = np.zeros(patches.shape[1])
    tokens = _tokens(cls, patches)
    w = compute_patch_weights(tokens).normalized.numpy()
    dist = np.linalg.norm(patches, axis=1)
    assert w.max() == 1.0 and (w > 0).all() and (w <= 1).all()
    for a in range(len(w)):
        for b in range(len(w)):
            if dist[a] < dist[b]:
                assert w[a] >= w[b]


def test_identical_tokens_give_zero_loss():
    rng = np.random.default_rng(1)
    t = _tokens(rng.normal(size=4), rng.normal(size=(3, 4)))
    assert pks_loss(t, t, compute_patch_weights(t)).item() == 0.0


def test_only_cls_difference():
    rng = np.random.default_rng(2)
    patches, cls = rng.normal(size=(3, 4)), rng.normal(size=4)
    shift = np.array([3.0, 4.0, 0.0, 0.0])
    cur, old = _tokens(cls, patches), _tokens(cls + shift, patches)
    assert abs(pks_loss(cur, old, compute_patch_weights(cur)).item() - 5.0) < 1e-12


def test_hand_set_two_patches():
    cur = _tokens([0.0, 0.0], [[1.0, 0.0], [0.0, 2.0]])
    old = _tokens([1.0, 1.0], [[0.0, 0.0], [3.0, 6.0]])
    w = torch.tensor([0.5, 1.0], dtype=torch.float64)
    expected = 0.5 * 1.0 + 1.0 * 5.0 + np.sqrt(2.0)
    assert abs(pks_loss(cur, old, w).item() - expected) < 1e-12
    assert abs(expected - oracles.pks(cur.patch_tokens, cur.cls_token, old.patch_tokens,
                                      old.cls_token, [0.5, 1.0])) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_uniform_mode_is_plain_token_distillation(seed):
    rng = np.random.default_rng(seed)
    cur, old = (_tokens(rng.normal(size=5), rng.normal(size=(4, 5))) for _ in range(2))
    loss = pks_loss(cur, old, compute_patch_weights(cur, "uniform")).item()
    plain = sum(np.linalg.norm(a - b) for a, b in zip(cur.patch_tokens.numpy(), old.patch_tokens.numpy()))
    plain += np.linalg.norm(cur.cls_token.numpy() - old.cls_token.numpy())
    assert loss >= 0
    assert abs(loss - plain) < 1e-6


def test_batched_reductions():
    rng = np.random.default_rng(3)
    cur = _tokens(rng.normal(size=(3, 4)), rng.normal(size=(3, 5, 4)))
    old = _tokens(rng.normal(size=(3, 4)), rng.normal(size=(3, 5, 4)))
    w = compute_patch_weights(cur)
    per = pks_loss(cur, old, w, reduction="none")
    assert per.shape == (3,)
    for b in range(3):
        single = pks_loss(TokenSet(cur.patch_tokens[b], cur.cls_token[b]),
                          TokenSet(old.patch_tokens[b], old.cls_token[b]), w.normalized[b])
        assert abs(per[b].item() - single.item()) < 1e-12
    assert abs(pks_loss(cur, old, w).item() - per.mean().item()) < 1e-12


def test_shape_mismatch_rejected():
    a = _tokens(np.zeros(4), np.zeros((3, 4)))
    b = _tokens(np.zeros(4), np.zeros((2, 4)))
    with pytest.raises(RejectedInputError):
        pks_loss(a, b, torch.ones(3))


def test_gradient_wrt_current_tokens_matches_finite_differences():
    rng = np.random.default_rng(4)
    p_cur = torch.tensor(rng.normal(size=(4, 8)), requires_grad=True)
    c_cur = torch.tensor(rng.normal(size=8), requires_grad=True)
    old = _tokens(rng.normal(size=8), rng.normal(size=(4, 8)))
    weights = compute_patch_weights(TokenSet(p_cur, c_cur)).normalized  # frozen

    def loss():
        return pks_loss(TokenSet(p_cur, c_cur), old, weights)

    loss().backward()
    with torch.no_grad():
        for t in (p_cur, c_cur):
            assert relative_error(t.grad, central_difference_grad(loss, t)) < 1e-4


def test_weights_carry_no_gradient():
    rng = np.random.default_rng(5)
    cls = torch.tensor(rng.normal(size=4), requires_grad=True)
    patches = torch.tensor(rng.normal(size=(3, 4)), requires_grad=True)
    pw = compute_patch_weights(TokenSet(patches, cls))
    assert not pw.normalized.requires_grad and not pw.raw.requires_grad


def test_zero_difference_has_finite_gradient():
    p = torch.zeros(3, 4, dtype=torch.float64, requires_grad=True)
    c = torch.zeros(4, dtype=torch.float64, requires_grad=True)
    t = TokenSet(p, c)
    pks_loss(t, TokenSet(p.detach().clone(), c.detach().clone()), torch.ones(3, dtype=torch.float64)).backward()
    assert torch.isfinite(p.grad).all() and torch.isfinite(c.grad).all()
