import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from msstyle.config import TINY_MODEL, ModelConfig
from msstyle.corpus import build_context_window
from msstyle.errors import ContractError
from msstyle.extractor import (
    MultiScaleExtractor,
    ReferenceEncoder,
    StyleTokenLayer,
    combine_styles,
    compute_residuals,
    encode_reference,
    extract_multiscale,
    style_token_attention,
)


# --- reference encoder -------------------------------------------------------

def test_reference_encoder_width_and_determinism():
    enc = ReferenceEncoder(80, (8, 16), 16).eval()
    mel = torch.randn(37, 80)
    a, b = encode_reference(mel, enc), encode_reference(mel, enc)
    assert a.shape == (16,)
    assert torch.equal(a, b)


def test_reference_encoder_single_frame():
    enc = ReferenceEncoder(80, (8, 16), 16)
    assert torch.isfinite(encode_reference(torch.randn(1, 80), enc)).all()


def test_reference_encoder_rejects_empty():
    enc = ReferenceEncoder(80, (8, 16), 16)
    with pytest.raises(ContractError):
        encode_reference(torch.zeros(0, 80), enc)


def test_padding_does_not_change_embedding():
    enc = ReferenceEncoder(80, (8, 16), 16)
    short, long = torch.randn(9, 80), torch.randn(30, 80)
    batch = torch.zeros(2, 30, 80)
    batch[0, :9], batch[1] = short, long
    out = encode_reference(batch, enc, lengths=[9, 30])
    torch.testing.assert_close(out[0], encode_reference(short, enc), rtol=0, atol=1e-6)
    torch.testing.assert_close(out[1], encode_reference(long, enc), rtol=0, atol=1e-6)


# --- residuals ---------------------------------------------------------------

def test_residual_hand_example():
    R_g, R_s, R_w = compute_residuals(np.array([1.0, 0.0]), np.array([3.0, 2.0]), np.array([[4.0, 2.0]]))
    np.testing.assert_array_equal(R_g, [1, 0])
    np.testing.assert_array_equal(R_s, [2, 2])
    np.testing.assert_array_equal(R_w, [[1, 0]])


def test_residuals_identical_levels_vanish():
    e = np.array([0.3, -1.2, 2.0])
    _, R_s, R_w = compute_residuals(e, e, np.stack([e, e]))
    assert not R_s.any() and not R_w.any()


def test_residual_width_mismatch():
    with pytest.raises(ContractError):
        compute_residuals(np.zeros(3), np.zeros(4), np.zeros((2, 3)))


def test_residual_needs_subwords():
    with pytest.raises(ContractError):
        compute_residuals(np.zeros(3), np.zeros(3), np.zeros((0, 3)))


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, 6, elements=st.floats(-1e3, 1e3)),
    arrays(np.float64, 6, elements=st.floats(-1e3, 1e3)),
    arrays(np.float64, (3, 6), elements=st.floats(-1e3, 1e3)),
)
def test_residual_reconstruction_property(E_g, E_s, E_w):
    R_g, R_s, R_w = compute_residuals(E_g, E_s, E_w)
    np.testing.assert_allclose(R_g + R_s, E_s, rtol=1e-12, atol=1e-9)
    np.testing.assert_allclose(R_g + R_s + R_w, E_w, rtol=1e-12, atol=1e-9)


def test_residuals_work_on_torch_batches():
    E_g, E_s, E_w = torch.randn(4, 5), torch.randn(4, 5), torch.randn(4, 3, 5)
    R_g, R_s, R_w = compute_residuals(E_g, E_s, E_w)
    torch.testing.assert_close((R_g + R_s)[:, None, :] + R_w, E_w)


# --- style token attention ---------------------------------------------------

def _oracle(residual, layer: StyleTokenLayer):
    """Loop-based multi-head softmax over the token bank."""
    t = np.tanh(layer.tokens.detach().double().numpy())
    Wq = layer.query.weight.detach().double().numpy()
    Wk = layer.key.weight.detach().double().numpy()
    Wv = layer.value.weight.detach().double().numpy()
    q = Wq @ residual
    out, weights = [], []
    h, d = layer.n_heads, layer.d_head
    for head in range(h):
        sl = slice(head * d, (head + 1) * d)
        logits = [float(q[sl] @ (Wk @ tk)[sl]) / math.sqrt(d) for tk in t]
        m = max(logits)
        e = [math.exp(x - m) for x in logits]
        w = [x / sum(e) for x in e]
        weights.append(w)
        out.append(sum(wk * (Wv @ tk)[sl] for wk, tk in zip(w, t)))
    return np.concatenate(out), np.array(weights)


@pytest.mark.parametrize("heads", [1, 2, 4])
def test_token_attention_matches_oracle(heads):
    torch.manual_seed(heads)
    layer = StyleTokenLayer(8, 5, heads)
    r = np.random.default_rng(heads).normal(size=8)
    out, w = style_token_attention(torch.tensor(r, dtype=torch.float32), layer, return_weights=True)
    ref_out, ref_w = _oracle(r, layer)
    np.testing.assert_allclose(out.detach().numpy(), ref_out, atol=1e-6)
    np.testing.assert_allclose(w.detach().numpy(), ref_w, atol=1e-6)


def test_single_token_returns_its_value():
    layer = StyleTokenLayer(6, 1, 1)
    out = style_token_attention(torch.randn(6), layer)
    torch.testing.assert_close(out, layer.value_projections()[0])


def test_uniform_logits_give_mean_of_values():
    layer = StyleTokenLayer(6, 4, 1)
    out, w = style_token_attention(torch.zeros(6), layer, return_weights=True)
    torch.testing.assert_close(w, torch.full((1, 4), 0.25))
    torch.testing.assert_close(out, layer.value_projections().mean(dim=0))


def test_token_output_lies_in_value_hull():
    """With one head the output is a convex combination of the token values."""
    layer = StyleTokenLayer(4, 3, 1)
    out, w = style_token_attention(torch.randn(4), layer, return_weights=True)
    assert (w >= 0).all() and abs(float(w.detach().sum()) - 1) < 1e-6
    torch.testing.assert_close(out, w[0] @ layer.value_projections())


def test_zero_tokens_rejected():
    with pytest.raises(ContractError):
        StyleTokenLayer(4, 0, 1)


def test_token_gradient_finite_difference():
    torch.manual_seed(3)
    layer = StyleTokenLayer(6, 3, 2).double()
    r = torch.randn(6, dtype=torch.float64, requires_grad=True)
    loss = style_token_attention(r, layer).pow(2).sum()
    (grad,) = torch.autograd.grad(loss, r)
    eps = 1e-6
    for k in range(6):
        d = torch.zeros(6, dtype=torch.float64)
        d[k] = eps
        fd = (style_token_attention(r + d, layer).pow(2).sum() - style_token_attention(r - d, layer).pow(2).sum()) / (2 * eps)
        assert abs(float(fd.detach()) - float(grad[k])) < 1e-6


# --- full extractor ----------------------------------------------------------

def test_extractor_shapes(dataset):
    ex = MultiScaleExtractor(TINY_MODEL)
    batch = dataset.batch(range(8))
    out = ex(batch)
    W = int(batch.n_subwords.max())
    assert out.S_g.shape == (8, TINY_MODEL.d_style)
    assert out.S_w.shape == (8, W, TINY_MODEL.d_style)
    for b in range(8):
        n = int(batch.n_subwords[b])
        assert not out.S_w[b, n:].any()


def test_combination_is_exact_sum(dataset):
    ex = MultiScaleExtractor(TINY_MODEL)
    out = ex(dataset.batch(range(4)))
    comb = out.combined()
    n = int(out.subword_mask[0].sum())
    for i in range(n):
        assert torch.equal(comb[0, i], (out.S_g[0] + out.S_s[0]) + out.S_w[0, i])


def test_combine_styles_shapes():
    out = combine_styles(torch.ones(2, 3), torch.ones(2, 3), torch.zeros(2, 4, 3))
    assert out.shape == (2, 4, 3) and float(out.max()) == 2.0


def test_unused_levels_are_zero(dataset):
    ex = MultiScaleExtractor(TINY_MODEL)
    b = dataset.batch(range(3))
    out = ex(b, levels=1)
    assert not out.S_s.any() and not out.S_w.any()
    torch.testing.assert_close(out.E_s, out.E_g)
    out2 = ex(b, levels=2)
    assert not out2.S_w.any() and out2.S_s.any()


def test_single_window_matches_batch(toy8, dataset):
    ex = MultiScaleExtractor(TINY_MODEL)
    window = build_context_window(toy8, 3, TINY_MODEL.context_radius, dataset.windows[0].past[0])
    S_g, S_s, S_w, comb = extract_multiscale(window, ex, dataset.featurizer)
    out = ex(dataset.batch(range(8)))
    n = len(toy8[3].subwords)
    assert S_w.shape[0] == n and comb.shape[0] == n
    torch.testing.assert_close(S_g, out.S_g[3], rtol=0, atol=1e-5)
    torch.testing.assert_close(S_w, out.S_w[3, :n], rtol=0, atol=1e-5)


def test_level_parameters_are_disjoint(dataset):
    """Each level's encoder output depends only on that level's own parameters."""
    ex = MultiScaleExtractor(TINY_MODEL)
    b = dataset.batch(range(2))
    out = ex(b)
    for level, E in (("global", out.E_g), ("sentence", out.E_s), ("subword", out.E_w)):
        grads = torch.autograd.grad(E.sum(), list(ex.parameters()), allow_unused=True, retain_graph=True)
        touched = {name for (name, _), g in zip(ex.named_parameters(), grads)
                   if g is not None and bool(g.abs().sum() > 0)}
        assert touched
        assert all(name.startswith(f"levels.{level}.encoder.") for name in touched), touched


def test_config_validates_heads():
    with pytest.raises(ContractError):
        ModelConfig(d_style=10, token_heads=4)
