import numpy as np
import pytest

from gesture_kd.autograd import Tensor
from gesture_kd.config import PAPER_MODEL, ModelConfig
from gesture_kd.fusion import cross_entropy
from gesture_kd.gradcheck import ZERO_TOL, finite_difference_check
from gesture_kd.nn import count_parameters
from gesture_kd.transformer import (SelfAttention, TransformerBlock, TransformerNet, multi_head_self_attention,
                                    positional_encoding, transformer_block)

# closed form 4*(66*66+66) + (66*264+264) + (264*66+66) + 2*(2*66)
BLOCK_PARAMS = 53_130
# 3 blocks + FC 4224->512, BN 512, FC 512->512, BN 512, FC 512->14, BN 14 (BN counted 4x features)
TRANSFORMER_TOTAL = 3 * BLOCK_PARAMS + 2_163_200 + 2048 + 262_656 + 2048 + 7182 + 56


@pytest.fixture(scope="module")
def paper_net():
    return TransformerNet(PAPER_MODEL, np.random.default_rng(0))


def test_config_invariants():
    assert PAPER_MODEL.heads * PAPER_MODEL.head_dim == PAPER_MODEL.d_model
    assert PAPER_MODEL.head_dim == 6
    assert PAPER_MODEL.flatten_dim == 4224


def test_positional_encoding():
    pe = positional_encoding(64, 66)
    assert pe.shape == (64, 66)
    np.testing.assert_array_equal(pe[0, ::2], 0.0)
    np.testing.assert_array_equal(pe[0, 1::2], 1.0)
    assert np.abs(pe).max() <= 1.0
    np.testing.assert_array_equal(pe, positional_encoding(64, 66))


def test_block_parameter_count():
    block = TransformerBlock(66, 11, 264, np.random.default_rng(0))
    assert count_parameters(block)["total"] == BLOCK_PARAMS


def test_head_counts_and_total(paper_net):
    counts = count_parameters(paper_net)
    assert counts["head.fc1"] == 2_163_200
    assert counts["head.fc2"] == 262_656
    assert counts["head.fc3"] == 7182
    assert counts["head.bn1"] == counts["head.bn2"] == 2048
    assert counts["head.bn3"] == 56
    assert counts["total"] == TRANSFORMER_TOTAL == 2_596_580


def test_output_shapes(paper_net):
    x = Tensor(np.random.default_rng(1).normal(size=(2, 64, 66)))
    h = x + paper_net._timing
    for block in paper_net.blocks:
        h = block(h)
        assert h.shape == (2, 64, 66)
    paper_net.eval()
    feature, logits = paper_net(x)
    assert feature.shape == (2, 512) and logits.shape == (2, 14)


def test_eval_forward_is_deterministic(paper_net):
    paper_net.eval()
    x = np.random.default_rng(2).normal(size=(3, 64, 66))
    a, b = paper_net(x)[1].data, paper_net(x)[1].data
    np.testing.assert_array_equal(a, b)


def test_wrong_window_shape_rejected(paper_net):
    with pytest.raises(ValueError):
        paper_net(np.zeros((1, 32, 66)))


def _attention_oracle(x, att, heads):
    """Plain numpy scaled dot-product attention, written independently."""
    def lin(layer, v):
        return v @ layer.weight.data + layer.bias.data

    q, k, v = lin(att.query, x), lin(att.key, x), lin(att.value, x)
    dh = x.shape[1] // heads
    outs = []
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
        w = np.exp(scores - scores.max(1, keepdims=True))
        w /= w.sum(1, keepdims=True)
        outs.append(w @ v[:, sl])
    return lin(att.output, np.concatenate(outs, axis=1))


def test_attention_matches_hand_computation_one_head():
    rng = np.random.default_rng(3)
    att = SelfAttention(6, 1, rng)
    x = rng.normal(size=(2, 6))
    out = multi_head_self_attention(x, att).data
    np.testing.assert_allclose(out, _attention_oracle(x, att, 1), rtol=1e-13, atol=1e-14)


def test_attention_matches_oracle_multi_head(rng):
    att = SelfAttention(66, 11, rng)
    x = rng.normal(size=(5, 66))
    np.testing.assert_allclose(multi_head_self_attention(x, att).data, _attention_oracle(x, att, 11),
                               rtol=1e-12, atol=1e-13)


def test_attention_single_position(rng):
    att = SelfAttention(6, 2, rng)
    x = rng.normal(size=(1, 6))
    out, weights = multi_head_self_attention(x, att, return_weights=True)
    np.testing.assert_array_equal(weights.data, 1.0)
    expected = (x @ att.value.weight.data + att.value.bias.data) @ att.output.weight.data + att.output.bias.data
    np.testing.assert_allclose(out.data, expected, rtol=1e-13)


def test_identical_rows_give_uniform_attention(rng):
    att = SelfAttention(66, 11, rng)
    x = np.repeat(rng.normal(size=(1, 66)), 64, axis=0)
    _, weights = multi_head_self_attention(x, att, return_weights=True)
    np.testing.assert_allclose(weights.data, 1.0 / 64, rtol=1e-12)


def test_attention_rows_are_distributions(rng):
    att = SelfAttention(66, 11, rng)
    _, weights = multi_head_self_attention(rng.normal(size=(3, 64, 66)), att, return_weights=True)
    np.testing.assert_allclose(weights.data.sum(-1), 1.0, atol=1e-12)


def test_attention_shape_mismatch(rng):
    with pytest.raises(ValueError):
        multi_head_self_attention(rng.normal(size=(4, 5)), SelfAttention(6, 2, rng))


def test_block_order_matches_reference(rng):
    block = TransformerBlock(6, 2, 12, rng)
    x = rng.normal(size=(3, 6))

    def ln(v, norm):
        mu, var = v.mean(-1, keepdims=True), v.var(-1, keepdims=True)
        return (v - mu) / np.sqrt(var + 1e-5) * norm.weight.data + norm.bias.data

    def mish(v):
        return v * np.tanh(np.log1p(np.exp(v)))

    h = ln(x + _attention_oracle(x, block.attention, 2), block.norm1)
    t = mish(h @ block.transition_in.weight.data + block.transition_in.bias.data)
    t = t @ block.transition_out.weight.data + block.transition_out.bias.data
    np.testing.assert_allclose(transformer_block(x, block).data, ln(h + t, block.norm2), rtol=1e-12, atol=1e-13)


def test_batch_permutation_equivariance_in_eval(rng):
    cfg = ModelConfig(seq_len=8, d_model=6, heads=2, ff_dim=24, blocks=2, fc_dim=5, num_classes=3)
    net = TransformerNet(cfg, rng).eval()
    x = rng.normal(size=(5, 8, 6))
    perm = rng.permutation(5)
    np.testing.assert_allclose(net(x[perm])[1].data, net(x)[1].data[perm], rtol=1e-12, atol=1e-14)


def test_gradient_through_block_on_4x66_input(rng):
    block = TransformerBlock(66, 11, 264, rng)
    x = Tensor(rng.normal(size=(4, 66)))
    proj = Tensor(rng.normal(size=(4, 66)))
    assert finite_difference_check(lambda: (transformer_block(x, block) * proj).sum(), x) < 1e-5


def test_full_network_gradient_reduced_config():
    rng = np.random.default_rng(0)
    cfg = ModelConfig(seq_len=8, d_model=6, heads=2, ff_dim=24, blocks=3, fc_dim=5, num_classes=3, dropout=0.0)
    net = TransformerNet(cfg, rng).train()
    x = Tensor(rng.normal(size=(4, 8, 6)))
    y = rng.integers(0, 3, size=4)

    def loss():
        saved = [b.copy() for _, b in net.named_buffers()]
        try:
            return cross_entropy(net(x)[1], y)
        finally:
            for (_, buf), value in zip(net.named_buffers(), saved):
                buf[...] = value

    assert finite_difference_check(loss, [x] + net.parameters(), zero_tol=ZERO_TOL) < 1e-5
