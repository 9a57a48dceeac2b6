"""Transformer sub-network: stacked encoder blocks over a skeleton window plus a classifier head."""

from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .config import ModelConfig
from .nn import ClassifierHead, LayerNorm, Linear, Module


def positional_encoding(seq_len: int, d_model: int) -> np.ndarray:
    """Fixed sinusoidal timing signal; even channels sin, odd channels cos."""
    pos = np.arange(seq_len, dtype=np.float64)[:, None]
    i = np.arange(d_model)
    rates = 1.0 / np.power(10000.0, (2 * (i // 2)) / d_model)
    angles = pos * rates[None, :]
    return np.where(i % 2 == 0, np.sin(angles), np.cos(angles))


class SelfAttention(Module):
    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if d_model % heads:
            raise ValueError(f"d_model={d_model} is not divisible by heads={heads}")
        self.heads = heads
        self.query = Linear(d_model, d_model, rng)
        self.key = Linear(d_model, d_model, rng)
        self.value = Linear(d_model, d_model, rng)
        self.output = Linear(d_model, d_model, rng)

    def forward(self, x, return_weights: bool = False):
        return multi_head_self_attention(x, self, return_weights)


def multi_head_self_attention(x, params: SelfAttention, return_weights: bool = False):
    """Bidirectional scaled dot-product attention over a (batch, seq, d_model) input.

    A 2-D (seq, d_model) input is treated as a batch of one and returned 2-D.
    """
    x = ag.as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    b, s, d = x.shape
    if d != params.query.weight.shape[0]:
        raise ValueError(f"attention expects feature dim {params.query.weight.shape[0]}, got {d}")
    h = params.heads
    dh = d // h

    def split(t):
        return t.reshape(b, s, h, dh).transpose(0, 2, 1, 3)

    q, k, v = split(params.query(x)), split(params.key(x)), split(params.value(x))
    scores = ag.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    weights = ag.softmax(scores, axis=-1)
    context = ag.matmul(weights, v).transpose(0, 2, 1, 3).reshape(b, s, d)
    out = params.output(context)
    if squeeze:
        out = out.reshape(s, d)
    return (out, weights) if return_weights else out


class TransformerBlock(Module):
    """Attention, add & norm, Mish transition, add & norm."""

    def __init__(self, d_model: int, heads: int, ff_dim: int, rng: np.random.Generator):
        super().__init__()
        self.attention = SelfAttention(d_model, heads, rng)
        self.norm1 = LayerNorm(d_model)
        self.transition_in = Linear(d_model, ff_dim, rng)
        self.transition_out = Linear(ff_dim, d_model, rng)
        self.norm2 = LayerNorm(d_model)

    def forward(self, x):
        return transformer_block(x, self)


def transformer_block(x, params: TransformerBlock):
    x = ag.as_tensor(x)
    h = params.norm1(x + params.attention(x))
    t = params.transition_out(ag.mish(params.transition_in(h)))
    return params.norm2(h + t)


class TransformerNet(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.blocks = [TransformerBlock(config.d_model, config.heads, config.ff_dim, rng)
                       for _ in range(config.blocks)]
        self.head = ClassifierHead(config.flatten_dim, config.fc_dim, config.num_classes,
                                   config.dropout, rng)
        self._timing = positional_encoding(config.seq_len, config.d_model)

    def forward(self, x):
        return transformer_forward(x, self)


def transformer_forward(x, net: TransformerNet):
    """(batch, seq, d_model) windows -> (512-dim feature, raw logits)."""
    x = ag.as_tensor(x)
    if x.shape[1:] != net._timing.shape:
        raise ValueError(f"transformer expects windows of shape (*, {net._timing.shape[0]}, "
                         f"{net._timing.shape[1]}), got {x.shape}")
    h = x + net._timing
    for block in net.blocks:
        h = block(h)
    return net.head(h.reshape(x.shape[0], -1))
