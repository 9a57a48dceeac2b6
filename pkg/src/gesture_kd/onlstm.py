"""Ordered-neuron LSTM layers and the ON-LSTM sub-network.

Gate columns of the fused weight matrices are laid out as
``[forget, input, output, candidate | master_forget, master_input]`` with the
first four blocks of width ``hidden`` and the two master blocks of width
``hidden // chunk_size``.

Two routes compute the same recurrence: :func:`onlstm_cell_step` builds one
step from autodiff primitives, while :func:`onlstm_sequence` runs a whole
sequence as a single tape node with hand-written backpropagation through
time.  Training uses the fused route; the step route is its reference.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor, _cumax_grad, _cumsum_unit, _sigmoid, _softmax
from .config import ModelConfig
from .nn import ClassifierHead, Module, Parameter, uniform_init


class ONLSTMState(NamedTuple):
    h: Tensor
    c: Tensor


class ONLSTMLayer(Module):
    def __init__(self, input_dim: int, hidden: int, chunk_size: int, rng: np.random.Generator):
        super().__init__()
        if chunk_size <= 0 or hidden % chunk_size:
            raise ValueError(f"chunk_size={chunk_size} must be a positive divisor of hidden={hidden}")
        self.input_dim = input_dim
        self.hidden = hidden
        self.chunk_size = chunk_size
        self.master = hidden // chunk_size
        width = 4 * hidden + 2 * self.master
        fan_in = input_dim + hidden
        self.weight_x = Parameter(uniform_init(rng, (input_dim, width), fan_in), decay=True)
        self.weight_h = Parameter(uniform_init(rng, (hidden, width), fan_in), decay=True)
        self.bias = Parameter(uniform_init(rng, (width,), fan_in))

    def initial_state(self, batch: int) -> ONLSTMState:
        zeros = np.zeros((batch, self.hidden))
        return ONLSTMState(Tensor(zeros), Tensor(zeros.copy()))

    def forward(self, x):
        return onlstm_sequence(self, x)


def onlstm_cell_step(layer: ONLSTMLayer, x_t, state: ONLSTMState, trace: dict | None = None) -> ONLSTMState:
    """One recurrence step built from primitives; ``x_t`` is (batch, input_dim)."""
    x_t = ag.as_tensor(x_t)
    if x_t.shape[-1] != layer.input_dim or state.h.shape[-1] != layer.hidden:
        raise ValueError(f"cell expects input dim {layer.input_dim} and state dim {layer.hidden}, "
                         f"got {x_t.shape[-1]} and {state.h.shape[-1]}")
    H, M, C = layer.hidden, layer.master, layer.chunk_size
    z = ag.matmul(x_t, layer.weight_x) + ag.matmul(state.h, layer.weight_h) + layer.bias
    f = ag.sigmoid(ag.slice_(z, 0, H))
    i = ag.sigmoid(ag.slice_(z, H, 2 * H))
    o = ag.sigmoid(ag.slice_(z, 2 * H, 3 * H))
    c_hat = ag.tanh(ag.slice_(z, 3 * H, 4 * H))
    master_f = ag.cumax(ag.slice_(z, 4 * H, 4 * H + M))
    master_i = 1.0 - ag.cumax(ag.slice_(z, 4 * H + M, 4 * H + 2 * M))
    mf = ag.repeat(master_f, C)
    mi = ag.repeat(master_i, C)
    overlap = mf * mi
    f_eff = f * overlap + (mf - overlap)
    i_eff = i * overlap + (mi - overlap)
    c = f_eff * state.c + i_eff * c_hat
    h = o * ag.tanh(c)
    if ag.CHECK_INVARIANTS:
        _check_step(master_f.data, master_i.data, c.data, state.c.data)
    if trace is not None:
        trace.update(master_forget=master_f.data, master_input=master_i.data, overlap=overlap.data,
                     forget=f_eff.data, input=i_eff.data)
    return ONLSTMState(h, c)


def _check_step(master_f, master_i, c, c_prev):
    ag.check((np.diff(master_f, axis=-1) >= 0).all(), "master forget gate is not non-decreasing")
    ag.check((np.diff(master_i, axis=-1) <= 0).all(), "master input gate is not non-increasing")
    # f_eff, i_eff in [0, 1] and |c_hat| <= 1 bound the per-step growth
    ag.check((np.abs(c) <= np.abs(c_prev) + 1.0 + 1e-12).all(), "cell state grew by more than 1")


def onlstm_sequence(layer: ONLSTMLayer, x) -> Tensor:
    """Run the layer over (batch, seq, input_dim) from a zero state; returns all hidden states."""
    x = ag.as_tensor(x)
    if x.ndim != 3 or x.shape[-1] != layer.input_dim:
        raise ValueError(f"ON-LSTM layer expects (batch, seq, {layer.input_dim}) input, got {x.shape}")
    projected = ag.matmul(x, layer.weight_x) + layer.bias
    return _recurrence(projected, layer.weight_h, layer.hidden, layer.master, layer.chunk_size)


def _recurrence(projected: Tensor, weight_h: Tensor, H: int, M: int, C: int) -> Tensor:
    xp = projected.data
    W = weight_h.data
    B, S, _ = xp.shape
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    hs = np.empty((B, S, H))
    cache = []
    for t in range(S):
        z = xp[:, t] + h @ W
        f = _sigmoid(z[:, :H])
        i = _sigmoid(z[:, H:2 * H])
        o = _sigmoid(z[:, 2 * H:3 * H])
        c_hat = np.tanh(z[:, 3 * H:4 * H])
        sf = _softmax(z[:, 4 * H:4 * H + M], -1)
        si = _softmax(z[:, 4 * H + M:], -1)
        mf = np.repeat(_cumsum_unit(sf, -1), C, -1)
        mi = np.repeat(1.0 - _cumsum_unit(si, -1), C, -1)
        w = mf * mi
        f_eff = f * w + (mf - w)
        i_eff = i * w + (mi - w)
        c_prev = c
        c = f_eff * c_prev + i_eff * c_hat
        if ag.CHECK_INVARIANTS:
            _check_step(mf[:, ::C], mi[:, ::C], c, c_prev)
        tc = np.tanh(c)
        h_prev = h
        h = o * tc
        hs[:, t] = h
        cache.append((h_prev, c_prev, f, i, o, c_hat, sf, si, mf, mi, w, f_eff, i_eff, tc))

    def bw(g):
        dxp = np.empty_like(xp)
        dW = np.zeros_like(W)
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in range(S - 1, -1, -1):
            h_prev, c_prev, f, i, o, c_hat, sf, si, mf, mi, w, f_eff, i_eff, tc = cache[t]
            dh = g[:, t] + dh_next
            do = dh * tc
            dc = dc_next + dh * o * (1.0 - tc * tc)
            df_eff = dc * c_prev
            di_eff = dc * c_hat
            dc_hat = dc * i_eff
            dc_next = dc * f_eff
            dw = df_eff * (f - 1.0) + di_eff * (i - 1.0)
            dmf = (df_eff + dw * mi).reshape(B, M, C).sum(-1)
            dmi = (di_eff + dw * mf).reshape(B, M, C).sum(-1)
            dz = np.concatenate([
                df_eff * w * f * (1.0 - f),
                di_eff * w * i * (1.0 - i),
                do * o * (1.0 - o),
                dc_hat * (1.0 - c_hat * c_hat),
                _cumax_grad(dmf, sf, -1),
                _cumax_grad(-dmi, si, -1),
            ], axis=-1)
            dxp[:, t] = dz
            dW += h_prev.T @ dz
            dh_next = dz @ W.T
        return dxp, dW

    return ag._make(hs, (projected, weight_h), bw, "onlstm_sequence")


class ONLSTMNet(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.layer1 = ONLSTMLayer(config.d_model, config.lstm_hidden, config.chunk_size, rng)
        self.layer2 = ONLSTMLayer(config.lstm_hidden, config.lstm_hidden, config.chunk_size, rng)
        self.head = ClassifierHead(config.lstm_hidden, config.fc_dim, config.num_classes,
                                   config.dropout, rng)

    def forward(self, x):
        return onlstm_forward(self, x)


def onlstm_forward(net: ONLSTMNet, x):
    """(batch, seq, features) windows -> (feature, raw logits).

    Layer 1 returns its full hidden sequence; layer 2 keeps only its final state.
    """
    seq = net.layer1(x)
    last = net.layer2(seq)[:, -1, :]
    return net.head(last)
