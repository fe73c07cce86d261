"""Recurrent and convolutional layer math on top of :mod:`csihar.autodiff`.

Gate weights are stored stacked along the first axis so one matrix product
serves all gates: LSTM rows are ordered (input, forget, cell, output) and
GRU rows (update, reset, candidate).  ``W`` is [G*hidden x input], ``U`` is
[G*hidden x hidden] and ``b`` is [G*hidden].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from csihar import autodiff as ad
from csihar.autodiff import Tensor, _node, _SliceGrad
from csihar.errors import ShapeError

LSTM_GATES = ("input", "forget", "cell", "output")
GRU_GATES = ("update", "reset", "candidate")


@dataclass
class LstmParams:
    W: Tensor
    U: Tensor
    b: Tensor

    @property
    def hidden(self) -> int:
        return self.U.shape[1]

    @property
    def input_size(self) -> int:
        return self.W.shape[1]

    def gate(self, name: str):
        """``(W_g, U_g, b_g)`` arrays for one gate."""
        i = LSTM_GATES.index(name)
        h = self.hidden
        rows = slice(i * h, (i + 1) * h)
        return self.W.data[rows], self.U.data[rows], self.b.data[rows]

    def check(self):
        h = self.hidden
        if self.W.shape[0] != 4 * h or self.U.shape != (4 * h, h) or self.b.shape != (4 * h,):
            raise ShapeError(f"inconsistent LSTM params W{self.W.shape} U{self.U.shape} "
                             f"b{self.b.shape}")


@dataclass
class GruParams:
    W: Tensor
    U: Tensor
    b: Tensor

    @property
    def hidden(self) -> int:
        return self.U.shape[1]

    @property
    def input_size(self) -> int:
        return self.W.shape[1]

    def gate(self, name: str):
        i = GRU_GATES.index(name)
        h = self.hidden
        rows = slice(i * h, (i + 1) * h)
        return self.W.data[rows], self.U.data[rows], self.b.data[rows]

    def check(self):
        h = self.hidden
        if self.W.shape[0] != 3 * h or self.U.shape != (3 * h, h) or self.b.shape != (3 * h,):
            raise ShapeError(f"inconsistent GRU params W{self.W.shape} U{self.U.shape} "
                             f"b{self.b.shape}")


def _as_batch(x: Tensor, width: int, what: str):
    if x.ndim == 1:
        x = ad.reshape(x, (1, x.shape[0]))
        squeeze = True
    else:
        squeeze = False
    if x.ndim != 2 or x.shape[1] != width:
        raise ShapeError(f"{what}: expected width {width}, got shape {x.shape}")
    return x, squeeze


def _lstm_step(xw: Tensor, h: Tensor, c: Tensor, U: Tensor, hidden: int):
    z = xw + ad.linear(h, U)
    i = ad.sigmoid(z[:, :hidden])
    f = ad.sigmoid(z[:, hidden:2 * hidden])
    g = ad.tanh(z[:, 2 * hidden:3 * hidden])
    o = ad.sigmoid(z[:, 3 * hidden:])
    c_new = f * c + i * g
    return o * ad.tanh(c_new), c_new


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, p: LstmParams):
    """One LSTM step; accepts a single vector or a [B x input] batch."""
    p.check()
    x, squeeze = _as_batch(x, p.input_size, "lstm_cell input")
    h, _ = _as_batch(h, p.hidden, "lstm_cell hidden")
    c, _ = _as_batch(c, p.hidden, "lstm_cell cell state")
    if not x.shape[0] == h.shape[0] == c.shape[0]:
        raise ShapeError(f"lstm_cell: batch sizes {x.shape[0]}, {h.shape[0]}, {c.shape[0]}")
    h_new, c_new = _lstm_step(ad.linear(x, p.W, p.b), h, c, p.U, p.hidden)
    if squeeze:
        return ad.reshape(h_new, (p.hidden,)), ad.reshape(c_new, (p.hidden,))
    return h_new, c_new


def fused_lstm_step(xw: Tensor, step: int, state: Tensor, U: Tensor) -> Tensor:
    """LSTM step as one graph node.

    ``xw`` holds the input projections [B x T x 4h] and ``state`` is
    ``concat(h, c)`` [B x 2h]; returns the new ``concat(h, c)``.
    """
    hidden = U.shape[1]
    h, c = state.data[:, :hidden], state.data[:, hidden:]
    z = xw.data[:, step, :] + h @ U.data.T
    i = expit(z[:, :hidden])
    f = expit(z[:, hidden:2 * hidden])
    g = np.tanh(z[:, 2 * hidden:3 * hidden])
    o = expit(z[:, 3 * hidden:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    out = np.concatenate([o * tc, c_new], axis=1)
    xw_shape, index = xw.shape, (slice(None), step)

    def grad_fn(grad):
        dh, dc = grad[:, :hidden], grad[:, hidden:]
        dct = dc + dh * o * (1.0 - tc * tc)
        dz = np.concatenate([dct * g * i * (1.0 - i), dct * c * f * (1.0 - f),
                             dct * i * (1.0 - g * g), dh * tc * o * (1.0 - o)], axis=1)
        dstate = np.concatenate([dz @ U.data, dct * f], axis=1)
        return (_SliceGrad(index, dz, xw_shape, dz.dtype), dstate, dz.T @ h)

    return _node(out, (xw, state, U), grad_fn, "lstm_step")


def fused_gru_step(xw: Tensor, step: int, h: Tensor, U: Tensor) -> Tensor:
    """GRU step as one graph node; ``xw`` is [B x T x 3h], ``h`` is [B x h]."""
    hidden = U.shape[1]
    hd, Ud = h.data, U.data
    a = xw.data[:, step, :]
    zr = expit(a[:, :2 * hidden] + hd @ Ud[:2 * hidden].T)
    z, r = zr[:, :hidden], zr[:, hidden:]
    rh = r * hd
    n = np.tanh(a[:, 2 * hidden:] + rh @ Ud[2 * hidden:].T)
    out = (1.0 - z) * hd + z * n
    xw_shape, index = xw.shape, (slice(None), step)

    def grad_fn(grad):
        an = grad * z * (1.0 - n * n)
        drh = an @ Ud[2 * hidden:]
        azr = np.concatenate([grad * (n - hd) * z * (1.0 - z), drh * hd * r * (1.0 - r)], axis=1)
        dh = grad * (1.0 - z) + drh * r + azr @ Ud[:2 * hidden]
        dU = np.concatenate([azr.T @ hd, an.T @ rh], axis=0)
        dxw = np.concatenate([azr, an], axis=1)
        return (_SliceGrad(index, dxw, xw_shape, dxw.dtype), dh, dU)

    return _node(out, (xw, h, U), grad_fn, "gru_step")


def _gru_step(xw: Tensor, h: Tensor, U_zr: Tensor, U_h: Tensor, hidden: int):
    hz = ad.linear(h, U_zr)
    z = ad.sigmoid(xw[:, :hidden] + hz[:, :hidden])
    r = ad.sigmoid(xw[:, hidden:2 * hidden] + hz[:, hidden:])
    cand = ad.tanh(xw[:, 2 * hidden:] + ad.linear(r * h, U_h))
    return (1.0 - z) * h + z * cand


def gru_cell(x: Tensor, h: Tensor, p: GruParams):
    """One GRU step with ``h' = (1 - z) * h + z * candidate``."""
    p.check()
    x, squeeze = _as_batch(x, p.input_size, "gru_cell input")
    h, _ = _as_batch(h, p.hidden, "gru_cell hidden")
    hid = p.hidden
    h_new = _gru_step(ad.linear(x, p.W, p.b), h, p.U[:2 * hid], p.U[2 * hid:], hid)
    return ad.reshape(h_new, (hid,)) if squeeze else h_new


def _project(seq: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Input projections for every timestep of a [B x T x in] sequence -> [B x T x G*h]."""
    bsz, t, width = seq.shape
    flat = ad.reshape(seq, (bsz * t, width))
    return ad.reshape(ad.linear(flat, W, b), (bsz, t, W.shape[0]))


def _zeros(batch: int, hidden: int, dtype) -> Tensor:
    return Tensor(np.zeros((batch, hidden), dtype=dtype))


def lstm_sequence(seq: Tensor, p: LstmParams, reverse: bool = False):
    """Run an LSTM over [B x T x in]; returns per-step hidden states in time order."""
    p.check()
    if seq.ndim != 3 or seq.shape[2] != p.input_size:
        raise ShapeError(f"lstm: sequence {seq.shape} incompatible with input size {p.input_size}")
    bsz, t, _ = seq.shape
    if t < 1:
        raise ShapeError("lstm: empty sequence")
    xw = _project(seq, p.W, p.b)
    state = _zeros(bsz, 2 * p.hidden, seq.dtype)
    states = [None] * t
    for step in (range(t - 1, -1, -1) if reverse else range(t)):
        state = fused_lstm_step(xw, step, state, p.U)
        states[step] = state[:, :p.hidden]
    return states


def bilstm_layer(seq: Tensor, p_fwd: LstmParams, p_bwd: LstmParams) -> Tensor:
    """Bidirectional LSTM over [B x T x in] (or [T x in]); output [.. x T x 2*hidden]."""
    squeeze = seq.ndim == 2
    if squeeze:
        seq = ad.reshape(seq, (1,) + seq.shape)
    fwd = lstm_sequence(seq, p_fwd)
    bwd = lstm_sequence(seq, p_bwd, reverse=True)
    out = ad.concat([ad.stack(fwd, axis=1), ad.stack(bwd, axis=1)], axis=2)
    return ad.reshape(out, out.shape[1:]) if squeeze else out


def gru_sequence(seq: Tensor, p: GruParams, return_sequence: bool = False) -> Tensor:
    """Run a GRU over [B x T x in].

    Returns the final hidden state [B x hidden], or every state stacked as
    [B x T x hidden] when ``return_sequence`` is set.
    """
    p.check()
    if seq.ndim != 3 or seq.shape[2] != p.input_size:
        raise ShapeError(f"gru: sequence {seq.shape} incompatible with input size {p.input_size}")
    bsz, t, _ = seq.shape
    hid = p.hidden
    xw = _project(seq, p.W, p.b)
    h = _zeros(bsz, hid, seq.dtype)
    states = []
    for step in range(t):
        h = fused_gru_step(xw, step, h, p.U)
        states.append(h)
    return ad.stack(states, axis=1) if return_sequence else h


def conv1d(x: Tensor, kernels: Tensor, bias=None, stride: int = 1, padding: str = "valid"):
    return ad.conv1d(x, kernels, bias, stride=stride, padding=padding)


def dense(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    return ad.linear(x, W, b)
