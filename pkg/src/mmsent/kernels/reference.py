"""Pure-numpy reference kernels for the recurrent and convolution loops.

These are the semantic ground truth: the compiled backend must agree
with them to near machine precision (summation order differs, so exact
bit equality across backends is not promised).  Gate layout in every
``(4H,)`` or ``(T, 4H)`` array is four H-wide blocks in the order input
gate, forget gate, output gate, candidate.
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def lstm_forward(x, w, b, h0, c0):
    """Run a unidirectional LSTM over ``x`` of shape (T, I).

    ``w`` is (4H, I+H) and multiplies the concatenation [x_t, h_{t-1}];
    ``b`` is (4H,).  Returns (hs, cs, gates): hidden states (T, H), cell
    states (T, H), and post-activation gate values (T, 4H) kept for the
    backward pass.
    """
    T, I = x.shape
    H = h0.shape[0]
    hs = np.empty((T, H))
    cs = np.empty((T, H))
    gates = np.empty((T, 4 * H))
    h = h0
    c = c0
    for t in range(T):
        z = w[:, :I] @ x[t] + w[:, I:] @ h + b
        i = _sigmoid(z[:H])
        f = _sigmoid(z[H : 2 * H])
        o = _sigmoid(z[2 * H : 3 * H])
        g = np.tanh(z[3 * H :])
        c = f * c + i * g
        h = o * np.tanh(c)
        hs[t] = h
        cs[t] = c
        gates[t, :H] = i
        gates[t, H : 2 * H] = f
        gates[t, 2 * H : 3 * H] = o
        gates[t, 3 * H :] = g
    return hs, cs, gates


def lstm_backward(x, w, h0, c0, hs, cs, gates, d_hs):
    """Backpropagate ``d_hs`` (T, H) through the recurrence.

    Returns (dx, dw, db, dh0, dc0).
    """
    T, I = x.shape
    H = h0.shape[0]
    dx = np.zeros((T, I))
    dw = np.zeros_like(w)
    db = np.zeros(4 * H)
    dh = np.zeros(H)
    dc = np.zeros(H)
    dz = np.empty(4 * H)
    for t in range(T - 1, -1, -1):
        dh = dh + d_hs[t]
        i = gates[t, :H]
        f = gates[t, H : 2 * H]
        o = gates[t, 2 * H : 3 * H]
        g = gates[t, 3 * H :]
        c_prev = cs[t - 1] if t > 0 else c0
        h_prev = hs[t - 1] if t > 0 else h0
        tc = np.tanh(cs[t])
        do = dh * tc
        dct = dh * o * (1.0 - tc * tc) + dc
        dz[:H] = dct * g * i * (1.0 - i)
        dz[H : 2 * H] = dct * c_prev * f * (1.0 - f)
        dz[2 * H : 3 * H] = do * o * (1.0 - o)
        dz[3 * H :] = dct * i * (1.0 - g * g)
        dw[:, :I] += np.outer(dz, x[t])
        dw[:, I:] += np.outer(dz, h_prev)
        db += dz
        dxh = w.T @ dz
        dx[t] = dxh[:I]
        dh = dxh[I:]
        dc = dct * f
    return dx, dw, db, dh, dc


def conv1d_forward(x, w, b, stride, pad_left, pad_right):
    """Correlate ``x`` (T, Ci) with ``w`` (K, Ci, Co) plus bias ``b`` (Co,).

    Zero padding of ``pad_left``/``pad_right`` frames is applied before
    striding.  Output has (T + pad_left + pad_right - K) // stride + 1
    frames.
    """
    T, Ci = x.shape
    K = w.shape[0]
    Tp = T + pad_left + pad_right
    To = (Tp - K) // stride + 1
    xp = np.zeros((Tp, Ci))
    xp[pad_left : pad_left + T] = x
    y = np.broadcast_to(b, (To, b.shape[0])).copy()
    for k in range(K):
        y += xp[k : k + stride * To : stride] @ w[k]
    return y


def conv1d_backward(x, w, stride, pad_left, pad_right, d_y):
    """Gradients of ``conv1d_forward``: returns (dx, dw, db)."""
    T, Ci = x.shape
    K = w.shape[0]
    To = d_y.shape[0]
    Tp = T + pad_left + pad_right
    xp = np.zeros((Tp, Ci))
    xp[pad_left : pad_left + T] = x
    dxp = np.zeros((Tp, Ci))
    dw = np.zeros_like(w)
    for k in range(K):
        window = xp[k : k + stride * To : stride]
        dw[k] = window.T @ d_y
        dxp[k : k + stride * To : stride] += d_y @ w[k].T
    db = d_y.sum(axis=0)
    dx = dxp[pad_left : pad_left + T].copy()
    return dx, dw, db
