"""Dense, GRU and LSTM layers with explicit backward passes.

Recurrent layers take time-major input (T, N, D). Weight layout:

* Dense: W (n_out, n_in), b (n_out,), y = act(x @ W.T + b)
* GRU:   W (D, 3H), U (H, 3H), b (3H,), gate blocks [z, r, n]
* LSTM:  W (D, 4H), U (H, 4H), b (4H,), gate blocks [i, f, g, o]

GRU update: h' = (1 - z) * h + z * n.
"""
from __future__ import annotations

import math

import numpy as np

from . import backend

ACTIVATIONS = ("identity", "tanh", "sigmoid", "relu")


def sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _activate(a, kind):
    if kind == "identity":
        return a
    if kind == "tanh":
        return np.tanh(a)
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "relu":
        return np.maximum(a, 0.0)
    raise ValueError(f"unknown activation {kind!r}")


def _activation_grad(y, a, kind):
    # derivative expressed through the output y (and pre-activation a for relu)
    if kind == "identity":
        return np.ones_like(y)
    if kind == "tanh":
        return 1.0 - y * y
    if kind == "sigmoid":
        return y * (1.0 - y)
    return (a > 0).astype(y.dtype)


def _check_finite(name, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise FloatingPointError(f"non-finite values in {name}")


def _uniform(rng, fan_in, shape):
    lim = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-lim, lim, size=shape)


class Dense:
    def __init__(self, n_in, n_out, activation="identity", rng=None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng or np.random.default_rng(0)
        self.activation = activation
        self.params = {"W": _uniform(rng, n_in, (n_out, n_in)), "b": np.zeros(n_out)}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._cache = None

    @property
    def dims(self):
        return self.params["W"].shape[::-1]

    def forward(self, x):
        W, b = self.params["W"], self.params["b"]
        if x.shape[-1] != W.shape[1]:
            raise ValueError(f"Dense expects {W.shape[1]} inputs, got {x.shape[-1]}")
        a = x @ W.T + b
        y = _activate(a, self.activation)
        self._cache = (x, a, y)
        return y

    def backward(self, dy):
        x, a, y = self._cache
        da = dy * _activation_grad(y, a, self.activation)
        self.grads["W"] += da.T @ x
        self.grads["b"] += da.sum(axis=0)
        return da @ self.params["W"]


def dense_forward(x, p, activation="identity"):
    """Stateless dense map for a single vector or a batch."""
    W, b = np.asarray(p["W"], dtype=float), np.asarray(p["b"], dtype=float)
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ValueError("dense shape mismatch")
    return _activate(x @ W.T + b, activation)


class GRU:
    def __init__(self, input_dim, hidden_dim, rng=None):
        rng = rng or np.random.default_rng(0)
        H = hidden_dim
        self.params = {
            "W": _uniform(rng, input_dim, (input_dim, 3 * H)),
            "U": _uniform(rng, H, (H, 3 * H)),
            "b": np.zeros(3 * H),
        }
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._cache = None

    @property
    def dims(self):
        return self.params["W"].shape[0], self.params["U"].shape[0]

    def forward(self, xs, h0=None):
        T, N, D = xs.shape
        W, U, b = self.params["W"], self.params["U"], self.params["b"]
        if D != W.shape[0]:
            raise ValueError(f"GRU expects input dim {W.shape[0]}, got {D}")
        H = U.shape[0]
        xw = (xs.reshape(T * N, D) @ W + b).reshape(T, N, 3 * H)
        h0 = np.zeros((N, H)) if h0 is None else h0
        hs, z, r, n = backend.kernels().gru_forward(xw, U, h0)
        _check_finite("GRU forward", hs)
        self._cache = (xs, hs, z, r, n)
        return hs[1:]

    def backward(self, dhs):
        xs, hs, z, r, n = self._cache
        T, N, D = xs.shape
        dxw, dU, dh0 = backend.kernels().gru_backward(dhs, hs, z, r, n, self.params["U"])
        flat = dxw.reshape(T * N, -1)
        self.grads["W"] += xs.reshape(T * N, D).T @ flat
        self.grads["U"] += dU
        self.grads["b"] += flat.sum(axis=0)
        return (flat @ self.params["W"].T).reshape(T, N, D)


class LSTM:
    def __init__(self, input_dim, hidden_dim, rng=None, forget_bias=1.0):
        rng = rng or np.random.default_rng(0)
        H = hidden_dim
        b = np.zeros(4 * H)
        b[H:2 * H] = forget_bias
        self.params = {
            "W": _uniform(rng, input_dim, (input_dim, 4 * H)),
            "U": _uniform(rng, H, (H, 4 * H)),
            "b": b,
        }
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._cache = None

    @property
    def dims(self):
        return self.params["W"].shape[0], self.params["U"].shape[0]

    def forward(self, xs, h0=None, c0=None):
        T, N, D = xs.shape
        W, U, b = self.params["W"], self.params["U"], self.params["b"]
        if D != W.shape[0]:
            raise ValueError(f"LSTM expects input dim {W.shape[0]}, got {D}")
        H = U.shape[0]
        xw = (xs.reshape(T * N, D) @ W + b).reshape(T, N, 4 * H)
        h0 = np.zeros((N, H)) if h0 is None else h0
        c0 = np.zeros((N, H)) if c0 is None else c0
        hs, cs, gates = backend.kernels().lstm_forward(xw, U, h0, c0)
        _check_finite("LSTM forward", hs, cs)
        self._cache = (xs, hs, cs, gates)
        return hs[1:]

    def backward(self, dhs):
        xs, hs, cs, gates = self._cache
        T, N, D = xs.shape
        dxw, dU, _, _ = backend.kernels().lstm_backward(dhs, hs, cs, gates, self.params["U"])
        flat = dxw.reshape(T * N, -1)
        self.grads["W"] += xs.reshape(T * N, D).T @ flat
        self.grads["U"] += dU
        self.grads["b"] += flat.sum(axis=0)
        return (flat @ self.params["W"].T).reshape(T, N, D)


def gru_cell_forward(x, h_prev, p):
    """One GRU step for a single vector (or a batch in the leading axis)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    h = np.atleast_2d(np.asarray(h_prev, dtype=float))
    W, U, b = p["W"], p["U"], p["b"]
    if x.shape[1] != W.shape[0] or h.shape[1] != U.shape[0] or W.shape[1] != 3 * U.shape[0]:
        raise ValueError("GRU shape mismatch")
    xw = (x @ W + b)[None]
    hs, *_ = backend.kernels().gru_forward(xw, U, h)
    _check_finite("GRU cell", hs)
    out = hs[1]
    return out[0] if np.ndim(h_prev) == 1 else out


def lstm_cell_forward(x, h_prev, c_prev, p):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    h = np.atleast_2d(np.asarray(h_prev, dtype=float))
    c = np.atleast_2d(np.asarray(c_prev, dtype=float))
    W, U, b = p["W"], p["U"], p["b"]
    if x.shape[1] != W.shape[0] or h.shape[1] != U.shape[0] or W.shape[1] != 4 * U.shape[0]:
        raise ValueError("LSTM shape mismatch")
    with np.errstate(over="ignore", invalid="ignore"):
        xw = (x @ W + b)[None]
    hs, cs, _ = backend.kernels().lstm_forward(xw, U, h, c)
    _check_finite("LSTM cell", hs, cs)
    if np.ndim(h_prev) == 1:
        return hs[1][0], cs[1][0]
    return hs[1], cs[1]
