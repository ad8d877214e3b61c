"""Pure-numpy recurrence kernels.

All arrays are time-major: sequences have shape (T, N, ...). `xw` is the
input projection x_t @ W + b precomputed for every step, so the kernels only
run the recurrent part. Gate layout: GRU [z, r, n], LSTM [i, f, g, o].
"""
import numpy as np


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def gru_forward(xw, U, h0):
    T, N, H3 = xw.shape
    H = H3 // 3
    hs = np.empty((T + 1, N, H))
    z = np.empty((T, N, H))
    r = np.empty((T, N, H))
    n = np.empty((T, N, H))
    hs[0] = h0
    U_zr, U_n = U[:, :2 * H], U[:, 2 * H:]
    for t in range(T):
        hp = hs[t]
        zr = _sigmoid(xw[t, :, :2 * H] + hp @ U_zr)
        z[t] = zr[:, :H]
        r[t] = zr[:, H:]
        n[t] = np.tanh(xw[t, :, 2 * H:] + (r[t] * hp) @ U_n)
        hs[t + 1] = (1.0 - z[t]) * hp + z[t] * n[t]
    return hs, z, r, n


def gru_backward(dhs, hs, z, r, n, U):
    T, N, H = dhs.shape
    U_zr, U_n = U[:, :2 * H], U[:, 2 * H:]
    dxw = np.empty((T, N, 3 * H))
    dU = np.zeros_like(U)
    dh = np.zeros((N, H))
    for t in range(T - 1, -1, -1):
        hp = hs[t]
        dh = dh + dhs[t]
        zt, rt, nt = z[t], r[t], n[t]
        dan = dh * zt * (1.0 - nt * nt)
        dz = dh * (nt - hp)
        dhp = dh * (1.0 - zt)
        drh = dan @ U_n.T
        dU[:, 2 * H:] += (rt * hp).T @ dan
        dr = drh * hp
        dhp += drh * rt
        dazr = np.concatenate([dz * zt * (1.0 - zt), dr * rt * (1.0 - rt)], axis=1)
        dU[:, :2 * H] += hp.T @ dazr
        dhp += dazr @ U_zr.T
        dxw[t, :, :2 * H] = dazr
        dxw[t, :, 2 * H:] = dan
        dh = dhp
    return dxw, dU, dh


def lstm_forward(xw, U, h0, c0):
    T, N, H4 = xw.shape
    H = H4 // 4
    hs = np.empty((T + 1, N, H))
    cs = np.empty((T + 1, N, H))
    gates = np.empty((T, N, 4 * H))
    hs[0] = h0
    cs[0] = c0
    for t in range(T):
        a = xw[t] + hs[t] @ U
        g = gates[t]
        g[:, :2 * H] = _sigmoid(a[:, :2 * H])
        g[:, 2 * H:3 * H] = np.tanh(a[:, 2 * H:3 * H])
        g[:, 3 * H:] = _sigmoid(a[:, 3 * H:])
        cs[t + 1] = g[:, H:2 * H] * cs[t] + g[:, :H] * g[:, 2 * H:3 * H]
        hs[t + 1] = g[:, 3 * H:] * np.tanh(cs[t + 1])
    return hs, cs, gates


def lstm_backward(dhs, hs, cs, gates, U, dcs=None):
    T, N, H = dhs.shape
    dxw = np.empty((T, N, 4 * H))
    dU = np.zeros_like(U)
    dh = np.zeros((N, H))
    dc = np.zeros((N, H))
    for t in range(T - 1, -1, -1):
        dh = dh + dhs[t]
        if dcs is not None:
            dc = dc + dcs[t]
        g = gates[t]
        i, f, gg, o = g[:, :H], g[:, H:2 * H], g[:, 2 * H:3 * H], g[:, 3 * H:]
        tc = np.tanh(cs[t + 1])
        dc = dc + dh * o * (1.0 - tc * tc)
        da = dxw[t]
        da[:, :H] = dc * gg * i * (1.0 - i)
        da[:, H:2 * H] = dc * cs[t] * f * (1.0 - f)
        da[:, 2 * H:3 * H] = dc * i * (1.0 - gg * gg)
        da[:, 3 * H:] = dh * tc * o * (1.0 - o)
        dU += hs[t].T @ da
        dh = da @ U.T
        dc = dc * f
    return dxw, dU, dh, dc
