"""Numba-compiled twins of the numpy kernels.

Explicit loops instead of vectorized expressions: the JIT fuses them into
single passes with no temporaries.  Compiled lazily per dtype, cached on
disk, so the first call in a fresh environment pays the compile cost.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _sig(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    ex = math.exp(x)
    return ex / (1.0 + ex)


@njit(cache=True)
def lstm_gates_forward(z, c_prev):
    hdim = c_prev.shape[0]
    h = np.empty_like(c_prev)
    c = np.empty_like(c_prev)
    i = np.empty_like(c_prev)
    f = np.empty_like(c_prev)
    o = np.empty_like(c_prev)
    g = np.empty_like(c_prev)
    tc = np.empty_like(c_prev)
    for n in range(hdim):
        i[n] = _sig(z[n])
        f[n] = _sig(z[hdim + n])
        o[n] = _sig(z[2 * hdim + n])
        g[n] = math.tanh(z[3 * hdim + n])
        c[n] = f[n] * c_prev[n] + i[n] * g[n]
        tc[n] = math.tanh(c[n])
        h[n] = o[n] * tc[n]
    return h, c, i, f, o, g, tc


@njit(cache=True)
def lstm_gates_backward(dh, dc_out, i, f, o, g, c_prev, tc):
    hdim = c_prev.shape[0]
    dz = np.empty(4 * hdim, dtype=c_prev.dtype)
    dc_prev = np.empty_like(c_prev)
    for n in range(hdim):
        do = dh[n] * tc[n]
        dc = dc_out[n] + dh[n] * o[n] * (1.0 - tc[n] * tc[n])
        dz[n] = dc * g[n] * i[n] * (1.0 - i[n])
        dz[hdim + n] = dc * c_prev[n] * f[n] * (1.0 - f[n])
        dz[2 * hdim + n] = do * o[n] * (1.0 - o[n])
        dz[3 * hdim + n] = dc * i[n] * (1.0 - g[n] * g[n])
        dc_prev[n] = dc * f[n]
    return dz, dc_prev


@njit(cache=True)
def adadelta_update(param, grad, eg2, edx2, rho, eps):
    for n in range(param.shape[0]):
        gn = grad[n]
        eg2[n] = rho * eg2[n] + (1.0 - rho) * gn * gn
        dx = -(math.sqrt(edx2[n] + eps) / math.sqrt(eg2[n] + eps)) * gn
        edx2[n] = rho * edx2[n] + (1.0 - rho) * dx * dx
        param[n] += dx


@njit(cache=True)
def levenshtein(a, b):
    n, m = a.shape[0], b.shape[0]
    if m == 0:
        return n
    if n == 0:
        return m
    prev = np.empty(m + 1, dtype=np.int64)
    cur = np.empty(m + 1, dtype=np.int64)
    for j in range(m + 1):
        prev[j] = j
    for i in range(1, n + 1):
        cur[0] = i
        ai = a[i - 1]
        for j in range(1, m + 1):
            cost = 0 if ai == b[j - 1] else 1
            best = prev[j] + 1
            if cur[j - 1] + 1 < best:
                best = cur[j - 1] + 1
            if prev[j - 1] + cost < best:
                best = prev[j - 1] + cost
            cur[j] = best
        prev, cur = cur, prev
    return int(prev[m])


@njit(cache=True)
def lcs_table(a, b):
    n, m = a.shape[0], b.shape[0]
    table = np.zeros((n + 1, m + 1), dtype=np.int32)
    for i in range(n - 1, -1, -1):
        for j in range(m - 1, -1, -1):
            if a[i] == b[j]:
                table[i, j] = table[i + 1, j + 1] + 1
            elif table[i + 1, j] >= table[i, j + 1]:
                table[i, j] = table[i + 1, j]
            else:
                table[i, j] = table[i, j + 1]
    return table
