"""Pure-numpy implementations of the hot inner-loop kernels.

This is the fallback backend; `nreg.kernels` rebinds these names to the
numba-compiled twins when JIT is enabled.  Both backends must agree to
float rounding on every function here (see tests/test_kernels.py).
"""

import numpy as np


def sigmoid(x):
    # piecewise form: never exponentiates a large positive argument
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def lstm_gates_forward(z, c_prev):
    """Fused gate math: preactivations (4H,) + previous cell (H,) -> state.

    Gate layout in z is [input, forget, output, candidate].
    Returns (h, c, i, f, o, g, tanh_c); the trailing five are kept for the
    backward pass.
    """
    hdim = c_prev.shape[0]
    i = sigmoid(z[:hdim])
    f = sigmoid(z[hdim:2 * hdim])
    o = sigmoid(z[2 * hdim:3 * hdim])
    g = np.tanh(z[3 * hdim:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, i, f, o, g, tc


def lstm_gates_backward(dh, dc_out, i, f, o, g, c_prev, tc):
    """Gradient of lstm_gates_forward w.r.t. z and c_prev."""
    do = dh * tc
    dc = dc_out + dh * o * (1.0 - tc * tc)
    di = dc * g
    df = dc * c_prev
    dg = dc * i
    dc_prev = dc * f
    dz = np.concatenate([
        di * i * (1.0 - i),
        df * f * (1.0 - f),
        do * o * (1.0 - o),
        dg * (1.0 - g * g),
    ])
    return dz, dc_prev


def adadelta_update(param, grad, eg2, edx2, rho, eps):
    """One Adadelta step, in place on param/eg2/edx2."""
    eg2 *= rho
    eg2 += (1.0 - rho) * grad * grad
    dx = -(np.sqrt(edx2 + eps) / np.sqrt(eg2 + eps)) * grad
    edx2 *= rho
    edx2 += (1.0 - rho) * dx * dx
    param += dx


def levenshtein(a, b):
    """Unit-cost edit distance between two int32 code sequences.

    Row update is vectorized; the insertion scan uses the arange trick
    d[j] = j + min_{k<=j}(row[k] - k).
    """
    n, m = a.shape[0], b.shape[0]
    if m == 0:
        return n
    if n == 0:
        return m
    offsets = np.arange(m + 1)
    prev = offsets.copy()
    for i in range(1, n + 1):
        sub = prev[:-1] + (b != a[i - 1])
        cur = np.minimum(prev[1:] + 1, sub)
        cur = np.concatenate(([i], cur))
        cur = np.minimum.accumulate(cur - offsets) + offsets
        prev = cur
    return int(prev[m])


def lcs_table(a, b):
    """Suffix LCS-length table L where L[i, j] = lcs(a[i:], b[j:])."""
    n, m = a.shape[0], b.shape[0]
    table = np.zeros((n + 1, m + 1), dtype=np.int32)
    for i in range(n - 1, -1, -1):
        for j in range(m - 1, -1, -1):
            if a[i] == b[j]:
                table[i, j] = table[i + 1, j + 1] + 1
            else:
                table[i, j] = max(table[i + 1, j], table[i, j + 1])
    return table
