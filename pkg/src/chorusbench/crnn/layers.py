"""Network layer primitives with hand-derived backward passes.

Activations are batch-first and channels-last: conv-stack tensors are
(B, T, F, C) with T the time axis and F the frequency axis; recurrent
tensors are (B, T, D). Every forward returns (output, cache) and each
backward consumes (grad_out, cache), so gradients can be checked against
finite differences layer by layer or end to end.
"""

from __future__ import annotations

import numpy as np

LAYER_NORM_EPS = 1e-5


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- 3x3 same-padding convolution over (time, frequency) --------------------
#
# im2col: zero-pad by one cell on each spatial side, gather the nine
# shifted views into a (rows, 9*Cin) patch matrix, and run one GEMM.
# Patches are built per batch chunk so peak memory stays bounded even at
# the full channel counts and a 128-sample batch.

_CONV_COLS_BUDGET = 128 * 2 ** 20  # bytes of patch buffer per chunk

_OFFSETS = [(di, dj) for di in range(3) for dj in range(3)]


def _batch_chunk(shape, itemsize) -> int:
    _, T, F, C = shape
    per_sample = T * F * 9 * C * itemsize
    return max(1, _CONV_COLS_BUDGET // max(per_sample, 1))


def _im2col(x: np.ndarray):
    B, T, F, C = x.shape
    padded = np.zeros((B, T + 2, F + 2, C), dtype=x.dtype)
    padded[:, 1:-1, 1:-1, :] = x
    cols = np.empty((B, T, F, 9 * C), dtype=x.dtype)
    for k, (di, dj) in enumerate(_OFFSETS):
        cols[..., k * C:(k + 1) * C] = padded[:, di:di + T, dj:dj + F, :]
    return cols


def conv3x3_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray):
    """x: (B,T,F,Cin), kernel: (3,3,Cin,Cout), bias: (Cout,)."""
    B, T, F, C = x.shape
    c_out = kernel.shape[3]
    w = kernel.reshape(9 * C, c_out)
    b = bias.astype(x.dtype)
    out = np.empty((B, T, F, c_out), dtype=x.dtype)
    step = _batch_chunk(x.shape, x.itemsize)
    for b0 in range(0, B, step):
        cols = _im2col(x[b0:b0 + step])
        n = cols.shape[0]
        out[b0:b0 + n] = (cols.reshape(-1, 9 * C) @ w + b).reshape(
            n, T, F, c_out)
    return out, (x, kernel)


def conv3x3_backward(grad: np.ndarray, cache):
    x, kernel = cache
    B, T, F, C = x.shape
    c_out = kernel.shape[3]
    w = kernel.reshape(9 * C, c_out)
    dbias = grad.sum(axis=(0, 1, 2))
    dkernel = np.zeros((9 * C, c_out), dtype=kernel.dtype)
    dx = np.empty_like(x)
    step = _batch_chunk(x.shape, x.itemsize)
    for b0 in range(0, B, step):
        cols = _im2col(x[b0:b0 + step])
        n = cols.shape[0]
        g = grad[b0:b0 + n].reshape(-1, c_out)
        dkernel += cols.reshape(-1, 9 * C).T @ g
        dcols = (g @ w.T).reshape(n, T, F, 9 * C)
        dpad = np.zeros((n, T + 2, F + 2, C), dtype=grad.dtype)
        for k, (di, dj) in enumerate(_OFFSETS):
            dpad[:, di:di + T, dj:dj + F, :] += dcols[..., k * C:(k + 1) * C]
        dx[b0:b0 + n] = dpad[:, 1:-1, 1:-1, :]
    return dx, dkernel.reshape(3, 3, C, c_out), dbias


# -- layer normalization per time step over (frequency x channel) -----------

def layernorm_forward(x: np.ndarray, scale: np.ndarray, shift: np.ndarray):
    """Normalize each (b, t) slice over its (F, C) cells; learned scale and
    shift are per channel."""
    mu = x.mean(axis=(2, 3), keepdims=True)
    var = x.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = (x - mu) * inv
    out = xhat * scale + shift
    return out, (xhat, inv, scale)


def layernorm_backward(grad: np.ndarray, cache):
    xhat, inv, scale = cache
    dscale = (grad * xhat).sum(axis=(0, 1, 2))
    dshift = grad.sum(axis=(0, 1, 2))
    dxhat = grad * scale
    m1 = dxhat.mean(axis=(2, 3), keepdims=True)
    m2 = (dxhat * xhat).mean(axis=(2, 3), keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dscale, dshift


# -- leaky ReLU --------------------------------------------------------------

def leaky_relu_forward(x: np.ndarray, slope: float):
    mask = x > 0
    out = np.where(mask, x, slope * x)
    return out, (mask, slope)


def leaky_relu_backward(grad: np.ndarray, cache):
    mask, slope = cache
    return np.where(mask, grad, slope * grad)


# -- max pooling on the frequency axis ---------------------------------------

def maxpool_freq_forward(x: np.ndarray, width: int, layer_name: str = "pool"):
    B, T, F, C = x.shape
    if F % width != 0:
        raise ValueError(
            f"{layer_name}: frequency size {F} not divisible by pool width {width}")
    xr = x.reshape(B, T, F // width, width, C)
    idx = xr.argmax(axis=3)
    out = np.take_along_axis(xr, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    return out, (idx, x.shape, width)


def maxpool_freq_backward(grad: np.ndarray, cache):
    idx, shape, width = cache
    B, T, F, C = shape
    dxr = np.zeros((B, T, F // width, width, C), dtype=grad.dtype)
    np.put_along_axis(dxr, idx[:, :, :, None, :], grad[:, :, :, None, :], axis=3)
    return dxr.reshape(B, T, F, C)


# -- dropout ------------------------------------------------------------------

def dropout_forward(x: np.ndarray, p: float, rng: np.random.Generator | None):
    """Inverted dropout; rng=None means eval mode (identity)."""
    if rng is None or p <= 0.0:
        return x, None
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * keep, keep


def dropout_backward(grad: np.ndarray, cache):
    if cache is None:
        return grad
    return grad * cache


# -- time-distributed dense ---------------------------------------------------

def dense_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """x: (B,T,D) @ weight (D,H) + bias."""
    return x @ weight + bias, (x, weight)


def dense_backward(grad: np.ndarray, cache):
    x, weight = cache
    dw = np.tensordot(x, grad, axes=((0, 1), (0, 1)))
    db = grad.sum(axis=(0, 1))
    dx = grad @ weight.T
    return dx, dw, db


# -- GRU ----------------------------------------------------------------------
#
# Gate equations (row-vector convention, x_t: (B,D), h: (B,H)):
#   z_t = sigmoid(x_t W_z + h_{t-1} U_z + b_z)
#   r_t = sigmoid(x_t W_r + h_{t-1} U_r + b_r)
#   c_t = tanh(x_t W_h + (r_t * h_{t-1}) U_h + b_h)
#   h_t = (1 - z_t) * h_{t-1} + z_t * c_t

def gru_forward(x: np.ndarray, p: dict[str, np.ndarray]):
    """One direction over (B,T,D) -> (B,T,H); p holds W_z..b_h."""
    B, T, _ = x.shape
    H = p["U_z"].shape[0]
    xz = x @ p["W_z"] + p["b_z"]
    xr = x @ p["W_r"] + p["b_r"]
    xh = x @ p["W_h"] + p["b_h"]
    h = np.zeros((B, H), dtype=x.dtype)
    hs = np.zeros((B, T, H), dtype=x.dtype)
    zs = np.zeros((B, T, H), dtype=x.dtype)
    rs = np.zeros((B, T, H), dtype=x.dtype)
    cs = np.zeros((B, T, H), dtype=x.dtype)
    for t in range(T):
        z = sigmoid(xz[:, t] + h @ p["U_z"])
        r = sigmoid(xr[:, t] + h @ p["U_r"])
        c = np.tanh(xh[:, t] + (r * h) @ p["U_h"])
        h = (1.0 - z) * h + z * c
        zs[:, t], rs[:, t], cs[:, t], hs[:, t] = z, r, c, h
    return hs, (x, zs, rs, cs, hs, p)


def gru_backward(grad: np.ndarray, cache):
    """BPTT for one direction; returns (dx, param grads dict)."""
    x, zs, rs, cs, hs, p = cache
    B, T, _ = x.shape
    H = hs.shape[2]
    da_z = np.zeros((B, T, H), dtype=x.dtype)
    da_r = np.zeros((B, T, H), dtype=x.dtype)
    da_h = np.zeros((B, T, H), dtype=x.dtype)
    dU_z = np.zeros_like(p["U_z"])
    dU_r = np.zeros_like(p["U_r"])
    dU_h = np.zeros_like(p["U_h"])
    dh_next = np.zeros((B, H), dtype=x.dtype)

    for t in range(T - 1, -1, -1):
        h_prev = hs[:, t - 1] if t > 0 else np.zeros((B, H), dtype=x.dtype)
        z, r, c = zs[:, t], rs[:, t], cs[:, t]
        dh = grad[:, t] + dh_next
        dz = dh * (c - h_prev)
        dc = dh * z
        dh_prev = dh * (1.0 - z)

        ah = dc * (1.0 - c * c)
        da_h[:, t] = ah
        drh = ah @ p["U_h"].T
        dU_h += (r * h_prev).T @ ah
        dr = drh * h_prev
        dh_prev += drh * r

        az = dz * z * (1.0 - z)
        ar = dr * r * (1.0 - r)
        da_z[:, t] = az
        da_r[:, t] = ar
        dU_z += h_prev.T @ az
        dU_r += h_prev.T @ ar
        dh_prev += az @ p["U_z"].T + ar @ p["U_r"].T
        dh_next = dh_prev

    grads = {
        "W_z": np.tensordot(x, da_z, axes=((0, 1), (0, 1))),
        "W_r": np.tensordot(x, da_r, axes=((0, 1), (0, 1))),
        "W_h": np.tensordot(x, da_h, axes=((0, 1), (0, 1))),
        "U_z": dU_z, "U_r": dU_r, "U_h": dU_h,
        "b_z": da_z.sum(axis=(0, 1)),
        "b_r": da_r.sum(axis=(0, 1)),
        "b_h": da_h.sum(axis=(0, 1)),
    }
    dx = da_z @ p["W_z"].T + da_r @ p["W_r"].T + da_h @ p["W_h"].T
    return dx, grads


def bigru_forward(x: np.ndarray, p_fw: dict, p_bw: dict):
    """Bidirectional GRU: forward and time-reversed passes concatenated."""
    out_fw, cache_fw = gru_forward(x, p_fw)
    out_bw, cache_bw = gru_forward(x[:, ::-1], p_bw)
    out = np.concatenate([out_fw, out_bw[:, ::-1]], axis=2)
    return out, (cache_fw, cache_bw)


def bigru_backward(grad: np.ndarray, cache):
    cache_fw, cache_bw = cache
    H = grad.shape[2] // 2
    dx_fw, g_fw = gru_backward(np.ascontiguousarray(grad[:, :, :H]), cache_fw)
    dx_bw, g_bw = gru_backward(np.ascontiguousarray(grad[:, ::-1, H:]), cache_bw)
    return dx_fw + dx_bw[:, ::-1], g_fw, g_bw
