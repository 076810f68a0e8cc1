"""Layer primitives with exact manual gradients.

The ``*_nhwc`` kernels work on channels-last arrays, which lets a 3x3
convolution run as nine shifted matrix products over the flattened padded
batch instead of an im2col copy.
The public functions take and return (N, C, H, W) arrays and are thin
wrappers around the kernels the network uses.

All reductions loop in a fixed order so repeated calls are bit-identical.
"""

import numpy as np

from ..errors import ShapeError

PROB_EPS = 1e-12


def _nchw_to_nhwc(x):
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def _nhwc_to_nchw(x):
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


# --------------------------------------------------------------------------
# convolution


def _conv_geometry(x_shape, w_shape, stride):
    n, h, w, c = x_shape
    o, wc, kh, kw = w_shape
    if wc != c:
        raise ShapeError(f"conv: input has {c} channels, weight expects {wc}")
    if kh != kw or kh not in (1, 3):
        raise ShapeError(f"conv: only 1x1 and 3x3 kernels are supported, got {kh}x{kw}")
    if stride not in (1, 2):
        raise ShapeError(f"conv: stride must be 1 or 2, got {stride}")
    pad = (kh - 1) // 2
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    return pad, ho, wo


def _pad(x, pad):
    if pad == 0:
        return x
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
    xp[:, pad:pad + h, pad:pad + w, :] = x
    return xp


def _flat_span(n, hp, wp, k):
    """Rows of the flattened padded batch that can start a k x k window."""
    return n * hp * wp - (k - 1) * wp - (k - 1)


def conv2d_forward_nhwc(x, weight, bias, stride=1):
    pad, ho, wo = _conv_geometry(x.shape, weight.shape, stride)
    n, _, _, c = x.shape
    k = weight.shape[2]
    o = weight.shape[0]
    xp = _pad(x, pad)
    wk = np.ascontiguousarray(weight.transpose(2, 3, 1, 0))
    if stride == 1:
        # Each tap is one GEMM over the flattened padded batch; rows whose
        # window wraps past a row or image edge are cropped afterwards.
        _, hp, wp, _ = xp.shape
        flat = xp.reshape(-1, c)
        span = _flat_span(n, hp, wp, k)
        full = np.empty((n * hp * wp, o), dtype=x.dtype)
        acc = full[:span]
        tmp = np.empty((span, o), dtype=x.dtype)
        np.matmul(flat[:span], wk[0, 0], out=acc)
        for i in range(k):
            for j in range(k):
                if i == 0 and j == 0:
                    continue
                off = i * wp + j
                np.matmul(flat[off:off + span], wk[i, j], out=tmp)
                acc += tmp
        out = full.reshape(n, hp, wp, o)[:, :ho, :wo, :]
    else:
        out = np.zeros((n * ho * wo, o), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                patch = xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]
                out += patch.reshape(-1, c) @ wk[i, j]
        out = out.reshape(n, ho, wo, o)
    if bias is not None:
        out = out + bias
    return np.ascontiguousarray(out)


def conv2d_backward_nhwc(dy, x, weight, stride=1, with_bias=True):
    pad, ho, wo = _conv_geometry(x.shape, weight.shape, stride)
    n, h, w, c = x.shape
    o = weight.shape[0]
    if dy.shape != (n, ho, wo, o):
        raise ShapeError(f"conv backward: upstream gradient shape {dy.shape} does not match forward output")
    k = weight.shape[2]
    xp = _pad(x, pad)
    _, hp, wp, _ = xp.shape
    wk = np.ascontiguousarray(weight.transpose(2, 3, 1, 0))
    dwk = np.empty(wk.shape, dtype=x.dtype)
    dxp = np.zeros_like(xp)
    if stride == 1:
        # embed dy on the padded grid; the zero rows keep wrapped windows inert
        dfull = np.zeros((n, hp, wp, o), dtype=dy.dtype)
        dfull[:, :ho, :wo, :] = dy
        dflat = dfull.reshape(-1, o)
        flat = xp.reshape(-1, c)
        dflat_x = dxp.reshape(-1, c)
        span = _flat_span(n, hp, wp, k)
        dspan = dflat[:span]
        tmp = np.empty((span, c), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                off = i * wp + j
                np.matmul(flat[off:off + span].T, dspan, out=dwk[i, j])
                np.matmul(dspan, wk[i, j].T, out=tmp)
                dflat_x[off:off + span] += tmp
    else:
        d2 = dy.reshape(-1, o)
        for i in range(k):
            for j in range(k):
                rows = slice(i, i + stride * (ho - 1) + 1, stride)
                cols = slice(j, j + stride * (wo - 1) + 1, stride)
                dwk[i, j] = xp[:, rows, cols, :].reshape(-1, c).T @ d2
                dxp[:, rows, cols, :] += (d2 @ wk[i, j].T).reshape(n, ho, wo, c)
    dx = dxp[:, pad:pad + h, pad:pad + w, :] if pad else dxp
    dw = np.ascontiguousarray(dwk.transpose(3, 2, 0, 1))
    db = dy.sum(axis=(0, 1, 2)) if with_bias else None
    return np.ascontiguousarray(dx), dw, db


def conv2d_forward(x, weight, bias=None, stride=1):
    """Cross-correlation of an (N, C, H, W) batch with (O, C, k, k) weights.

    3x3 kernels use zero padding 1 and 1x1 kernels none, so the output is
    ceil(H / stride) x ceil(W / stride).
    """
    return _nhwc_to_nchw(conv2d_forward_nhwc(_nchw_to_nhwc(x), weight, bias, stride))


def conv2d_backward(dy, x, weight, stride=1, with_bias=True):
    dx, dw, db = conv2d_backward_nhwc(_nchw_to_nhwc(dy), _nchw_to_nhwc(x), weight, stride, with_bias)
    return _nhwc_to_nchw(dx), dw, db


# --------------------------------------------------------------------------
# batch normalization


def batchnorm_forward_nhwc(x, gamma, beta, mode, running_mean, running_var, momentum=0.1, eps=1e-5,
                           update_stats=True):
    """Per-channel batch normalization over all but the last axis.

    In train mode the running statistics are updated in place with the
    biased batch variance. Returns (y, cache).
    """
    c = x.shape[-1]
    x2 = x.reshape(-1, c)
    if mode == "train":
        if x.shape[0] < 2:
            raise ShapeError("batchnorm: train mode needs a batch of at least 2")
        count = x2.shape[0]
        mean = x2.sum(axis=0) / count
        xhat = x2 - mean
        var = np.einsum("ij,ij->j", xhat, xhat) / count
        if update_stats:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * var
    elif mode == "eval":
        count = None
        xhat = x2 - running_mean
        var = running_var
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat *= inv_std
    y = xhat * gamma
    y += beta
    return y.reshape(x.shape), (xhat, inv_std, gamma, mode, count)


def batchnorm_backward_nhwc(dy, cache):
    xhat, inv_std, gamma, mode, count = cache
    dy2 = dy.reshape(xhat.shape)
    dgamma = np.einsum("ij,ij->j", dy2, xhat)
    dbeta = dy2.sum(axis=0)
    if mode == "eval":
        return dy * (gamma * inv_std), dgamma, dbeta
    dx = dy2 * float(count)
    dx -= dbeta
    dx -= xhat * dgamma
    dx *= gamma * inv_std / count
    return dx.reshape(dy.shape), dgamma, dbeta


def batchnorm_forward(x, gamma, beta, mode, running_mean, running_var, momentum=0.1, eps=1e-5):
    y, cache = batchnorm_forward_nhwc(_nchw_to_nhwc(x), gamma, beta, mode, running_mean, running_var,
                                      momentum, eps)
    return _nhwc_to_nchw(y), cache


def batchnorm_backward(dy, cache):
    dx, dgamma, dbeta = batchnorm_backward_nhwc(_nchw_to_nhwc(dy), cache)
    return _nhwc_to_nchw(dx), dgamma, dbeta


# --------------------------------------------------------------------------
# element-wise, pooling, dense


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(dy, x):
    return dy * (x > 0.0)


def global_avg_pool_forward_nhwc(x):
    return x.mean(axis=(1, 2))


def global_avg_pool_backward_nhwc(dy, x_shape):
    n, h, w, c = x_shape
    return np.broadcast_to((dy / (h * w))[:, None, None, :], x_shape).copy()


def global_avg_pool_forward(x):
    """(N, C, H, W) -> (N, C) spatial mean."""
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(dy, x_shape):
    n, c, h, w = x_shape
    return np.broadcast_to((dy / (h * w))[:, :, None, None], x_shape).copy()


def dense_forward(x, weight, bias):
    """x (N, F) @ weight (F, O) + bias (O,)."""
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input has {x.shape[1]} features, weight expects {weight.shape[0]}")
    return x @ weight + bias


def dense_backward(dy, x, weight):
    return dy @ weight.T, x.T @ dy, dy.sum(axis=0)


def sigmoid_forward(z):
    """Logistic function, clamped to [1e-12, 1 - 1e-12]."""
    z = np.asarray(z, dtype=np.float64)
    ez = np.exp(-np.abs(z))
    p = np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def sigmoid_backward(dp, p):
    inside = (p > PROB_EPS) & (p < 1.0 - PROB_EPS)
    return np.where(inside, dp * p * (1.0 - p), 0.0)
