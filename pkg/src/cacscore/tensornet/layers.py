"""Forward/backward pairs for the layers used by the calcium networks.

Image tensors are channels-last float64 arrays ``(batch, height, width,
channel)``; convolution weights are ``(out_ch, in_ch, 3, 3)``. Each
``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
consumes the upstream gradient plus that cache.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NonFiniteError(FloatingPointError):
    """Raised when a tensor picks up NaN or Inf."""


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {what}")
    return x


# --- 3x3 convolution, stride 1, zero padding 1 -----------------------------


def _kernel_matrix(weights):
    # rows ordered (kh, kw, in_ch) to match the im2col column layout
    return weights.transpose(0, 2, 3, 1).reshape(weights.shape[0], -1)


def _im2col(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # n, h, w, c, 3, 3
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, 9 * c)


def conv3x3_forward(x, weights, biases):
    n, h, w, c = x.shape
    out_ch, in_ch, kh, kw = weights.shape
    if (in_ch, kh, kw) != (c, 3, 3):
        raise ValueError(f"weights {weights.shape} do not match input with {c} channels")
    if biases.shape != (out_ch,):
        raise ValueError(f"biases {biases.shape} do not match {out_ch} output channels")
    cols = _im2col(x)
    out = cols @ _kernel_matrix(weights).T
    out += biases
    return out.reshape(n, h, w, out_ch), (cols, x.shape)


def conv3x3_backward(dout, cache, weights, need_dx=True):
    cols, x_shape = cache
    out_ch = weights.shape[0]
    d2 = dout.reshape(-1, out_ch)
    dw = (d2.T @ cols).reshape(out_ch, 3, 3, -1).transpose(0, 3, 1, 2)
    db = d2.sum(axis=0)
    dx = conv3x3_input_grad(dout, weights, x_shape) if need_dx else None
    return dx, dw, db


def conv3x3_input_grad(dout, weights, x_shape):
    """Adjoint of the convolution with respect to its input (a transposed conv)."""
    n, h, w, c = x_shape
    out_ch = weights.shape[0]
    if out_ch <= 2 * c:
        # correlation of the padded gradient with flipped, channel-swapped kernels
        flipped = weights[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(-1, c)
        return (_im2col(dout) @ flipped).reshape(n, h, w, c)
    dcols = (dout.reshape(-1, out_ch) @ _kernel_matrix(weights)).reshape(n, h, w, 3, 3, c)
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=dcols.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i : i + h, j : j + w, :] += dcols[:, :, :, i, j, :]
    return dxp[:, 1:-1, 1:-1, :]


# --- 2x2 max pooling ---------------------------------------------------------


def maxpool2x2_forward(x, switches=None):
    """2x2/stride-2 max pool; a trailing odd row or column is dropped.

    ``switches`` (the selection masks from an earlier call) replays that
    routing instead of taking the max, which keeps finite-difference probes
    on one smooth piece of the function.
    """
    n, h, w, c = x.shape
    if h < 2 or w < 2:
        raise ValueError(f"max pool needs spatial size >= 2, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    a = x[:, 0 : 2 * h2 : 2, 0 : 2 * w2 : 2]
    b = x[:, 0 : 2 * h2 : 2, 1 : 2 * w2 : 2]
    cc = x[:, 1 : 2 * h2 : 2, 0 : 2 * w2 : 2]
    d = x[:, 1 : 2 * h2 : 2, 1 : 2 * w2 : 2]
    if switches is not None:
        sa, sb, sc, sd = switches
        out = np.where(sa, a, np.where(sb, b, np.where(sc, cc, d)))
        return out, (switches, x.shape)
    out = np.maximum(a, b)
    np.maximum(out, cc, out=out)
    np.maximum(out, d, out=out)
    # the first window element in row-major order receives the gradient
    sel_a = a == out
    sel_b = b == out
    sel_b &= ~sel_a
    taken = sel_a | sel_b
    sel_c = cc == out
    sel_c &= ~taken
    taken |= sel_c
    sel_d = ~taken
    return out, ((sel_a, sel_b, sel_c, sel_d), x.shape)


def maxpool2x2_backward(dout, cache):
    (sa, sb, sc, sd), shape = cache
    h2, w2 = dout.shape[1], dout.shape[2]
    dx = np.zeros(shape, dtype=dout.dtype)
    np.multiply(dout, sa, out=dx[:, 0 : 2 * h2 : 2, 0 : 2 * w2 : 2])
    np.multiply(dout, sb, out=dx[:, 0 : 2 * h2 : 2, 1 : 2 * w2 : 2])
    np.multiply(dout, sc, out=dx[:, 1 : 2 * h2 : 2, 0 : 2 * w2 : 2])
    np.multiply(dout, sd, out=dx[:, 1 : 2 * h2 : 2, 1 : 2 * w2 : 2])
    return dx


# --- batch normalisation -----------------------------------------------------


def batch_norm_forward(x, gamma, beta, running_mean, running_var, train=True,
                       eps=1e-5, momentum=0.9, update_stats=True):
    """Per-channel batch normalisation over every axis but the last.

    Train mode normalises with the biased batch variance and, when
    ``update_stats`` is set, folds the batch mean and unbiased variance into
    ``running_mean``/``running_var`` in place (``new = momentum*old +
    (1-momentum)*batch``). Infer mode normalises with the running values.
    """
    shape = x.shape
    x2 = x.reshape(-1, shape[-1])
    m = x2.shape[0]
    if train:
        if shape[0] < 2:
            raise ValueError("batch norm in train mode needs a batch of at least 2")
        ones = np.ones(m, dtype=x2.dtype)
        mean = (ones @ x2) / m
        xhat = x2 - mean
        var = np.einsum("ij,ij->j", xhat, xhat) / m
        if update_stats:
            running_mean *= momentum
            running_mean += (1 - momentum) * mean
            running_var *= momentum
            running_var += (1 - momentum) * var * (m / (m - 1))
    else:
        xhat = x2 - running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat *= inv_std
    out = xhat * gamma
    out += beta
    return out.reshape(shape), (xhat, inv_std, gamma, train)


def batch_norm_backward(dout, cache):
    xhat, inv_std, gamma, train = cache
    shape = dout.shape
    d2 = dout.reshape(-1, shape[-1])
    m = d2.shape[0]
    dbeta = np.ones(m, dtype=d2.dtype) @ d2
    dgamma = np.einsum("ij,ij->j", d2, xhat)
    g = gamma * inv_std
    if not train:
        return (d2 * g).reshape(shape), dgamma, dbeta
    dx = xhat * (dgamma / m)
    np.subtract(d2, dx, out=dx)
    dx -= dbeta / m
    dx *= g
    return dx.reshape(shape), dgamma, dbeta


# --- activations and dense ---------------------------------------------------


def elu_forward(x, alpha=1.0):
    """ELU via ``max(x, 0) + alpha * expm1(min(x, 0))``."""
    x = np.asarray(x)
    neg = np.expm1(np.minimum(x, 0.0))
    if alpha != 1.0:
        neg = neg * alpha
    out = np.maximum(x, 0.0) + neg
    return out, (neg, x if alpha != 1.0 else None, alpha)


def elu_backward(dout, cache):
    neg, x, alpha = cache
    # with alpha == 1 the derivative exp(min(x, 0)) is already 1 on the positive side
    grad = neg + alpha if x is None else np.where(x >= 0, 1.0, neg + alpha)
    return grad * dout


def dense_forward(x, weights, biases):
    """Affine map with ``weights`` shaped ``(in_features, out_features)``."""
    if x.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ValueError(f"input {x.shape} does not match dense weights {weights.shape}")
    if biases.shape != (weights.shape[1],):
        raise ValueError(f"biases {biases.shape} do not match weights {weights.shape}")
    return x @ weights + biases, x


def dense_backward(dout, x, weights):
    return dout @ weights.T, x.T @ dout, dout.sum(axis=0)


# single-shot forms


def conv3x3(x, weights, biases):
    return conv3x3_forward(x, weights, biases)[0]


def maxpool2x2(x):
    return maxpool2x2_forward(x)[0]


def elu(x, alpha=1.0):
    return elu_forward(x, alpha)[0]


def dense(x, weights, biases):
    return dense_forward(x, weights, biases)[0]


def batch_norm(x, gamma, beta, running_mean, running_var, train=True, eps=1e-5, momentum=0.9):
    return batch_norm_forward(x, gamma, beta, running_mean, running_var, train, eps, momentum)[0]


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))
