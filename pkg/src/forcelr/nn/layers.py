"""Layer primitives: forward and exact backward passes in float64.

Convolutions use cross-correlation (no kernel flip).  Parameters may be
stored in float32; every computation here casts to float64 first.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class MissingCacheError(RuntimeError):
    pass


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Patches of ``x`` as rows ``(b, oh, ow)`` x columns ``(c, i, j)``."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, oh, ow = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * kh * kw), (b, oh, ow)


def conv2d_forward(x, weight, bias=None, stride: int = 1, pad: int = 0, groups: int = 1):
    """Direct 2-D convolution; returns ``(out, cache)``.

    ``weight`` is ``N x (C/groups) x kh x kw``; output is ``B x N x H_out x W_out``.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(weight, dtype=np.float64)
    n, cg, kh, kw = w.shape
    if x.ndim != 4 or x.shape[1] != cg * groups or n % groups:
        raise ValueError(
            f"input {x.shape} incompatible with weight {w.shape} and groups={groups}"
        )
    if conv_output_size(x.shape[2], kh, stride, pad) < 1 or \
            conv_output_size(x.shape[3], kw, stride, pad) < 1:
        raise ValueError(f"input {x.shape} too small for {kh}x{kw} kernel")
    ng = n // groups
    outs, cols_all = [], []
    for g in range(groups):
        cols, (b, oh, ow) = _im2col(x[:, g * cg:(g + 1) * cg], kh, kw, stride, pad)
        wg = w[g * ng:(g + 1) * ng].reshape(ng, -1)
        outs.append(cols @ wg.T)
        cols_all.append(cols)
    out = np.concatenate(outs, axis=1) if groups > 1 else outs[0]
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float64)
    out = out.reshape(b, oh, ow, n).transpose(0, 3, 1, 2)
    cache = {"cols": cols_all, "x_shape": x.shape, "w": w, "stride": stride, "pad": pad,
             "groups": groups, "has_bias": bias is not None}
    return np.ascontiguousarray(out), cache


def conv2d_backward(grad_out, cache):
    """Gradients ``(grad_input, grad_weight, grad_bias)`` of :func:`conv2d_forward`."""
    if cache is None:
        raise MissingCacheError("conv2d_backward called without a forward cache")
    w = cache["w"]
    stride, pad, groups = cache["stride"], cache["pad"], cache["groups"]
    n, cg, kh, kw = w.shape
    ng = n // groups
    b, c, h, wd = cache["x_shape"]
    g_out = np.asarray(grad_out, dtype=np.float64)
    oh, ow = g_out.shape[2], g_out.shape[3]
    dmat = g_out.transpose(0, 2, 3, 1).reshape(b * oh * ow, n)
    dx = np.zeros((b, c, h + 2 * pad, wd + 2 * pad))
    dw = np.empty_like(w)
    for g in range(groups):
        dg = dmat[:, g * ng:(g + 1) * ng]
        wg = w[g * ng:(g + 1) * ng].reshape(ng, -1)
        dw[g * ng:(g + 1) * ng] = (dg.T @ cache["cols"][g]).reshape(ng, cg, kh, kw)
        dcols = (dg @ wg).reshape(b, oh, ow, cg, kh, kw)
        sub = dx[:, g * cg:(g + 1) * cg]
        for i in range(kh):
            for j in range(kw):
                sub[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        dx = dx[:, :, pad:-pad, pad:-pad]
    db = dmat.sum(axis=0) if cache["has_bias"] else None
    return np.ascontiguousarray(dx), dw, db


def relu_forward(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0), x > 0


def relu_backward(grad_out, mask):
    return np.where(mask, grad_out, 0.0)


def maxpool_forward(x, k: int, stride: int | None = None):
    stride = stride or k
    x = np.asarray(x, dtype=np.float64)
    b, c, h, w = x.shape
    oh, ow = conv_output_size(h, k, stride, 0), conv_output_size(w, k, stride, 0)
    if oh < 1 or ow < 1:
        raise ValueError(f"input {x.shape} too small for {k}x{k} pooling")
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(b, c, oh, ow, k * k)
    # first maximum in row-major window order wins ties
    arg = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, {"arg": arg, "x_shape": x.shape, "k": k, "stride": stride}


def maxpool_backward(grad_out, cache):
    b, c, h, w = cache["x_shape"]
    k, stride, arg = cache["k"], cache["stride"], cache["arg"]
    oh, ow = arg.shape[2], arg.shape[3]
    dx = np.zeros((b, c, h, w))
    di, dj = np.divmod(arg, k)
    rows = di + stride * np.arange(oh)[:, None]
    cols = dj + stride * np.arange(ow)[None, :]
    bi, ci = np.meshgrid(np.arange(b), np.arange(c), indexing="ij")
    bi = np.broadcast_to(bi[:, :, None, None], arg.shape)
    ci = np.broadcast_to(ci[:, :, None, None], arg.shape)
    np.add.at(dx, (bi, ci, rows, cols), grad_out)
    return dx


def dense_forward(x, weight, bias=None):
    """``y = x W^T + b`` on the flattened input; ``weight`` is ``out x in``."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(x.shape[0], -1)
    w = np.asarray(weight, dtype=np.float64)
    if flat.shape[1] != w.shape[1]:
        raise ValueError(f"dense layer expects {w.shape[1]} inputs, got {flat.shape[1]}")
    out = flat @ w.T
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float64)
    return out, {"flat": flat, "x_shape": x.shape, "w": w}


def dense_backward(grad_out, cache):
    g = np.asarray(grad_out, dtype=np.float64)
    dw = g.T @ cache["flat"]
    db = g.sum(axis=0)
    dx = (g @ cache["w"]).reshape(cache["x_shape"])
    return dx, dw, db


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient with respect to ``logits``."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_norm
    b = z.shape[0]
    loss = -log_p[np.arange(b), y].mean()
    grad = np.exp(log_p)
    grad[np.arange(b), y] -= 1.0
    return float(loss), grad / b
