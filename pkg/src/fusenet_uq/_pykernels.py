"""Pure numpy implementations of the hot convolution and pooling kernels.

Shapes follow the NCHW convention. ``im2col`` lays patches out as
``[B, C*kh*kw, H*W]`` so that a same-padded, stride-1 convolution becomes
one batched matmul ``W[F, C*kh*kw] @ cols``.
"""

import numpy as np


def im2col(x, kh, kw):
    b, c, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((b, c, kh, kw, h, w), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(b, c * kh * kw, h * w)


def col2im(cols, shape, kh, kw):
    b, c, h, w = shape
    ph, pw = kh // 2, kw // 2
    cols = cols.reshape(b, c, kh, kw, h, w)
    dxp = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + h, j:j + w] += cols[:, :, i, j]
    return np.ascontiguousarray(dxp[:, :, ph:ph + h, pw:pw + w])


def maxpool_forward(x, k):
    """Return pooled output and the flat in-window argmax (first index wins ties)."""
    b, c, h, w = x.shape
    ho, wo = h // k, w // k
    win = x.reshape(b, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, k * k)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.intp)


def maxpool_backward(dout, idx, k):
    b, c, ho, wo = dout.shape
    dwin = np.zeros((b, c, ho, wo, k * k), dtype=dout.dtype)
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    dx = dwin.reshape(b, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(dx.reshape(b, c, ho * k, wo * k))
