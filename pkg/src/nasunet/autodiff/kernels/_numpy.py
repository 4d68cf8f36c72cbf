"""Pure-numpy reference kernels.

All convolution kernels take an already padded input ``xp`` so that the
padding policy lives in one place (the autodiff op).  Shapes are NCHW.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _taps(xp, kh, kw, stride, dilation, ho, wo):
    """View of shape (N, C, kh, kw, ho, wo) with every kernel tap's input plane."""
    ek_h = dilation * (kh - 1) + 1
    ek_w = dilation * (kw - 1) + 1
    win = sliding_window_view(xp, (ek_h, ek_w), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    win = win[..., ::dilation, ::dilation]
    return win.transpose(0, 1, 4, 5, 2, 3)


def conv_forward(xp, w, stride, dilation, groups, ho, wo):
    n, c, _, _ = xp.shape
    o, cg, kh, kw = w.shape
    taps = _taps(xp, kh, kw, stride, dilation, ho, wo)
    if groups == 1:
        cols = taps.reshape(n, c * kh * kw, ho * wo)
        out = np.matmul(w.reshape(o, -1), cols)
        return out.reshape(n, o, ho, wo)
    if groups == c and o == c:
        out = np.zeros((n, o, ho, wo), dtype=xp.dtype)
        for i in range(kh):
            for j in range(kw):
                out += taps[:, :, i, j] * w[None, :, 0, i, j, None, None]
        return out
    og = o // groups
    out = np.empty((n, o, ho, wo), dtype=xp.dtype)
    for g in range(groups):
        cols = taps[:, g * cg : (g + 1) * cg].reshape(n, cg * kh * kw, ho * wo)
        wg = w[g * og : (g + 1) * og].reshape(og, -1)
        out[:, g * og : (g + 1) * og] = np.matmul(wg, cols).reshape(n, og, ho, wo)
    return out


def conv_backward_input(gout, w, xp_shape, stride, dilation, groups):
    """Gradient w.r.t. the padded input; also the forward of a transposed conv."""
    n, o, ho, wo = gout.shape
    _, cg, kh, kw = w.shape
    c = xp_shape[1]
    gxp = np.zeros(xp_shape, dtype=gout.dtype)
    he = stride * (ho - 1) + 1
    we = stride * (wo - 1) + 1
    if groups == 1:
        # (N, C*kh*kw, ho*wo)
        dcols = np.matmul(w.reshape(o, -1).T, gout.reshape(n, o, ho * wo))
        dcols = dcols.reshape(n, c, kh, kw, ho, wo)
        for i in range(kh):
            for j in range(kw):
                hi, wj = i * dilation, j * dilation
                gxp[:, :, hi : hi + he : stride, wj : wj + we : stride] += dcols[:, :, i, j]
        return gxp
    if groups == c and o == c:
        for i in range(kh):
            for j in range(kw):
                hi, wj = i * dilation, j * dilation
                gxp[:, :, hi : hi + he : stride, wj : wj + we : stride] += (
                    gout * w[None, :, 0, i, j, None, None]
                )
        return gxp
    og = o // groups
    for g in range(groups):
        wg = w[g * og : (g + 1) * og].reshape(og, -1)
        dcols = np.matmul(wg.T, gout[:, g * og : (g + 1) * og].reshape(n, og, ho * wo))
        dcols = dcols.reshape(n, cg, kh, kw, ho, wo)
        for i in range(kh):
            for j in range(kw):
                hi, wj = i * dilation, j * dilation
                gxp[:, g * cg : (g + 1) * cg, hi : hi + he : stride, wj : wj + we : stride] += dcols[
                    :, :, i, j
                ]
    return gxp


def conv_backward_weight(xp, gout, w_shape, stride, dilation, groups):
    n, o, ho, wo = gout.shape
    _, cg, kh, kw = w_shape
    c = xp.shape[1]
    taps = _taps(xp, kh, kw, stride, dilation, ho, wo)
    if groups == 1:
        cols = taps.reshape(n, c * kh * kw, ho * wo)
        gw = np.einsum("nop,nkp->ok", gout.reshape(n, o, ho * wo), cols, optimize=True)
        return gw.reshape(w_shape)
    if groups == c and o == c:
        gw = np.empty(w_shape, dtype=gout.dtype)
        for i in range(kh):
            for j in range(kw):
                gw[:, 0, i, j] = (gout * taps[:, :, i, j]).sum(axis=(0, 2, 3))
        return gw
    og = o // groups
    gw = np.empty(w_shape, dtype=gout.dtype)
    for g in range(groups):
        cols = taps[:, g * cg : (g + 1) * cg].reshape(n, cg * kh * kw, ho * wo)
        go = gout[:, g * og : (g + 1) * og].reshape(n, og, ho * wo)
        gw[g * og : (g + 1) * og] = np.einsum("nop,nkp->ok", go, cols, optimize=True).reshape(
            og, cg, kh, kw
        )
    return gw


def maxpool_forward(x):
    """2x2/stride-2 max pool. Returns (out, argmax) with argmax in 0..3, ties to lowest."""
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    idx = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx.astype(np.int8)


def maxpool_backward(gout, idx):
    n, c, ho, wo = gout.shape
    g = np.zeros((n, c, ho, wo, 4), dtype=gout.dtype)
    np.put_along_axis(g, idx[..., None].astype(np.intp), gout[..., None], axis=-1)
    g = g.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return g.reshape(n, c, 2 * ho, 2 * wo)


def group_norm_forward(x, num_groups, eps):
    """Normalized activations and per-(sample, group) inverse std."""
    n, c, h, w = x.shape
    xg = x.reshape(n, num_groups, -1)
    mean = xg.mean(axis=2, keepdims=True)
    xc = xg - mean
    var = (xc * xc).mean(axis=2, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (xc * rstd).reshape(n, c, h, w)
    return xhat, rstd.reshape(n, num_groups)


def group_norm_backward(gxhat, xhat, rstd, num_groups):
    """Gradient w.r.t. the input given the gradient w.r.t. the normalized values."""
    n, c, h, w = gxhat.shape
    g = gxhat.reshape(n, num_groups, -1)
    xh = xhat.reshape(n, num_groups, -1)
    m = g.shape[2]
    mg = g.sum(axis=2, keepdims=True) / m
    mgx = (g * xh).sum(axis=2, keepdims=True) / m
    gx = (g - mg - xh * mgx) * rstd.reshape(n, num_groups, 1)
    return gx.reshape(n, c, h, w)
