"""numba-compiled kernels; same signatures and results as ``_numpy``.

Dense convolutions use a compiled im2col/col2im around BLAS matmul; depthwise
convolutions, pooling and group norm are direct loops.  Each output element is
owned by exactly one ``prange`` iteration, so results do not depend on thread
scheduling.
"""
import numpy as np
from numba import njit, prange


@njit(cache=True, parallel=True)
def _im2col(xp, kh, kw, stride, dilation, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((n, c * kh * kw, ho * wo), dtype=xp.dtype)
    for nc in prange(n * c):
        b = nc // c
        ch = nc % c
        for i in range(kh):
            for j in range(kw):
                row = (ch * kh + i) * kw + j
                for y in range(ho):
                    yi = y * stride + i * dilation
                    base = y * wo
                    for x in range(wo):
                        cols[b, row, base + x] = xp[b, ch, yi, x * stride + j * dilation]
    return cols


@njit(cache=True, parallel=True)
def _col2im(dcols, gxp, kh, kw, stride, dilation, ho, wo):
    n, c = gxp.shape[0], gxp.shape[1]
    for nc in prange(n * c):
        b = nc // c
        ch = nc % c
        for i in range(kh):
            for j in range(kw):
                row = (ch * kh + i) * kw + j
                for y in range(ho):
                    yi = y * stride + i * dilation
                    base = y * wo
                    for x in range(wo):
                        gxp[b, ch, yi, x * stride + j * dilation] += dcols[b, row, base + x]
    return gxp


@njit(cache=True, parallel=True)
def _dw_forward(xp, w, stride, dilation, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    kh, kw = w.shape[2], w.shape[3]
    out = np.zeros((n, c, ho, wo), dtype=xp.dtype)
    for nc in prange(n * c):
        b = nc // c
        ch = nc % c
        for i in range(kh):
            for j in range(kw):
                wv = w[ch, 0, i, j]
                for y in range(ho):
                    yi = y * stride + i * dilation
                    for x in range(wo):
                        out[b, ch, y, x] += wv * xp[b, ch, yi, x * stride + j * dilation]
    return out


@njit(cache=True, parallel=True)
def _dw_backward_input(gout, w, gxp, stride, dilation):
    n, c, ho, wo = gout.shape
    kh, kw = w.shape[2], w.shape[3]
    for nc in prange(n * c):
        b = nc // c
        ch = nc % c
        for i in range(kh):
            for j in range(kw):
                wv = w[ch, 0, i, j]
                for y in range(ho):
                    yi = y * stride + i * dilation
                    for x in range(wo):
                        gxp[b, ch, yi, x * stride + j * dilation] += wv * gout[b, ch, y, x]
    return gxp


@njit(cache=True, parallel=True)
def _dw_backward_weight(xp, gout, gw, stride, dilation):
    n, c, ho, wo = gout.shape
    kh, kw = gw.shape[2], gw.shape[3]
    for ch in prange(c):
        for i in range(kh):
            for j in range(kw):
                acc = 0.0
                for b in range(n):
                    for y in range(ho):
                        yi = y * stride + i * dilation
                        for x in range(wo):
                            acc += gout[b, ch, y, x] * xp[b, ch, yi, x * stride + j * dilation]
                gw[ch, 0, i, j] = acc
    return gw


def _is_depthwise(c, o, groups):
    return groups == c and o == c


def conv_forward(xp, w, stride, dilation, groups, ho, wo):
    xp = np.ascontiguousarray(xp)
    n, c = xp.shape[:2]
    o, cg, kh, kw = w.shape
    if _is_depthwise(c, o, groups):
        return _dw_forward(xp, np.ascontiguousarray(w), stride, dilation, ho, wo)
    og = o // groups
    out = np.empty((n, o, ho * wo), dtype=xp.dtype)
    for g in range(groups):
        xg = xp if groups == 1 else np.ascontiguousarray(xp[:, g * cg : (g + 1) * cg])
        cols = _im2col(xg, kh, kw, stride, dilation, ho, wo)
        out[:, g * og : (g + 1) * og] = np.matmul(w[g * og : (g + 1) * og].reshape(og, -1), cols)
    return out.reshape(n, o, ho, wo)


def conv_backward_input(gout, w, xp_shape, stride, dilation, groups):
    gout = np.ascontiguousarray(gout)
    n, o, ho, wo = gout.shape
    _, cg, kh, kw = w.shape
    c = xp_shape[1]
    gxp = np.zeros(xp_shape, dtype=gout.dtype)
    if _is_depthwise(c, o, groups):
        return _dw_backward_input(gout, np.ascontiguousarray(w), gxp, stride, dilation)
    og = o // groups
    g2 = gout.reshape(n, o, ho * wo)
    for g in range(groups):
        wg = w[g * og : (g + 1) * og].reshape(og, -1)
        dcols = np.ascontiguousarray(np.matmul(wg.T, g2[:, g * og : (g + 1) * og]))
        if groups == 1:
            _col2im(dcols, gxp, kh, kw, stride, dilation, ho, wo)
        else:
            part = np.zeros((n, cg, *xp_shape[2:]), dtype=gout.dtype)
            gxp[:, g * cg : (g + 1) * cg] = _col2im(dcols, part, kh, kw, stride, dilation, ho, wo)
    return gxp


def conv_backward_weight(xp, gout, w_shape, stride, dilation, groups):
    xp = np.ascontiguousarray(xp)
    gout = np.ascontiguousarray(gout)
    n, o, ho, wo = gout.shape
    _, cg, kh, kw = w_shape
    c = xp.shape[1]
    if _is_depthwise(c, o, groups):
        return _dw_backward_weight(xp, gout, np.empty(w_shape, dtype=gout.dtype), stride, dilation)
    og = o // groups
    gw = np.empty(w_shape, dtype=gout.dtype)
    g2 = gout.reshape(n, o, ho * wo)
    for g in range(groups):
        xg = xp if groups == 1 else np.ascontiguousarray(xp[:, g * cg : (g + 1) * cg])
        cols = _im2col(xg, kh, kw, stride, dilation, ho, wo)
        go = g2[:, g * og : (g + 1) * og]
        gw[g * og : (g + 1) * og] = np.matmul(go, cols.transpose(0, 2, 1)).sum(axis=0).reshape(og, cg, kh, kw)
    return gw


@njit(cache=True, parallel=True)
def _maxpool_forward(x):
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    out = np.empty((n, c, ho, wo), dtype=x.dtype)
    idx = np.empty((n, c, ho, wo), dtype=np.int8)
    for nc in prange(n * c):
        b = nc // c
        ch = nc % c
        for y in range(ho):
            for xx in range(wo):
                best = x[b, ch, 2 * y, 2 * xx]
                k = 0
                for t in range(1, 4):
                    v = x[b, ch, 2 * y + t // 2, 2 * xx + t % 2]
                    if v > best:
                        best = v
                        k = t
                out[b, ch, y, xx] = best
                idx[b, ch, y, xx] = k
    return out, idx


@njit(cache=True, parallel=True)
def _maxpool_backward(gout, idx):
    n, c, ho, wo = gout.shape
    g = np.zeros((n, c, 2 * ho, 2 * wo), dtype=gout.dtype)
    for nc in prange(n * c):
        b = nc // c
        ch = nc % c
        for y in range(ho):
            for xx in range(wo):
                k = idx[b, ch, y, xx]
                g[b, ch, 2 * y + k // 2, 2 * xx + k % 2] = gout[b, ch, y, xx]
    return g


def maxpool_forward(x):
    return _maxpool_forward(np.ascontiguousarray(x))


def maxpool_backward(gout, idx):
    return _maxpool_backward(np.ascontiguousarray(gout), idx)


@njit(cache=True, parallel=True)
def _group_norm_forward(x, num_groups, eps):
    n = x.shape[0]
    xg = x.reshape(n, num_groups, -1)
    m = xg.shape[2]
    xhat = np.empty_like(xg)
    rstd = np.empty((n, num_groups), dtype=x.dtype)
    for ng in prange(n * num_groups):
        b = ng // num_groups
        g = ng % num_groups
        s = 0.0
        for k in range(m):
            s += xg[b, g, k]
        mean = s / m
        v = 0.0
        for k in range(m):
            d = xg[b, g, k] - mean
            v += d * d
        r = 1.0 / np.sqrt(v / m + eps)
        rstd[b, g] = r
        for k in range(m):
            xhat[b, g, k] = (xg[b, g, k] - mean) * r
    return xhat, rstd


@njit(cache=True, parallel=True)
def _group_norm_backward(gxhat, xhat, rstd):
    n, num_groups, m = gxhat.shape
    gx = np.empty_like(gxhat)
    for ng in prange(n * num_groups):
        b = ng // num_groups
        g = ng % num_groups
        sg = 0.0
        sgx = 0.0
        for k in range(m):
            sg += gxhat[b, g, k]
            sgx += gxhat[b, g, k] * xhat[b, g, k]
        sg /= m
        sgx /= m
        r = rstd[b, g]
        for k in range(m):
            gx[b, g, k] = (gxhat[b, g, k] - sg - xhat[b, g, k] * sgx) * r
    return gx


def group_norm_forward(x, num_groups, eps):
    x = np.ascontiguousarray(x)
    xhat, rstd = _group_norm_forward(x, num_groups, x.dtype.type(eps))
    return xhat.reshape(x.shape), rstd


def group_norm_backward(gxhat, xhat, rstd, num_groups):
    n = gxhat.shape[0]
    gx = _group_norm_backward(
        np.ascontiguousarray(gxhat).reshape(n, num_groups, -1),
        np.ascontiguousarray(xhat).reshape(n, num_groups, -1),
        rstd,
    )
    return gx.reshape(gxhat.shape)
