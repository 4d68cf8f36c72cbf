"""Differentiable ops on NCHW tensors.

Every op computes its forward in numpy (or a selected kernel backend) and
registers a closure returning one gradient per parent.  Gradients for parents
that do not require grad are skipped (returned as ``None``).
"""
import numpy as np

from . import kernels
from .tensor import ShapeError, Tensor, make_result


def _need(t):
    return t is not None and t.requires_grad


def _conv_out(size, k, stride, padding, dilation):
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _unpad(x, p):
    if p == 0:
        return x
    return x[:, :, p:-p, p:-p]


def conv2d(x, weight, bias=None, stride=1, padding=0, dilation=1, groups=1):
    """2-D cross-correlation; ``weight`` is (C_out, C_in/groups, kH, kW)."""
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if c % groups or o % groups or cg != c // groups:
        raise ShapeError(f"conv2d: input channels {c} / groups {groups} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
    ho = _conv_out(h, kh, stride, padding, dilation)
    wo = _conv_out(w, kw, stride, padding, dilation)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {kh}x{kw}")
    xp = _pad(x.data, padding)
    out = kernels.conv_forward(xp, weight.data, stride, dilation, groups, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = gw = None
        if x.requires_grad:
            gx = _unpad(kernels.conv_backward_input(g, weight.data, xp.shape, stride, dilation, groups), padding)
        if weight.requires_grad:
            gw = kernels.conv_backward_weight(xp, g, weight.shape, stride, dilation, groups)
        if bias is None:
            return gx, gw
        return gx, gw, (g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)

    return make_result(out, parents, backward, "conv2d")


def conv_transpose2d(x, weight, bias=None, stride=2, padding=1, output_padding=1, dilation=1, groups=1):
    """Transposed convolution; ``weight`` is (C_in, C_out/groups, kH, kW).

    With k=3, stride=2, padding=1, output_padding=1 the spatial size doubles.
    Implemented as the input-gradient of the matching forward convolution.
    """
    n, c, h, w = x.shape
    ci, og, kh, kw = weight.shape
    if ci != c or c % groups:
        raise ShapeError(f"conv_transpose2d: input channels {c} incompatible with weight {weight.shape}")
    o = og * groups
    ho = (h - 1) * stride - 2 * padding + dilation * (kh - 1) + output_padding + 1
    wo = (w - 1) * stride - 2 * padding + dilation * (kw - 1) + output_padding + 1
    # Equivalent forward conv: input (N, O, ho, wo) -> (N, C, h, w) with weight (C, O/g, k, k).
    full_shape = (n, o, ho + 2 * padding, wo + 2 * padding)
    full = kernels.conv_backward_input(x.data, weight.data, full_shape, stride, dilation, groups)
    out = np.ascontiguousarray(_unpad(full, padding)) if padding else full
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gp = _pad(g, padding)
        gx = gw = None
        if x.requires_grad:
            gx = kernels.conv_forward(gp, weight.data, stride, dilation, groups, h, w)
        if weight.requires_grad:
            gw = kernels.conv_backward_weight(gp, x.data, weight.shape, stride, dilation, groups)
        if bias is None:
            return gx, gw
        return gx, gw, (g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)

    return make_result(out, parents, backward, "conv_transpose2d")


def pool2d(x, kind="avg", size=2, stride=2):
    """2x2 / stride-2 pooling (the only geometry the search space uses)."""
    if size != 2 or stride != 2:
        raise ShapeError("pool2d supports size=2, stride=2 only")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"pool2d needs even spatial dims, got {h}x{w}")
    if kind == "avg":
        out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

        def backward(g):
            gx = np.repeat(np.repeat(g * 0.25, 2, axis=2), 2, axis=3)
            return (gx,)

    elif kind == "max":
        out, idx = kernels.maxpool_forward(x.data)

        def backward(g):
            return (kernels.maxpool_backward(g, idx),)

    else:
        raise ValueError(f"unknown pool kind {kind!r}")
    return make_result(out, (x,), backward, f"{kind}_pool2d")


def relu(x):
    mask = x.data > 0
    out = x.data * mask

    def backward(g):
        return (g * mask,)

    return make_result(out, (x,), backward, "relu")


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x):
    s = _sigmoid(x.data)

    def backward(g):
        return (g * s * (1.0 - s),)

    return make_result(s, (x,), backward, "sigmoid")


def activation(x, kind):
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def group_norm(x, num_groups, gamma, beta, eps=1e-5):
    n, c, h, w = x.shape
    if c % num_groups:
        raise ShapeError(f"group_norm: {c} channels not divisible by {num_groups} groups")
    xhat, rstd = kernels.group_norm_forward(x.data, num_groups, eps)
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        gx = ggamma = gbeta = None
        if gamma.requires_grad:
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
        if beta.requires_grad:
            gbeta = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gx = kernels.group_norm_backward(g * gamma.data[None, :, None, None], xhat, rstd, num_groups)
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), backward, "group_norm")


def softmax(logits):
    """Softmax of a 1-D tensor (max-shifted, overflow safe)."""
    if logits.data.ndim != 1:
        raise ShapeError("softmax expects a vector")
    z = logits.data - logits.data.max()
    e = np.exp(z)
    p = e / e.sum()

    def backward(g):
        return (p * (g - np.dot(g, p)),)

    return make_result(p, (logits,), backward, "softmax")


def global_avg_pool(x):
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def backward(g):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return make_result(out, (x,), backward, "global_avg_pool")


def concat_channels(inputs):
    inputs = list(inputs)
    if len(inputs) == 1:
        return inputs[0]
    n, _, h, w = inputs[0].shape
    for t in inputs:
        if t.shape[0] != n or t.shape[2:] != (h, w):
            raise ShapeError(f"concat_channels: mismatched shapes {[t.shape for t in inputs]}")
    out = np.concatenate([t.data for t in inputs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])

    def backward(g):
        return tuple(
            g[:, bounds[i] : bounds[i + 1]] if t.requires_grad else None for i, t in enumerate(inputs)
        )

    return make_result(out, inputs, backward, "concat_channels")


def add(*tensors):
    """Elementwise sum of same-shape tensors."""
    if len(tensors) == 1 and isinstance(tensors[0], (list, tuple)):
        tensors = tuple(tensors[0])
    if len(tensors) == 1:
        return tensors[0]
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise ShapeError(f"add: shape mismatch {shape} vs {t.shape}")
    out = tensors[0].data.copy()
    for t in tensors[1:]:
        out += t.data

    def backward(g):
        return tuple(g if t.requires_grad else None for t in tensors)

    return make_result(out, tensors, backward, "add")


def mul(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    out = a.data * b.data

    def backward(g):
        return (g * b.data if a.requires_grad else None, g * a.data if b.requires_grad else None)

    return make_result(out, (a, b), backward, "mul")


def affine(x, scale, shift):
    """``scale * x + shift`` with python-float constants."""
    out = x.data * x.dtype.type(scale) + x.dtype.type(shift)

    def backward(g):
        return (g * x.dtype.type(scale),)

    return make_result(out, (x,), backward, "affine")


def sum(x):  # noqa: A001 - mirrors numpy naming
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g):
        return (np.full(x.shape, g, dtype=x.dtype),)

    return make_result(out, (x,), backward, "sum")


def scale_channels(x, gate):
    """``x * gate`` with gate (N, C, 1, 1) broadcast over H, W."""
    n, c = x.shape[:2]
    if gate.shape != (n, c, 1, 1):
        raise ShapeError(f"scale_channels: gate shape {gate.shape} != {(n, c, 1, 1)}")
    out = x.data * gate.data

    def backward(g):
        gx = g * gate.data if x.requires_grad else None
        gg = (g * x.data).sum(axis=(2, 3), keepdims=True) if gate.requires_grad else None
        return gx, gg

    return make_result(out, (x, gate), backward, "scale_channels")


def weighted_sum(tensors, weights):
    """``sum_i weights[i] * tensors[i]`` with ``weights`` a 1-D tensor."""
    tensors = list(tensors)
    if weights.shape != (len(tensors),):
        raise ShapeError(f"weighted_sum: {len(tensors)} tensors but weights shape {weights.shape}")
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise ShapeError(f"weighted_sum: candidate shapes differ: {[t.shape for t in tensors]}")
    wv = weights.data
    out = tensors[0].data * wv[0]
    for i in range(1, len(tensors)):
        out = out + tensors[i].data * wv[i]

    def backward(g):
        grads = [g * wv[i] if t.requires_grad else None for i, t in enumerate(tensors)]
        gw = None
        if weights.requires_grad:
            gw = np.array([np.vdot(g, t.data) for t in tensors], dtype=wv.dtype)
        return (*grads, gw)

    return make_result(out, (*tensors, weights), backward, "weighted_sum")
