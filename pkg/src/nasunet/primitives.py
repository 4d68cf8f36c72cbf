"""Candidate operations for cell edges.

Three families with fixed shape contracts:

* down:   (C, H, W) -> (2C, H/2, W/2)
* up:     (C, H, W) -> (C/2, 2H, 2W)
* normal: (C, H, W) -> (C, H, W)

Every convolution is a Conv -> ReLU -> GroupNorm stage without conv bias.
"""
import enum

import numpy as np

from .autodiff import Module, Parameter, ShapeError, functional as F, kaiming_normal

GN_GROUPS = 4
SE_REDUCTION = 4
GN_EPS = 1e-5


class PrimitiveKind(str, enum.Enum):
    AVG_POOL = "avg_pool"
    MAX_POOL = "max_pool"
    DOWN_CONV = "down_conv"
    DOWN_CWEIGHT = "down_cweight"
    DOWN_DILATION_CONV = "down_dilation_conv"
    DOWN_DEPTH_CONV = "down_depth_conv"
    UP_CWEIGHT = "up_cweight"
    UP_DEPTH_CONV = "up_depth_conv"
    UP_CONV = "up_conv"
    UP_DILATION_CONV = "up_dilation_conv"
    IDENTITY = "identity"
    CWEIGHT = "cweight"
    CONV = "conv"
    DILATION_CONV = "dilation_conv"
    DEPTH_CONV = "depth_conv"

    def __str__(self):
        return self.value


K = PrimitiveKind

DOWN_OPS = (K.AVG_POOL, K.MAX_POOL, K.DOWN_CONV, K.DOWN_CWEIGHT, K.DOWN_DILATION_CONV, K.DOWN_DEPTH_CONV)
UP_OPS = (K.UP_CWEIGHT, K.UP_DEPTH_CONV, K.UP_CONV, K.UP_DILATION_CONV)
NORMAL_OPS = (K.IDENTITY, K.CWEIGHT, K.CONV, K.DILATION_CONV, K.DEPTH_CONV)

OPS_BY_ROLE = {"down": DOWN_OPS, "up": UP_OPS, "normal": NORMAL_OPS}


def role_of(kind):
    kind = PrimitiveKind(kind)
    for role, ops in OPS_BY_ROLE.items():
        if kind in ops:
            return role
    raise AssertionError(kind)  # pragma: no cover


def output_channels(role, c_in):
    if role == "down":
        return 2 * c_in
    if role == "up":
        return c_in // 2
    return c_in


def output_shape(kind, shape):
    """Shape contract of ``kind`` applied to an (N, C, H, W) input."""
    n, c, h, w = shape
    role = role_of(kind)
    if role == "down":
        return (n, 2 * c, h // 2, w // 2)
    if role == "up":
        return (n, c // 2, 2 * h, 2 * w)
    return tuple(shape)


class ConvReluGN(Module):
    """Conv (or transposed conv) -> ReLU -> GroupNorm."""

    def __init__(self, c_in, c_out, rng, kernel=3, stride=1, dilation=1, depthwise=False, transposed=False,
                 gn_groups=GN_GROUPS):
        if c_out % gn_groups:
            raise ShapeError(f"{c_out} channels not divisible by {gn_groups} GroupNorm groups")
        if depthwise and c_in != c_out:
            raise ShapeError("depthwise stage cannot change the channel count")
        self.groups = c_in if depthwise else 1
        self.stride = stride
        self.dilation = dilation
        self.transposed = transposed
        self.gn_groups = gn_groups
        fan_in = (c_in // self.groups) * kernel * kernel
        if transposed:
            shape = (c_in, c_out // self.groups, kernel, kernel)
        else:
            shape = (c_out, c_in // self.groups, kernel, kernel)
        self.conv = Parameter(kaiming_normal(rng, shape, fan_in))
        self.gamma = Parameter(np.ones(c_out))
        self.beta = Parameter(np.zeros(c_out))
        self.padding = dilation * (kernel - 1) // 2

    def forward(self, x):
        if self.transposed:
            y = F.conv_transpose2d(x, self.conv, stride=self.stride, padding=self.padding, output_padding=1,
                                   dilation=self.dilation, groups=self.groups)
        else:
            y = F.conv2d(x, self.conv, stride=self.stride, padding=self.padding, dilation=self.dilation,
                         groups=self.groups)
        return F.group_norm(F.relu(y), self.gn_groups, self.gamma, self.beta, GN_EPS)


def se_reweight(x, fc1, fc2, reduction=SE_REDUCTION):
    """Squeeze-and-excitation: ``x * sigmoid(fc2 relu(fc1 gap(x))))`` per channel.

    ``fc1`` is (C/r, C, 1, 1) and ``fc2`` is (C, C/r, 1, 1).
    """
    c = x.shape[1]
    if c % reduction:
        raise ShapeError(f"{c} channels not divisible by SE reduction {reduction}")
    squeezed = F.global_avg_pool(x)
    gate = F.sigmoid(F.conv2d(F.relu(F.conv2d(squeezed, fc1)), fc2))
    return F.scale_channels(x, gate)


class SqueezeExcite(Module):
    def __init__(self, c, rng, reduction=SE_REDUCTION):
        if c % reduction:
            raise ShapeError(f"{c} channels not divisible by SE reduction {reduction}")
        hidden = c // reduction
        self.reduction = reduction
        self.fc1 = Parameter(kaiming_normal(rng, (hidden, c, 1, 1), c))
        self.fc2 = Parameter(kaiming_normal(rng, (c, hidden, 1, 1), hidden))

    def forward(self, x):
        return se_reweight(x, self.fc1, self.fc2, self.reduction)


class Primitive(Module):
    """One candidate operation; ``stages`` run in sequence."""

    def __init__(self, kind, c_in, c_out, role, stages, pool=None):
        self.kind = kind
        self.c_in = c_in
        self.c_out = c_out
        self.role = role
        self.pool = pool
        self.stages = stages

    def forward(self, x):
        if x.shape[1] != self.c_in:
            raise ShapeError(f"{self.kind}: expected {self.c_in} input channels, got {x.shape[1]}")
        if self.pool is not None:
            x = F.pool2d(x, self.pool)
        elif self.role == "down" and (x.shape[2] % 2 or x.shape[3] % 2):
            raise ShapeError(f"{self.kind}: spatial dims must be even, got {x.shape[2:]}")
        for stage in self.stages:
            x = stage(x)
        return x

    def __repr__(self):
        return f"Primitive({self.kind.value}, {self.c_in}->{self.c_out})"


def build_primitive(kind, c_in, cell_role, rng, gn_groups=GN_GROUPS):
    """Instantiate ``kind`` for an edge of ``cell_role`` ('down', 'up' or 'normal')."""
    kind = PrimitiveKind(kind)
    if kind not in OPS_BY_ROLE.get(cell_role, ()):
        raise ValueError(f"{kind.value} is not a legal {cell_role} operation")
    if cell_role == "up" and c_in % 2:
        raise ShapeError(f"up operations need an even channel count, got {c_in}")
    c_out = output_channels(cell_role, c_in)

    def crg(ci, co, **kw):
        return ConvReluGN(ci, co, rng, gn_groups=gn_groups, **kw)

    pool = None
    if kind in (K.AVG_POOL, K.MAX_POOL):
        pool = "avg" if kind is K.AVG_POOL else "max"
        stages = [crg(c_in, c_out, kernel=1)]
    elif kind is K.DOWN_CONV:
        stages = [crg(c_in, c_out, stride=2)]
    elif kind is K.DOWN_CWEIGHT:
        stages = [crg(c_in, c_out, stride=2), SqueezeExcite(c_out, rng)]
    elif kind is K.DOWN_DILATION_CONV:
        stages = [crg(c_in, c_out, stride=2, dilation=2)]
    elif kind is K.DOWN_DEPTH_CONV:
        stages = [crg(c_in, c_in, stride=2, depthwise=True), crg(c_in, c_out, kernel=1)]
    elif kind is K.UP_CWEIGHT:
        stages = [crg(c_in, c_out, stride=2, transposed=True), SqueezeExcite(c_out, rng)]
    elif kind is K.UP_DEPTH_CONV:
        stages = [crg(c_in, c_in, stride=2, depthwise=True, transposed=True), crg(c_in, c_out, kernel=1)]
    elif kind is K.UP_CONV:
        stages = [crg(c_in, c_out, stride=2, transposed=True)]
    elif kind is K.UP_DILATION_CONV:
        stages = [crg(c_in, c_out, stride=2, dilation=2, transposed=True)]
    elif kind is K.IDENTITY:
        stages = []
    elif kind is K.CWEIGHT:
        stages = [SqueezeExcite(c_in, rng)]
    elif kind is K.CONV:
        stages = [crg(c_in, c_in)]
    elif kind is K.DILATION_CONV:
        stages = [crg(c_in, c_in, dilation=2)]
    else:  # DEPTH_CONV
        stages = [crg(c_in, c_in, depthwise=True), crg(c_in, c_in, kernel=1)]
    return Primitive(kind, c_in, c_out, cell_role, stages, pool=pool)


def apply_primitive(op, x):
    return op(x)
