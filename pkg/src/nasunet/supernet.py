"""U-shaped networks built from searchable down/up cells.

Level ``l`` carries ``base_channels * 2**l`` channels at ``H / 2**l``.  Down
cell ``l`` reads the two previous encoder outputs; up cell ``k`` reads the
previous decoder output (input node -2) and the encoder output of the same
shape (input node -1).
"""
import dataclasses

import numpy as np

from . import rng as rngmod
from .autodiff import Module, Parameter, ShapeError, functional as F, kaiming_normal
from .primitives import GN_GROUPS, SE_REDUCTION, ConvReluGN, output_channels
from .search_space import INPUT_NODES, ArchParams, CellSpec, MixedEdge


@dataclasses.dataclass
class NetworkConfig:
    depth: int = 3
    base_channels: int = 8
    num_classes: int = 4
    m: int = 3
    in_channels: int = 1
    input_size: tuple = (64, 64)
    gn_groups: int = GN_GROUPS

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.validate()

    def validate(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        unit = np.lcm(self.gn_groups, SE_REDUCTION)
        if self.base_channels % unit:
            raise ValueError(f"base_channels must be a multiple of {unit}")
        step = 2**self.depth
        if any(s % step for s in self.input_size):
            raise ShapeError(f"input size {self.input_size} not divisible by 2**depth = {step}")
        return self

    def channels(self, level):
        return self.base_channels * 2**level


class Cell(Module):
    """A down or up cell; mixed edges everywhere, or only a genotype's edges."""

    def __init__(self, role, m, c_in, rng, gn_groups, pre_channels=None, genotype=None):
        self.spec = CellSpec(role, m)
        self.role = role
        self.m = m
        self.c_in = c_in
        self.c_out = output_channels(role, c_in)
        # Input node -2 sits one level further away; bring it to this cell's input scale.
        self.preprocess = (
            ConvReluGN(pre_channels, c_in, rng, stride=2, gn_groups=gn_groups) if pre_channels else None
        )
        if genotype is None:
            chosen = [(i, self.spec.op_set(i)) for i in range(self.spec.k)]
        else:
            if genotype.role != role or genotype.m != m:
                raise ValueError(f"genotype ({genotype.role}, M={genotype.m}) does not fit a {role} cell with M={m}")
            index = {e: i for i, e in enumerate(self.spec.edges)}
            chosen = [(index[(s, d)], (k,)) for s, d, k in genotype.edges]
        self.edge_ids = [i for i, _ in chosen]
        self.edges = []
        for i, kinds in chosen:
            src, _ = self.spec.edges[i]
            edge_role = self.spec.edge_role(i)
            self.edges.append(MixedEdge(edge_role, kinds, c_in if src in INPUT_NODES else self.c_out, rng, gn_groups))
        self.project = ConvReluGN(m * self.c_out, self.c_out, rng, kernel=1, gn_groups=gn_groups)

    def forward(self, s0, s1, weights=None, gates=None):
        if self.preprocess is not None:
            s0 = self.preprocess(s0)
        states = {-2: s0, -1: s1}
        incoming = {d: [] for d in range(self.m)}
        for edge, i in zip(self.edges, self.edge_ids):
            src, dst = self.spec.edges[i]
            incoming[dst].append((src, edge, i))
        for dst in range(self.m):
            outs = []
            for src, edge, i in incoming[dst]:
                if weights is not None:
                    outs.append(edge(states[src], weights=weights[i]))
                else:
                    outs.append(edge(states[src], gate=None if gates is None else gates[i]))
            states[dst] = F.add(outs)
        return self.project(F.concat_channels([states[j] for j in range(self.m)]))


class _UNetSkeleton(Module):
    def _build(self, config, seed, genotypes=None):
        config.validate()
        self.config = config
        rng = rngmod.stream(seed, "init")
        g = config.gn_groups
        d = config.depth
        self.stem = ConvReluGN(config.in_channels, config.channels(0), rng, gn_groups=g)
        self.down_cells = [
            Cell("down", config.m, config.channels(l - 1), rng, g,
                 pre_channels=config.channels(l - 2) if l >= 2 else None,
                 genotype=None if genotypes is None else genotypes["down"])
            for l in range(1, d + 1)
        ]
        self.up_cells = [
            Cell("up", config.m, config.channels(l), rng, g,
                 genotype=None if genotypes is None else genotypes["up"])
            for l in range(d, 0, -1)
        ]
        c0 = config.channels(0)
        self.head_weight = Parameter(kaiming_normal(rng, (config.num_classes, c0, 1, 1), c0))
        self.head_bias = Parameter(np.zeros(config.num_classes))

    def _run(self, x, down_kw, up_kw):
        if x.shape[1:] != (self.config.in_channels, *self.config.input_size):
            raise ShapeError(f"batch shape {x.shape} does not match config input {self.config.input_size}")
        stem = self.stem(x)
        enc = [stem]
        prev_prev, prev = stem, stem
        for cell in self.down_cells:
            out = cell(prev_prev, prev, **down_kw)
            enc.append(out)
            prev_prev, prev = prev, out
        y = enc[-1]
        for k, cell in enumerate(self.up_cells):
            y = cell(y, enc[len(enc) - 1 - k], **up_kw)
        return F.conv2d(y, self.head_weight, self.head_bias)

    def encoder_shapes(self, x):
        """Per-level (C, H, W) after each down cell (diagnostics and tests)."""
        shapes = []
        prev_prev = prev = self.stem(x)
        for cell in self.down_cells:
            out = cell(prev_prev, prev, **self._encoder_kw())
            shapes.append(out.shape[1:])
            prev_prev, prev = prev, out
        return shapes

    def _encoder_kw(self):
        return {}

    def materialized_ops(self):
        return sum(e._materialized for c in (*self.down_cells, *self.up_cells) for e in c.edges)

    def reset_materialized(self):
        for c in (*self.down_cells, *self.up_cells):
            for e in c.edges:
                e._materialized = 0


class Supernet(_UNetSkeleton):
    """Over-parameterized network; alpha lives outside ``parameters()``."""

    def __init__(self, config, seed=0):
        self._build(config, seed)
        self._alpha = {
            "down": ArchParams(CellSpec("down", config.m)),
            "up": ArchParams(CellSpec("up", config.m)),
        }

    @property
    def alpha(self):
        return self._alpha

    def named_arch_parameters(self):
        for role in ("down", "up"):
            for i, row in enumerate(self._alpha[role].rows):
                yield f"alpha.{role}.{i}", row

    def arch_parameters(self):
        return [p for _, p in self.named_arch_parameters()]

    def forward(self, x, mode="continuous", gates=None):
        if mode == "continuous":
            down_kw = {"weights": self._alpha["down"].softmax()}
            up_kw = {"weights": self._alpha["up"].softmax()}
        elif mode == "binarized":
            if gates is None:
                raise ValueError("binarized forward needs gates")
            down_kw = {"gates": gates["down"]}
            up_kw = {"gates": gates["up"]}
        else:
            raise ValueError(f"unknown mode {mode!r}")
        return self._run(x, down_kw, up_kw)

    def _encoder_kw(self):
        return {"weights": self._alpha["down"].softmax()}


class DiscreteNet(_UNetSkeleton):
    """Network whose cells keep only a genotype's edges, one op each."""

    def __init__(self, genotypes, config, seed=0):
        for role in ("down", "up"):
            genotypes[role].validate()
        self.genotypes = genotypes
        self._build(config, seed, genotypes)

    def forward(self, x):
        return self._run(x, {}, {})


def build_supernet(config, seed=0):
    return Supernet(config, seed)


def instantiate_discrete(genotypes, config, seed=0):
    return DiscreteNet(genotypes, config, seed)


def copy_chosen_weights(supernet, net):
    """Load the supernet weights of every op ``net`` kept (plus shared plumbing)."""
    src = dict(supernet.named_parameters())
    state = {}
    for group in ("down_cells", "up_cells"):
        for ci, (scell, dcell) in enumerate(zip(getattr(supernet, group), getattr(net, group))):
            for ei, (edge, eid) in enumerate(zip(dcell.edges, dcell.edge_ids)):
                j = scell.edges[eid].kinds.index(edge.kinds[0])
                prefix_d = f"{group}.{ci}.edges.{ei}.ops.0."
                prefix_s = f"{group}.{ci}.edges.{eid}.ops.{j}."
                for name, _ in edge.ops[0].named_parameters(prefix_d):
                    state[name] = src[prefix_s + name[len(prefix_d):]].data
    for name, _ in net.named_parameters():
        if ".edges." not in name:
            state[name] = src[name].data
    net.load_state_dict(state)
    return net


class HandUNet(Module):
    """Fixed hand-designed baseline: double 3x3 Conv-ReLU-GN blocks, max-pool
    down, transposed-conv up, channel-concat skips; same channel ladder."""

    def __init__(self, config, seed=0):
        config.validate()
        self.config = config
        rng = rngmod.stream(seed, "init")
        g = config.gn_groups
        ch = [config.channels(l) for l in range(config.depth + 1)]
        self.enc = [[ConvReluGN(config.in_channels, ch[0], rng, gn_groups=g), ConvReluGN(ch[0], ch[0], rng, gn_groups=g)]]
        for l in range(1, config.depth + 1):
            self.enc.append([ConvReluGN(ch[l - 1], ch[l], rng, gn_groups=g), ConvReluGN(ch[l], ch[l], rng, gn_groups=g)])
        self.ups = []
        self.dec = []
        for l in range(config.depth, 0, -1):
            self.ups.append(ConvReluGN(ch[l], ch[l - 1], rng, stride=2, transposed=True, gn_groups=g))
            self.dec.append([ConvReluGN(2 * ch[l - 1], ch[l - 1], rng, gn_groups=g),
                             ConvReluGN(ch[l - 1], ch[l - 1], rng, gn_groups=g)])
        self.head_weight = Parameter(kaiming_normal(rng, (config.num_classes, ch[0], 1, 1), ch[0]))
        self.head_bias = Parameter(np.zeros(config.num_classes))

    def forward(self, x):
        skips = []
        y = x
        for l, block in enumerate(self.enc):
            if l > 0:
                y = F.pool2d(y, "max")
            for stage in block:
                y = stage(y)
            skips.append(y)
        for k, (up, block) in enumerate(zip(self.ups, self.dec)):
            y = F.concat_channels([up(y), skips[-2 - k]])
            for stage in block:
                y = stage(y)
        return F.conv2d(y, self.head_weight, self.head_bias)
