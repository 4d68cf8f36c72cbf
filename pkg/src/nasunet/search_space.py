"""Cell DAG, mixed edges, architecture parameters and genotypes."""
import dataclasses
import hashlib

import numpy as np

from . import __version__
from .autodiff import Module, Parameter, functional as F
from .primitives import NORMAL_OPS, OPS_BY_ROLE, PrimitiveKind, build_primitive, output_channels

INPUT_NODES = (-2, -1)


def num_edges(m):
    return 2 * m + m * (m - 1) // 2


def enumerate_edges(m):
    """Edges ``(src, dst)`` ordered by dst, then src in (-2, -1, 0, ..., dst-1)."""
    if m < 1:
        raise ValueError(f"need at least one intermediate node, got M={m}")
    return [(src, dst) for dst in range(m) for src in (*INPUT_NODES, *range(dst))]


@dataclasses.dataclass(frozen=True)
class CellSpec:
    role: str
    m: int

    def __post_init__(self):
        if self.role not in ("down", "up"):
            raise ValueError(f"cell role must be 'down' or 'up', got {self.role!r}")
        enumerate_edges(self.m)

    @property
    def edges(self):
        return enumerate_edges(self.m)

    @property
    def k(self):
        return num_edges(self.m)

    def edge_role(self, index):
        src, _ = self.edges[index]
        return self.role if src in INPUT_NODES else "normal"

    def op_set(self, index):
        return OPS_BY_ROLE[self.edge_role(index)]

    def incoming(self, dst):
        return [i for i, (_, d) in enumerate(self.edges) if d == dst]


class ArchParams(Module):
    """One learnable logit vector per edge; shared by every cell of a role."""

    def __init__(self, spec):
        self.spec = spec
        self.rows = [
            Parameter(np.zeros(len(spec.op_set(i))), name=f"alpha.{spec.role}.{i}") for i in range(spec.k)
        ]

    def softmax(self):
        return [F.softmax(r) for r in self.rows]

    def probabilities(self):
        out = []
        for r in self.rows:
            z = r.data.astype(np.float64) - r.data.max()
            e = np.exp(z)
            out.append(e / e.sum())
        return out

    def as_matrix(self):
        """(K, max_ops) array, padded with NaN where an edge has fewer candidates."""
        width = max(len(r.data) for r in self.rows)
        mat = np.full((len(self.rows), width), np.nan)
        for i, r in enumerate(self.rows):
            mat[i, : len(r.data)] = r.data
        return mat

    def digest(self):
        h = hashlib.sha256()
        for r in self.rows:
            h.update(r.data.tobytes())
        return h.hexdigest()


def mixed_forward_continuous(weights, ops, x):
    """Softmax-weighted sum of every candidate; ``weights`` already softmaxed."""
    if len(ops) != weights.shape[0]:
        raise ValueError(f"{len(ops)} candidate ops but {weights.shape[0]} weights")
    return F.weighted_sum([op(x) for op in ops], weights)


def mixed_forward_binarized(gate, ops, x):
    """Output of the single active path ``ops[gate]``."""
    if not 0 <= gate < len(ops):
        raise IndexError(f"gate {gate} out of range for {len(ops)} candidates")
    return ops[gate](x)


class MixedEdge(Module):
    """Edge holding every candidate op of its op set (or a single chosen one)."""

    def __init__(self, role, kinds, c_in, rng, gn_groups):
        self.role = role
        self.kinds = tuple(PrimitiveKind(k) for k in kinds)
        self.c_in = c_in
        self.c_out = output_channels(role, c_in)
        self.ops = [build_primitive(k, c_in, role, rng, gn_groups) for k in self.kinds]
        self._materialized = 0

    def forward(self, x, weights=None, gate=None):
        if weights is not None:
            self._materialized += len(self.ops)
            return mixed_forward_continuous(weights, self.ops, x)
        if gate is None:
            if len(self.ops) != 1:
                raise ValueError("binarized forward needs a gate")
            gate = 0
        self._materialized += 1
        return mixed_forward_binarized(int(gate), self.ops, x)


def sample_binary_gates(alpha, rng):
    """One active op per edge drawn from Categorical(softmax(alpha_row)).

    ``rng`` is a ``numpy.random.Generator`` or an int seed.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.Generator(np.random.Philox(rng))
    probs = alpha.probabilities()
    u = rng.random(len(probs))
    gates = np.empty(len(probs), dtype=np.int64)
    for i, (p, ui) in enumerate(zip(probs, u)):
        gates[i] = min(int(np.searchsorted(np.cumsum(p), ui, side="right")), len(p) - 1)
    return gates


def argmax_gates(alpha):
    return np.array([int(np.argmax(r.data)) for r in alpha.rows], dtype=np.int64)


@dataclasses.dataclass
class Genotype:
    """Derived cell: ``edges`` lists retained ``(src, dst, kind)``."""

    role: str
    m: int
    edges: list

    def __post_init__(self):
        self.edges = sorted(
            ((int(s), int(d), PrimitiveKind(k)) for s, d, k in self.edges), key=lambda e: (e[1], e[0])
        )

    def validate(self):
        spec = CellSpec(self.role, self.m)
        legal_edges = set(spec.edges)
        for dst in range(self.m):
            n_in = sum(1 for _, d, _ in self.edges if d == dst)
            if n_in != 2:
                raise ValueError(f"{self.role} node {dst} has {n_in} retained inputs, expected 2")
        for s, d, k in self.edges:
            if (s, d) not in legal_edges:
                raise ValueError(f"edge {s}->{d} does not exist in a cell with M={self.m}")
            allowed = OPS_BY_ROLE[self.role] if s in INPUT_NODES else NORMAL_OPS
            if k not in allowed:
                raise ValueError(f"{k.value} is not legal on {self.role} edge {s}->{d}")
        return self

    def to_text(self):
        lines = ["# nasunet genotype", f"# engine={__version__}", f"M={self.m}"]
        lines += [f"{self.role} {d} <- {s} : {k.value}" for s, d, k in self.edges]
        return "\n".join(lines) + "\n"

    def digest(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


class GenotypeFormatError(ValueError):
    def __init__(self, path, lineno, token, reason):
        self.path, self.lineno, self.token = path, lineno, token
        super().__init__(f"{path}:{lineno}: {reason}: {token!r}")


def parse_genotype(text, path="<string>"):
    m = None
    role = None
    edges = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("M="):
            try:
                m = int(line[2:])
            except ValueError:
                raise GenotypeFormatError(path, lineno, line[2:], "bad node count") from None
            continue
        parts = line.split()
        if len(parts) != 6 or parts[2] != "<-" or parts[4] != ":":
            raise GenotypeFormatError(path, lineno, line, "expected 'role dst <- src : op'")
        r, dst, _, src, _, op = parts
        if r not in ("down", "up"):
            raise GenotypeFormatError(path, lineno, r, "unknown cell role")
        if role is not None and r != role:
            raise GenotypeFormatError(path, lineno, r, "mixed roles in one genotype")
        role = r
        try:
            kind = PrimitiveKind(op)
        except ValueError:
            raise GenotypeFormatError(path, lineno, op, "unknown operation") from None
        try:
            edges.append((int(src), int(dst), kind))
        except ValueError:
            raise GenotypeFormatError(path, lineno, f"{dst} {src}", "bad node index") from None
    if m is None:
        raise GenotypeFormatError(path, 0, "", "missing 'M=' header")
    if role is None:
        raise GenotypeFormatError(path, 0, "", "no edges")
    geno = Genotype(role, m, edges)
    try:
        geno.validate()
    except ValueError as exc:
        raise GenotypeFormatError(path, 0, "", str(exc)) from None
    return geno


def load_genotype(path):
    with open(path, encoding="utf-8") as fh:
        return parse_genotype(fh.read(), str(path))


def save_genotype(genotype, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(genotype.to_text())


def derive_genotype(alpha, spec=None):
    """Keep the argmax op per edge, then the two strongest inputs per node.

    Edge strength is the softmax weight of its kept op. Ties go to the lower
    op index / lower edge index.
    """
    spec = spec or alpha.spec
    probs = alpha.probabilities()
    best = [int(np.argmax(p)) for p in probs]
    strength = [float(p[b]) for p, b in zip(probs, best)]
    edges = []
    for dst in range(spec.m):
        incoming = spec.incoming(dst)
        ranked = sorted(incoming, key=lambda e: (-strength[e], e))[:2]
        for e in sorted(ranked):
            src, _ = spec.edges[e]
            edges.append((src, dst, spec.op_set(e)[best[e]]))
    return Genotype(spec.role, spec.m, edges).validate()
