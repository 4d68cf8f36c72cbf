import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from nasunet.autodiff import Tensor, backward, functional as F
from nasunet.gradcheck import check_gradients
from nasunet.primitives import DOWN_OPS, NORMAL_OPS, PrimitiveKind as K, build_primitive
from nasunet.search_space import (
    ArchParams,
    CellSpec,
    Genotype,
    GenotypeFormatError,
    MixedEdge,
    derive_genotype,
    enumerate_edges,
    mixed_forward_binarized,
    mixed_forward_continuous,
    num_edges,
    parse_genotype,
    sample_binary_gates,
)


def brute_force_edges(m):
    # every ordered pair of nodes (src before dst) with dst intermediate
    order = [-2, -1, *range(m)]
    return [(s, d) for s, d in itertools.product(order, order) if d >= 0 and order.index(s) < order.index(d)]


@pytest.mark.parametrize("m", range(1, 11))
def test_edge_count_closed_form(m):
    edges = enumerate_edges(m)
    assert len(edges) == 2 * m + m * (m - 1) // 2 == num_edges(m)
    assert sorted(edges) == sorted(brute_force_edges(m))


def test_edge_examples():
    assert enumerate_edges(1) == [(-2, 0), (-1, 0)]
    assert len(enumerate_edges(2)) == 5
    assert len(enumerate_edges(7)) == 35
    with pytest.raises(ValueError):
        enumerate_edges(0)


def test_cell_spec_invariants():
    spec = CellSpec("down", 4)
    for j in range(4):
        assert len(spec.incoming(j)) == 2 + j
    order = {n: i for i, n in enumerate([-2, -1, 0, 1, 2, 3])}
    assert all(order[s] < order[d] for s, d in spec.edges)
    assert spec.op_set(0) == DOWN_OPS
    assert spec.op_set(4) == NORMAL_OPS  # (0, 1)


def test_alpha_init_zero_and_shapes():
    alpha = ArchParams(CellSpec("up", 3))
    assert len(alpha.rows) == 9
    assert [len(r.data) for r in alpha.rows[:2]] == [4, 4]
    assert all(not r.data.any() for r in alpha.rows)


# --- mixed edges -----------------------------------------------------------------


def _edge_ops(rng, kinds=(K.IDENTITY, K.CONV, K.DEPTH_CONV), c=8):
    return [build_primitive(k, c, "normal", rng) for k in kinds]


def test_hard_one_hot_continuous_equals_selected(f64, rng):
    ops = _edge_ops(np.random.default_rng(0))
    x = Tensor(rng.standard_normal((1, 8, 6, 6)))
    for j in range(3):
        logits = np.full(3, -40.0)
        logits[j] = 40.0
        out = mixed_forward_continuous(F.softmax(Tensor(logits)), ops, x).data
        np.testing.assert_allclose(out, ops[j](x).data, atol=1e-6)
        np.testing.assert_allclose(out, mixed_forward_binarized(j, ops, x).data, atol=1e-6)


def test_identity_candidates_give_input(rng):
    ops = _edge_ops(np.random.default_rng(0), kinds=(K.IDENTITY, K.IDENTITY))
    x = Tensor(rng.standard_normal((1, 8, 4, 4)))
    out = mixed_forward_continuous(F.softmax(Tensor(rng.standard_normal(2))), ops, x)
    np.testing.assert_allclose(out.data, x.data, atol=1e-6)
    assert mixed_forward_binarized(1, ops, x) is x


def test_continuous_alpha_gradcheck(f64, rng):
    ops = _edge_ops(np.random.default_rng(0), kinds=(K.CONV, K.DILATION_CONV))
    for p in (q for op in ops for q in op.parameters()):
        p.data = p.data.astype(np.float64)
        p.requires_grad = False
    x = Tensor(rng.standard_normal((1, 8, 4, 4)))
    alpha = Tensor(rng.standard_normal(2), requires_grad=True)
    err = check_gradients(lambda a: mixed_forward_continuous(F.softmax(a), ops, x), [alpha])
    assert max(err) <= 1e-4


def test_binarized_gate_out_of_range(rng):
    with pytest.raises(IndexError):
        mixed_forward_binarized(3, _edge_ops(rng), Tensor(np.zeros((1, 8, 4, 4))))


def test_binarized_backward_touches_only_active(rng):
    edge = MixedEdge("normal", (K.CONV, K.DILATION_CONV, K.DEPTH_CONV), 8, np.random.default_rng(0), 4)
    x = Tensor(rng.standard_normal((2, 8, 6, 6)))
    backward(F.sum(edge(x, gate=1)))
    for i, op in enumerate(edge.ops):
        for p in op.parameters():
            if i == 1:
                assert p.grad is not None and p.grad.any()
            else:
                assert p.grad is None or not p.grad.any()


# --- gate sampling ------------------------------------------------------------------


def _alpha_with_row(row, role="down"):
    # one-node cell; overwrite the first edge's logits (pad the row to the op-set size)
    alpha = ArchParams(CellSpec(role, 1))
    n = len(alpha.rows[0].data)
    padded = np.full(n, -np.inf)
    padded[: len(row)] = row
    alpha.rows[0].data = padded
    return alpha


def _draw(alpha, draws, seed):
    rng = np.random.Generator(np.random.Philox(seed))
    return np.array([sample_binary_gates(alpha, rng)[0] for _ in range(draws)])


def test_gate_saturated():
    g = _draw(_alpha_with_row([40.0, -40.0]), 10_000, 1)
    assert (g == 0).mean() >= 0.999


def test_gate_uniform():
    g = _draw(_alpha_with_row([0.0, 0.0, 0.0]), 10_000, 2)
    freqs = np.bincount(g, minlength=3)[:3] / g.size
    np.testing.assert_allclose(freqs, 1 / 3, atol=0.02)


def test_gate_frequencies_and_chi_square():
    expected = np.exp([1.0, 0.0, -1.0]) / np.exp([1.0, 0.0, -1.0]).sum()
    np.testing.assert_allclose(expected, [0.6652, 0.2447, 0.0900], atol=1e-4)
    g = _draw(_alpha_with_row([1.0, 0.0, -1.0]), 20_000, 3)
    counts = np.bincount(g, minlength=3)[:3]
    np.testing.assert_allclose(counts / g.size, expected, atol=0.01)
    assert stats.chisquare(counts, expected * g.size).pvalue > 0.001


def test_gates_deterministic_given_seed():
    alpha = ArchParams(CellSpec("down", 3))
    a = sample_binary_gates(alpha, 99)
    b = sample_binary_gates(alpha, 99)
    np.testing.assert_array_equal(a, b)
    assert all(0 <= g < len(r.data) for g, r in zip(a, alpha.rows))


# --- genotype derivation --------------------------------------------------------------


def test_derive_m1_keeps_both_inputs():
    alpha = ArchParams(CellSpec("down", 1))
    alpha.rows[0].data = np.random.default_rng(0).standard_normal(6)
    geno = derive_genotype(alpha)
    assert [(s, d) for s, d, _ in geno.edges] == [(-2, 0), (-1, 0)]


def test_derive_argmax_op():
    alpha = ArchParams(CellSpec("down", 1))
    alpha.rows[0].data = np.array([0.1, 0.9, 0.3, -5, -5, -5])
    assert derive_genotype(alpha).edges[0][2] is DOWN_OPS[1]


def _row_with_max_weight(weight, n):
    rest = (1 - weight) / (n - 1)
    return np.log(np.array([weight] + [rest] * (n - 1)))


def test_derive_keeps_two_strongest_inputs():
    spec = CellSpec("down", 2)
    alpha = ArchParams(spec)
    node1 = spec.incoming(1)  # (-2,1), (-1,1), (0,1)
    weights = [0.5, 0.4, 0.9]
    for e, w in zip(node1, weights):
        alpha.rows[e].data = _row_with_max_weight(w, len(alpha.rows[e].data))
    kept = {(s, d) for s, d, _ in derive_genotype(alpha).edges if d == 1}
    oracle = sorted(range(3), key=lambda i: -weights[i])[:2]
    assert kept == {spec.edges[node1[i]] for i in oracle} == {(-2, 1), (0, 1)}


@given(seed=st.integers(0, 2**32 - 1), m=st.integers(1, 7), role=st.sampled_from(["down", "up"]))
@settings(max_examples=40, deadline=None)
def test_derived_genotype_invariants(seed, m, role):
    alpha = ArchParams(CellSpec(role, m))
    r = np.random.default_rng(seed)
    for row in alpha.rows:
        row.data = r.standard_normal(row.data.shape)
    geno = derive_genotype(alpha)
    geno.validate()
    assert len(geno.edges) == 2 * m


def test_genotype_text_roundtrip():
    alpha = ArchParams(CellSpec("up", 3))
    for i, row in enumerate(alpha.rows):
        row.data = np.random.default_rng(i).standard_normal(row.data.shape)
    geno = derive_genotype(alpha)
    text = geno.to_text()
    assert "M=3" in text and "up 0 <- -2 : " in text
    back = parse_genotype(text)
    assert back == geno


def test_genotype_unknown_op_reports_location():
    text = "M=1\ndown 0 <- -2 : down_conv\ndown 0 <- -1 : warp_drive\n"
    with pytest.raises(GenotypeFormatError) as info:
        parse_genotype(text, "g.txt")
    assert info.value.lineno == 3 and info.value.token == "warp_drive"
    assert "g.txt:3" in str(info.value)


def test_genotype_illegal_op_for_edge():
    with pytest.raises(ValueError):
        Genotype("down", 1, [(-2, 0, K.CONV), (-1, 0, K.DOWN_CONV)]).validate()
