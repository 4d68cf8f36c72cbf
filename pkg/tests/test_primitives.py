import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nasunet.autodiff import Parameter, ShapeError, Tensor
from nasunet.gradcheck import check_gradients
from nasunet.primitives import (
    DOWN_OPS,
    NORMAL_OPS,
    UP_OPS,
    ConvReluGN,
    PrimitiveKind as K,
    build_primitive,
    output_shape,
    role_of,
    se_reweight,
)


def build(kind, c_in, seed=0):
    return build_primitive(kind, c_in, role_of(kind), np.random.default_rng(seed))


def test_table_sizes():
    assert (len(DOWN_OPS), len(UP_OPS), len(NORMAL_OPS)) == (6, 4, 5)
    assert len(set(DOWN_OPS) | set(UP_OPS) | set(NORMAL_OPS)) == 15


def test_down_conv_contract(rng):
    op = build(K.DOWN_CONV, 8)
    assert op(Tensor(rng.standard_normal((1, 8, 16, 16)))).shape == (1, 16, 8, 8)


def test_up_conv_contract(rng):
    op = build(K.UP_CONV, 16)
    assert op(Tensor(rng.standard_normal((1, 16, 8, 8)))).shape == (1, 8, 16, 16)


def test_identity_is_parameter_free(rng):
    op = build(K.IDENTITY, 8)
    assert op.num_parameters() == 0
    x = Tensor(rng.standard_normal((1, 8, 4, 4)))
    assert op(x) is x


def test_depth_conv_and_down_dilation(rng):
    x = Tensor(rng.standard_normal((1, 4, 8, 8)))
    assert build(K.DEPTH_CONV, 4)(x).shape == (1, 4, 8, 8)
    assert build(K.DOWN_DILATION_CONV, 4)(x).shape == (1, 8, 4, 4)


def test_conv_stages_are_conv_relu_gn(rng):
    op = build(K.DOWN_DEPTH_CONV, 8)
    assert [type(s) for s in op.stages] == [ConvReluGN, ConvReluGN]
    assert op.stages[0].groups == 8
    # output of a GN stage with gamma=1, beta=0 is normalized per group
    y = op.stages[0](Tensor(rng.standard_normal((1, 8, 8, 8)))).data
    assert abs(y.reshape(1, 4, -1).mean(axis=2)).max() < 1e-5


def test_pool_ops_project_to_double_channels(rng):
    for kind in (K.AVG_POOL, K.MAX_POOL):
        op = build(kind, 8)
        assert op.stages[0].conv.shape == (16, 8, 1, 1)


def test_illegal_role_rejected():
    with pytest.raises(ValueError):
        build_primitive(K.UP_CONV, 8, "down", np.random.default_rng(0))
    with pytest.raises(ValueError):
        build_primitive(K.CONV, 8, "up", np.random.default_rng(0))


def test_channel_constraints(rng):
    with pytest.raises(ShapeError):
        build_primitive(K.CONV, 6, "normal", rng)  # 6 % GN groups
    with pytest.raises(ShapeError):
        build(K.CONV, 8)(Tensor(np.zeros((1, 4, 4, 4))))


@pytest.mark.parametrize("kind", list(K))
def test_deterministic_params(kind):
    c = 16 if kind in UP_OPS else 8
    a, b = build(kind, c, seed=3), build(kind, c, seed=3)
    sa, sb = a.state_dict(), b.state_dict()
    assert sa.keys() == sb.keys()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)
    assert a.num_parameters() == b.num_parameters()


@given(kind=st.sampled_from(list(K)), h=st.sampled_from([4, 6, 8, 10, 12, 14, 16]), w=st.sampled_from([4, 6, 8, 10, 12, 14, 16]))
@settings(max_examples=60, deadline=None)
def test_shape_contract_property(kind, h, w):
    c = 16 if kind in UP_OPS else 8
    op = build(kind, c)
    x = Tensor(np.random.default_rng(h * w).standard_normal((1, c, h, w)))
    assert op(x).shape == output_shape(kind, x.shape)


def test_se_zero_fc_gives_half():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 8, 4, 4)))
    fc1 = Tensor(np.zeros((2, 8, 1, 1)))
    fc2 = Tensor(np.zeros((8, 2, 1, 1)))
    np.testing.assert_array_equal(se_reweight(x, fc1, fc2, 4).data, 0.5 * x.data)


def test_se_zero_input(rng):
    fc1 = Tensor(rng.standard_normal((2, 8, 1, 1)))
    fc2 = Tensor(rng.standard_normal((8, 2, 1, 1)))
    assert not se_reweight(Tensor(np.zeros((1, 8, 3, 3))), fc1, fc2, 4).data.any()


def test_se_reduction_indivisible(rng):
    with pytest.raises(ShapeError):
        se_reweight(Tensor(np.ones((1, 6, 2, 2))), Tensor(np.ones((1, 6, 1, 1))), Tensor(np.ones((6, 1, 1, 1))), 4)


@given(seed=st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_se_gate_bounds(seed):
    r = np.random.default_rng(seed)
    # moderate magnitudes: far in the tails sigmoid rounds to exactly 0 or 1
    x = Tensor(r.standard_normal((1, 8, 3, 3)))
    fc1 = Tensor(r.standard_normal((2, 8, 1, 1)))
    fc2 = Tensor(r.standard_normal((8, 2, 1, 1)))
    out = se_reweight(x, fc1, fc2, 4).data
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = out / x.data
    ratio = ratio[np.isfinite(ratio)]
    assert (ratio > 0).all() and (ratio < 1).all()
    assert (np.abs(out) <= np.abs(x.data)).all()


def _params64(op, seed=7):
    # Perturb GN affine params off their init: with beta=0 a one-channel group has
    # exactly zero spatial mean, which parks the SE squeeze on the ReLU kink.
    r = np.random.default_rng(seed)
    for p in op.parameters():
        p.data = p.data.astype(np.float64) + 0.3 * r.standard_normal(p.shape)
    return op.parameters()


def test_down_cweight_gradcheck(f64, backend, rng):
    op = build(K.DOWN_CWEIGHT, 4)
    params = _params64(op)
    x = Tensor(rng.standard_normal((1, 4, 6, 6)), requires_grad=True)
    errs = check_gradients(lambda x, *_: op(x), [x, *params])
    assert max(errs) <= 1e-4


@pytest.mark.parametrize("kind", [k for k in K if k is not K.IDENTITY])
def test_every_parametrized_kind_gradcheck(f64, rng, kind):
    c = 8
    op = build(kind, c)
    params = _params64(op)
    x = Tensor(rng.standard_normal((1, c, 4, 4)), requires_grad=True)
    errs = check_gradients(lambda x, *_: op(x), [x, *params])
    assert max(errs) <= 1e-4
