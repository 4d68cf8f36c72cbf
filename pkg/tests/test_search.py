import numpy as np
import pytest

from nasunet import data as D
from nasunet.autodiff import NumericError, Parameter, Tensor, backward, functional as F
from nasunet.gradcheck import check_gradients
from nasunet.optim import SGD, Adam
from nasunet.primitives import NORMAL_OPS, PrimitiveKind as K
from nasunet.rng import stream
from nasunet.search import (
    SearchConfig,
    alpha_digest,
    arch_step,
    init_search,
    run_search,
    weight_step,
    weights_digest,
)
from nasunet.search_space import MixedEdge, sample_binary_gates
from nasunet.supernet import NetworkConfig, Supernet
from nasunet.train_eval import DivergenceError, dice_loss


def toy_config(depth=1, m=1, size=8):
    return NetworkConfig(depth=depth, base_channels=4, num_classes=2, m=m, input_size=(size, size))


def toy_batch(n=2, size=8, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.zeros((n, size, size), dtype=np.int64)
    labels[:, size // 2 :] = 1
    images = (labels[:, None] * 0.5 + 0.1 * rng.standard_normal((n, 1, size, size))).astype(np.float32)
    return images, labels


def toy_dataset(n_sources, size=8, seed=0):
    samples = D.generate_synthetic(D.SynthConfig(num_images=n_sources, height=size * 4, width=size * 4,
                                                 max_amplitude=1.0, seed=seed))
    ds = D.Dataset.from_samples(samples)
    # shrink to the toy size and two classes
    ds.images = ds.images[:, :, ::4, ::4].copy()
    ds.labels = (ds.labels[:, ::4, ::4] >= 2).astype(np.int64)
    return ds


def make_opts(net):
    return SGD(net.parameters(), 0.025, 0.95, 3e-4), Adam(net.arch_parameters(), 3e-4, (0.5, 0.999), weight_decay=1e-3)


def test_weight_step_freezes_alpha_and_inactive_ops():
    net = Supernet(toy_config(depth=2, m=2, size=8), seed=0)
    sgd, _ = make_opts(net)
    images, labels = toy_batch()
    snap = {n: p.data.copy() for n, p in net.named_parameters()}
    a0 = alpha_digest(net)
    rng = stream(0, "gates", 0, 0)
    weight_step(net, images, labels, sgd, rng)
    assert alpha_digest(net) == a0
    rng = stream(0, "gates", 0, 0)
    gates = {r: sample_binary_gates(net.alpha[r], rng) for r in ("down", "up")}
    changed = {n for n, p in net.named_parameters() if not np.array_equal(p.data, snap[n])}
    for group, role in (("down_cells", "down"), ("up_cells", "up")):
        for ci, cell in enumerate(getattr(net, group)):
            for ei, (edge, eid) in enumerate(zip(cell.edges, cell.edge_ids)):
                for j in range(len(edge.ops)):
                    prefix = f"{group}.{ci}.edges.{ei}.ops.{j}."
                    touched = any(n.startswith(prefix) for n in changed)
                    if j != gates[role][eid]:
                        assert not touched, prefix
    assert changed


def test_weight_step_memory_independent_of_op_count():
    net = Supernet(toy_config(depth=2, m=2), seed=0)
    sgd, _ = make_opts(net)
    images, labels = toy_batch()
    n_edges = sum(len(c.edges) for c in (*net.down_cells, *net.up_cells))
    net.reset_materialized()
    weight_step(net, images, labels, sgd, stream(0, "g"))
    assert net.materialized_ops() == n_edges


def test_arch_step_freezes_weights():
    net = Supernet(toy_config(m=2), seed=1)
    _, adam = make_opts(net)
    images, labels = toy_batch()
    w0 = weights_digest(net)
    a0 = alpha_digest(net)
    arch_step(net, images, labels, adam)
    assert weights_digest(net) == w0
    assert alpha_digest(net) != a0
    assert all(p.requires_grad for p in net.parameters())
    assert all(p.grad is None for p in net.parameters())


def test_alpha_gradient_finite_differences(f64):
    net = Supernet(toy_config(depth=1, m=1), seed=2)
    rng = np.random.default_rng(2)
    for p in net.arch_parameters():
        p.data[:] = rng.standard_normal(p.data.shape)
    images, labels = toy_batch(seed=2)
    x = Tensor(images.astype(np.float64))
    rows = net.arch_parameters()
    errs = check_gradients(lambda *_: dice_loss(net(x, mode="continuous"), labels), rows, eps=1e-6)
    assert max(errs) <= 1e-4


def test_arch_steps_prefer_identity_when_target_is_input():
    # a single normal edge whose target is its own input; only Identity fits exactly
    rng = np.random.default_rng(0)
    edge = MixedEdge("normal", NORMAL_OPS, 8, rng, 4)
    alpha = Parameter(np.zeros(len(NORMAL_OPS)))
    opt = Adam([alpha], lr=0.05, betas=(0.5, 0.999))
    x = Tensor(rng.standard_normal((2, 8, 6, 6)))
    for p in edge.parameters():
        p.requires_grad = False
    for _ in range(100):
        diff = F.add(edge(x, weights=F.softmax(alpha)), F.affine(x, -1.0, 0.0))
        alpha.grad = None
        backward(F.sum(F.mul(diff, diff)))
        opt.step()
    probs = np.exp(alpha.data - alpha.data.max())
    probs /= probs.sum()
    i = NORMAL_OPS.index(K.IDENTITY)
    assert probs[i] == probs.max() and probs[i] > 2 * np.sort(probs)[-2]


def test_weight_steps_overfit_tiny_batch():
    # peaked alpha pins the sampled path, so successive losses are comparable
    net = Supernet(toy_config(depth=1, m=1), seed=4)
    for p in net.arch_parameters():
        p.data[0] = 30.0
    sgd, _ = make_opts(net)
    images, labels = toy_batch(seed=4)
    losses = [weight_step(net, images, labels, sgd, stream(4, "g", i)) for i in range(50)]
    assert losses[-1] < 0.5 * losses[0]


def test_nonfinite_batch_aborts_without_update():
    net = Supernet(toy_config(), seed=0)
    sgd, _ = make_opts(net)
    images, labels = toy_batch()
    images[0, 0, 0, 0] = np.nan
    snap = weights_digest(net)
    with pytest.raises(NumericError):
        weight_step(net, images, labels, sgd, stream(0, "g"))
    assert weights_digest(net) == snap


def test_three_consecutive_aborts_fail_the_run():
    ds = toy_dataset(6)
    ds.images[:] = np.nan
    tr, va = D.search_split(ds, 0.34, 0)
    with pytest.raises(DivergenceError):
        run_search(SearchConfig(epochs=1, batch_size=1), toy_config(), tr, va)


def test_config_validation():
    with pytest.raises(ValueError):
        SearchConfig(lr_max=0.01, lr_min=0.02)
    with pytest.raises(ValueError):
        SearchConfig(epochs=0)
    cfg = SearchConfig(epochs=3)
    assert [cfg.lr(e) for e in range(3)] == [0.025, pytest.approx(0.0175), pytest.approx(0.01)]


def test_run_search_bookkeeping_and_determinism():
    ds = toy_dataset(8)
    tr, va = D.search_split(ds, 0.25, 0)
    cfg = SearchConfig(epochs=2, batch_size=2, seed=11, check_phases=True)
    g1, h1, s1 = run_search(cfg, toy_config(), tr, va)
    g2, h2, _ = run_search(cfg, toy_config(), tr, va)
    assert len(h1) == 2 and [r.epoch for r in h1] == [1, 2]
    assert h1 == h2
    assert g1["down"].to_text() == g2["down"].to_text() and g1["up"].to_text() == g2["up"].to_text()
    for rec in s1.phase_log:
        assert rec["alpha_before"] == rec["alpha_after_weights"]
        assert rec["weights_before"] == rec["weights_after_arch"]


def test_run_search_resume_matches():
    ds = toy_dataset(8)
    tr, va = D.search_split(ds, 0.25, 0)
    cfg = SearchConfig(epochs=3, batch_size=2, seed=5)
    _, full, _ = run_search(cfg, toy_config(), tr, va)
    state = init_search(cfg, toy_config())
    state = run_search(SearchConfig(epochs=1, batch_size=2, seed=5), toy_config(), tr, va, state=state)[2]
    _, resumed, _ = run_search(cfg, toy_config(), tr, va, state=state)
    assert resumed == full


def test_run_search_rejects_bad_splits():
    ds = toy_dataset(4)
    with pytest.raises(ValueError):
        run_search(SearchConfig(epochs=1), toy_config(), ds, ds.subset([]))
    with pytest.raises(ValueError):
        run_search(SearchConfig(epochs=1), toy_config(), ds, ds)
