"""Alternating weight/architecture optimization of the supernet.

Weight steps run one sampled path per edge (binary gates) on the training
split with SGD; architecture steps run the softmax-weighted supernet on the
validation split and update only alpha with Adam.  All randomness comes from
streams keyed by (seed, purpose, epoch, batch), so a run resumed from the
start of any epoch reproduces the uninterrupted one.
"""
import dataclasses
import hashlib
import math

import numpy as np

from . import rng as rngmod
from .autodiff import NumericError, Tensor, backward
from .optim import SGD, Adam, cosine_lr
from .search_space import argmax_gates, derive_genotype, sample_binary_gates
from .supernet import Supernet
from .train_eval import DivergenceError, EpochRecord, History, dice_loss, evaluate


@dataclasses.dataclass
class SearchConfig:
    epochs: int = 30
    batch_size: int = 4
    lr_max: float = 0.025
    lr_min: float = 0.01
    momentum: float = 0.95
    weight_decay: float = 3e-4
    arch_lr: float = 3e-4
    arch_betas: tuple = (0.5, 0.999)
    arch_weight_decay: float = 1e-3
    val_fraction: float = 0.2
    seed: int = 0
    max_aborts: int = 3
    check_phases: bool = False

    def __post_init__(self):
        self.arch_betas = tuple(float(b) for b in self.arch_betas)
        self.validate()

    def validate(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr_max > self.lr_min > 0:
            raise ValueError(f"need lr_max > lr_min > 0, got {self.lr_max}, {self.lr_min}")
        return self

    def lr(self, epoch):
        return cosine_lr(epoch, max(self.epochs - 1, 1), self.lr_max, self.lr_min)


def weights_digest(net):
    h = hashlib.sha256()
    for name, p in net.named_parameters():
        h.update(name.encode())
        h.update(p.data.tobytes())
    return h.hexdigest()


def alpha_digest(net):
    return hashlib.sha256((net.alpha["down"].digest() + net.alpha["up"].digest()).encode()).hexdigest()


def genotype_hash(net):
    g = derive(net)
    return hashlib.sha256((g["down"].to_text() + g["up"].to_text()).encode()).hexdigest()[:16]


def derive(net):
    return {role: derive_genotype(net.alpha[role]) for role in ("down", "up")}


def _finite_loss(loss):
    if not math.isfinite(loss.item()):
        raise NumericError(f"non-finite loss {loss.item()}")


def weight_step(net, images, labels, optimizer, rng):
    """One SGD step on the sampled single-path network; alpha is not touched."""
    gates = {role: sample_binary_gates(net.alpha[role], rng) for role in ("down", "up")}
    optimizer.zero_grad()
    loss = dice_loss(net(Tensor(images), mode="binarized", gates=gates), labels)
    _finite_loss(loss)
    backward(loss)
    optimizer.step()
    return loss.item()


def arch_step(net, images, labels, optimizer):
    """One Adam step on alpha through the continuous relaxation; weights frozen."""
    params = net.parameters()
    for p in params:
        p.requires_grad = False
    try:
        optimizer.zero_grad()
        loss = dice_loss(net(Tensor(images), mode="continuous"), labels)
        _finite_loss(loss)
        backward(loss)
    finally:
        for p in params:
            p.requires_grad = True
    optimizer.step()
    return loss.item()


@dataclasses.dataclass
class SearchState:
    """Everything needed to continue a search at the start of ``epoch``."""

    net: Supernet
    weight_opt: SGD
    arch_opt: Adam
    history: History
    epoch: int = 0
    phase_log: list = dataclasses.field(default_factory=list)


def init_search(config, net_config):
    net = Supernet(net_config, seed=config.seed)
    weight_opt = SGD(net.parameters(), config.lr_max, config.momentum, config.weight_decay)
    arch_opt = Adam(net.arch_parameters(), config.arch_lr, config.arch_betas, weight_decay=config.arch_weight_decay)
    return SearchState(net, weight_opt, arch_opt, History())


def _batches(n, batch_size, order=None):
    order = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield np.sort(order[start : start + batch_size])


def _guarded(step, aborts, max_aborts, log):
    try:
        return step(), 0
    except NumericError as exc:
        aborts += 1
        if log:
            log(f"step aborted: {exc}")
        if aborts >= max_aborts:
            raise DivergenceError(f"{aborts} consecutive non-finite steps") from exc
        return None, aborts


def run_epoch(state, config, train, val, log=None):
    net, epoch = state.net, state.epoch
    lr = config.lr(epoch)
    state.weight_opt.lr = lr
    check = config.check_phases
    aborts = 0

    a0 = alpha_digest(net) if check else None
    losses = []
    order = rngmod.stream(config.seed, "search-order", epoch).permutation(len(train))
    for b, idx in enumerate(_batches(len(train), config.batch_size, order)):
        gate_rng = rngmod.stream(config.seed, "gates", epoch, b)
        loss, aborts = _guarded(
            lambda: weight_step(net, train.images[idx], train.labels[idx], state.weight_opt, gate_rng),
            aborts, config.max_aborts, log)
        if loss is None:
            state.weight_opt.zero_grad()
        else:
            losses.append(loss)
    a1 = alpha_digest(net) if check else None

    w0 = weights_digest(net) if check else None
    for idx in _batches(len(val), config.batch_size):
        loss, aborts = _guarded(
            lambda: arch_step(net, val.images[idx], val.labels[idx], state.arch_opt),
            aborts, config.max_aborts, log)
        if loss is None:
            state.arch_opt.zero_grad()
    w1 = weights_digest(net) if check else None
    state.weight_opt.zero_grad()
    state.arch_opt.zero_grad()

    if check:
        state.phase_log.append({"epoch": epoch + 1, "alpha_before": a0, "alpha_after_weights": a1,
                                "weights_before": w0, "weights_after_arch": w1})
        if a0 != a1 or w0 != w1:
            raise AssertionError(f"phase separation violated in epoch {epoch + 1}")

    gates = {role: argmax_gates(net.alpha[role]) for role in ("down", "up")}
    m = evaluate(lambda x: net(x, mode="binarized", gates=gates), val, batch_size=config.batch_size)
    mean_loss = float(np.mean(losses)) if losses else math.nan
    state.history.append(EpochRecord(epoch + 1, mean_loss, m.pixel_accuracy, m.miou, m.dsc, lr, genotype_hash(net)))
    state.epoch = epoch + 1
    if log:
        log(f"search epoch {epoch + 1}/{config.epochs} lr {lr:.5f} loss {mean_loss:.4f} "
            f"val mIoU {m.miou:.4f} DSC {m.dsc:.4f}")
    return state


def run_search(config, net_config, train, val, state=None, on_epoch=None, log=None):
    """Returns (genotype dict {"down", "up"}, history, final state)."""
    if len(train) == 0 or len(val) == 0:
        raise ValueError("search needs non-empty train and validation splits")
    if set(train.sources) & set(val.sources):
        raise ValueError("train and validation splits share source images")
    config.validate()
    state = state or init_search(config, net_config)
    while state.epoch < config.epochs:
        run_epoch(state, config, train, val, log=log)
        if on_epoch:
            on_epoch(state)
    return derive(state.net), state.history, state
