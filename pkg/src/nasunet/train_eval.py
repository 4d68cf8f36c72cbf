"""Dice loss, confusion-matrix metrics, and the retraining/evaluation loops."""
import csv
import dataclasses
import math

import numpy as np

from . import rng as rngmod
from .autodiff import NumericError, Tensor, backward, no_grad
from .autodiff.tensor import make_result
from .optim import Adam

DICE_SMOOTH = 1.0


def dice_loss(logits, labels, smooth=DICE_SMOOTH):
    """Soft multi-class Dice loss, ``1 - mean_c dice_c``, sums taken over the whole batch.

    ``logits`` is an (N, C, H, W) tensor and ``labels`` an integer (N, H, W) mask.
    """
    labels = np.asarray(labels)
    n, c, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label values must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    y = (labels[:, None, :, :] == np.arange(c)[None, :, None, None]).astype(p.dtype)
    inter = (p * y).sum(axis=(0, 2, 3))
    den = p.sum(axis=(0, 2, 3)) + y.sum(axis=(0, 2, 3)) + smooth
    num = 2.0 * inter + smooth
    loss = np.asarray(1.0 - np.mean(num / den), dtype=p.dtype)

    def back(g):
        # dL/dp for each class, then through the per-pixel channel softmax.
        a = (2.0 / den)[None, :, None, None]
        b = (num / den**2)[None, :, None, None]
        gp = (-float(g) / c) * (a * y - b)
        gz = p * (gp - (gp * p).sum(axis=1, keepdims=True))
        return (gz.astype(p.dtype),)

    return make_result(loss, (logits,), back, "dice_loss")


class ConfusionMatrix:
    """counts[y, yhat]; rows are ground truth, columns predictions."""

    def __init__(self, num_classes, counts=None):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64) if counts is None else np.array(counts, dtype=np.int64)
        if self.counts.shape != (num_classes, num_classes) or (self.counts < 0).any():
            raise ValueError("confusion counts must be a non-negative square matrix")

    @property
    def total(self):
        return int(self.counts.sum())

    def merge(self, other):
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)


def accumulate_confusion(cm, predictions, labels):
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"prediction shape {predictions.shape} != label shape {labels.shape}")
    k = cm.num_classes
    for arr, what in ((predictions, "prediction"), (labels, "label")):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ValueError(f"{what} values outside [0, {k})")
    flat = labels.astype(np.int64).ravel() * k + predictions.astype(np.int64).ravel()
    cm.counts += np.bincount(flat, minlength=k * k).reshape(k, k)
    return cm


@dataclasses.dataclass
class MetricsRecord:
    pixel_accuracy: float
    miou: float
    dsc: float
    num_pixels: int = 0
    per_class: list = dataclasses.field(default_factory=list)

    def as_dict(self):
        return dataclasses.asdict(self)


def compute_metrics(cm):
    counts = cm.counts
    total = counts.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(counts).astype(np.float64)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    present = (counts.sum(axis=0) + counts.sum(axis=1)) > 0
    per_class = []
    ious, dscs = [], []
    for c in range(cm.num_classes):
        row = {"class": c, "present": bool(present[c]), "tp": int(tp[c]), "fp": int(fp[c]), "fn": int(fn[c])}
        if present[c]:
            row["iou"] = tp[c] / (tp[c] + fp[c] + fn[c])
            row["dsc"] = 2 * tp[c] / (2 * tp[c] + fp[c] + fn[c])
            ious.append(row["iou"])
            dscs.append(row["dsc"])
        per_class.append(row)
    return MetricsRecord(
        pixel_accuracy=float(tp.sum() / total),
        miou=float(np.mean(ious)),
        dsc=float(np.mean(dscs)),
        num_pixels=int(total),
        per_class=per_class,
    )


def predict(forward, images, batch_size=8):
    """Argmax class mask for every image, evaluated without recording a graph."""
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            logits = forward(Tensor(images[i : i + batch_size]))
            out.append(np.argmax(logits.data, axis=1))
    return np.concatenate(out) if out else np.zeros((0,), dtype=np.int64)


def evaluate(forward, dataset, num_classes=None, batch_size=8, return_confusion=False):
    """Global metrics of ``forward`` (any callable Tensor -> logits) over ``dataset``."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    cm = None
    with no_grad():
        for i in range(0, len(dataset), batch_size):
            logits = forward(Tensor(dataset.images[i : i + batch_size]))
            if cm is None:
                cm = ConfusionMatrix(num_classes or logits.shape[1])
            accumulate_confusion(cm, np.argmax(logits.data, axis=1), dataset.labels[i : i + batch_size])
    metrics = compute_metrics(cm)
    return (metrics, cm) if return_confusion else metrics


@dataclasses.dataclass
class EpochRecord:
    epoch: int
    loss: float
    pixel_acc: float
    miou: float
    dsc: float
    lr: float
    genotype_hash: str = ""


HISTORY_FIELDS = [f.name for f in dataclasses.fields(EpochRecord)]


class History(list):
    """Per-epoch records; one per completed epoch, epochs strictly increasing."""

    def append(self, record):
        if self and record.epoch <= self[-1].epoch:
            raise ValueError(f"epoch {record.epoch} does not follow {self[-1].epoch}")
        super().append(record)

    def column(self, name):
        return np.array([getattr(r, name) for r in self])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_FIELDS)
            for r in self:
                # repr keeps floats round-trippable, so reruns compare bit-for-bit.
                w.writerow([r.epoch] + [repr(float(getattr(r, k))) for k in HISTORY_FIELDS[1:-1]] + [r.genotype_hash])

    @classmethod
    def from_csv(cls, path):
        h = cls()
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != HISTORY_FIELDS:
            raise ValueError(f"{path}: unexpected history header {rows[:1]}")
        for row in rows[1:]:
            h.append(EpochRecord(int(row[0]), *(float(v) for v in row[1:-1]), row[-1]))
        return h


@dataclasses.dataclass
class RetrainConfig:
    epochs: int = 60
    batch_size: int = 4
    lr: float = 3.0e-4
    weight_decay: float = 5.0e-5
    betas: tuple = (0.9, 0.999)
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


def train_epoch(net, optimizer, dataset, batch_size, order_rng, max_aborts=3, log=None):
    """One pass of Adam/Dice steps over a shuffled ``dataset``; returns mean loss."""
    order = order_rng.permutation(len(dataset))
    losses = []
    aborts = 0
    for start in range(0, len(order), batch_size):
        idx = np.sort(order[start : start + batch_size])
        optimizer.zero_grad()
        try:
            loss = dice_loss(net(Tensor(dataset.images[idx])), dataset.labels[idx])
            backward(loss)
        except NumericError as exc:
            optimizer.zero_grad()
            aborts += 1
            if log:
                log(f"step aborted: {exc}")
            if aborts >= max_aborts:
                raise DivergenceError(f"{aborts} consecutive non-finite steps") from exc
            continue
        aborts = 0
        optimizer.step()
        losses.append(loss.item())
    return float(np.mean(losses)) if losses else math.nan


class DivergenceError(NumericError):
    """Too many consecutive non-finite steps."""


def train_network(net, train, test, config, start_epoch=0, optimizer=None, history=None, on_epoch=None, log=None):
    """Adam + Dice training of any network; evaluates ``test`` after every epoch."""
    if len(train) == 0:
        raise ValueError("empty training split")
    optimizer = optimizer or Adam(net.parameters(), config.lr, config.betas, weight_decay=config.weight_decay)
    history = History() if history is None else history
    for epoch in range(start_epoch, config.epochs):
        loss = train_epoch(net, optimizer, train, config.batch_size,
                           rngmod.stream(config.seed, "retrain-order", epoch), log=log)
        m = evaluate(net, test)
        history.append(EpochRecord(epoch + 1, loss, m.pixel_accuracy, m.miou, m.dsc, config.lr))
        if log:
            log(f"epoch {epoch + 1}/{config.epochs} loss {loss:.4f} test mIoU {m.miou:.4f} DSC {m.dsc:.4f}")
        if on_epoch:
            on_epoch(epoch + 1, net, optimizer, history)
    return net, history


def retrain(genotypes, net_config, train, test, config, log=None):
    """Train the derived discrete network from scratch; history is on ``test``."""
    from .supernet import DiscreteNet

    net = DiscreteNet(genotypes, net_config, seed=config.seed)
    return train_network(net, train, test, config, log=log)
