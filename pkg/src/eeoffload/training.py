"""Joint multi-exit training, frozen-backbone expert fine-tuning, calibration."""
from __future__ import annotations

import logging
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import data
from .calibration import fit_temperature, nll_at_temperature
from .distortion import Kind, plan_augmentation
from .errors import DatasetError
from .model import EarlyExitModel
from .nn.functional import cross_entropy_loss, cross_entropy_with_grad
from .nn.optim import Adam, cosine_annealing_lr

log = logging.getLogger(__name__)
EVAL_CHUNK = 256


@dataclass
class TrainHyper:
    lr_head: float = 0.01
    lr_backbone: float = 0.0015
    batch_size: int = 32
    weight_decay: float = 0.0005
    patience_epochs: int = 10
    max_epochs: int = 30
    seed: int = 0
    lr_min: float = 0.0

    def __post_init__(self):
        if min(self.lr_head, self.lr_backbone) <= 0 or self.weight_decay < 0:
            raise ValueError("learning rates must be positive and weight decay non-negative")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch_size must be even and >= 2")
        if self.max_epochs < 1 or self.patience_epochs < 1:
            raise ValueError("max_epochs and patience_epochs must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    split: str
    loss: float
    accuracy: list[float]

    def as_dict(self) -> dict:
        return {"epoch": self.epoch, "split": self.split, "loss": self.loss, "accuracy": self.accuracy}


@dataclass
class TrainReport:
    kind: Kind
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")

    def val_losses(self) -> list[float]:
        return [r.loss for r in self.history if r.split == "validation"]


def joint_loss(per_exit_logits: Sequence[np.ndarray], labels, weights: Sequence[float] | None = None) -> float:
    """Weighted sum of per-exit cross-entropies (all weights 1 by default)."""
    if len(per_exit_logits) < 2:
        raise ValueError("joint loss needs at least two exits")
    weights = [1.0] * len(per_exit_logits) if weights is None else list(weights)
    n = {z.shape[0] for z in per_exit_logits} | {len(labels)}
    if len(n) != 1:
        raise ValueError(f"mismatched batch sizes across exits: {sorted(n)}")
    return float(sum(w * cross_entropy_loss(z, labels) for w, z in zip(weights, per_exit_logits) if w))


def joint_loss_with_grads(per_exit_logits, labels, weights=None):
    weights = [1.0] * len(per_exit_logits) if weights is None else list(weights)
    total, grads = 0.0, []
    for w, z in zip(weights, per_exit_logits):
        loss, g = cross_entropy_with_grad(z, labels)
        total += w * loss
        grads.append(g * w)
    return total, grads


def evaluate_exits(model: EarlyExitModel, x: np.ndarray, labels: np.ndarray, kind: Kind) -> tuple[float, list[float]]:
    """Joint validation loss and per-exit accuracy, every branch evaluated."""
    logits = batched_logits(model, x, kind)
    loss = joint_loss(logits, labels)
    acc = [float((z.argmax(axis=1) == labels).mean()) for z in logits]
    return loss, acc


def batched_logits(model: EarlyExitModel, x: np.ndarray, kind: Kind) -> list[np.ndarray]:
    chunks = [model.all_logits(x[i:i + EVAL_CHUNK], kind) for i in range(0, len(x), EVAL_CHUNK)]
    return [np.concatenate([c[e] for c in chunks]) for e in range(len(chunks[0]))]


def _snapshot(params):
    return [p.value.copy() for p in params]


def _restore(params, snap):
    for p, v in zip(params, snap):
        p.value[...] = v


def _fit(model: EarlyExitModel, kind: Kind, groups: dict, train: data.LabeledDataset,
         val_x: np.ndarray, val_y: np.ndarray, hyper: TrainHyper, rng: np.random.Generator,
         batch_fn: Callable[[np.ndarray], np.ndarray],
         on_record: Callable[[dict], None] | None) -> TrainReport:
    n = len(train)
    bs = hyper.batch_size
    if n < bs:
        raise DatasetError(f"training set of {n} images is smaller than one batch of {bs}")
    opt = Adam(groups, weight_decay=hyper.weight_decay)
    params = [p for ps, _ in opt.groups.values() for p in ps]
    report = TrainReport(kind)
    best_snap = _snapshot(params)
    stale = 0
    for epoch in range(hyper.max_epochs):
        scale = cosine_annealing_lr(1.0, hyper.lr_min, epoch, hyper.max_epochs)
        order = rng.permutation(n)
        losses, correct, seen = [], None, 0
        for start in range(0, n - bs + 1, bs):
            idx = np.sort(order[start:start + bs])
            x = batch_fn(idx)
            y = train.labels[idx]
            opt.zero_grad()
            outs = model.forward_train(x, kind)
            loss, grads = joint_loss_with_grads(outs, y)
            model.backward(grads)
            opt.step(scale)
            losses.append(loss)
            hits = np.array([(z.argmax(1) == y).sum() for z in outs])
            correct = hits if correct is None else correct + hits
            seen += bs
        train_rec = EpochRecord(epoch, "train", float(np.mean(losses)), (correct / seen).tolist())
        val_loss, val_acc = evaluate_exits(model, val_x, val_y, kind)
        val_rec = EpochRecord(epoch, "validation", val_loss, val_acc)
        report.history += [train_rec, val_rec]
        for rec in (train_rec, val_rec):
            if on_record is not None:
                on_record({"kind": kind.value, **rec.as_dict()})
        log.info("%s epoch %d train %.4f val %.4f acc %s", kind.value, epoch, train_rec.loss,
                 val_loss, " ".join(f"{a:.3f}" for a in val_acc))
        if val_loss < report.best_val_loss:
            report.best_val_loss = val_loss
            report.best_epoch = epoch
            best_snap = _snapshot(params)
            stale = 0
        else:
            stale += 1
            if stale >= hyper.patience_epochs:
                break
    _restore(params, best_snap)
    for p in params:
        p.reset_state()
    return report


def train_pristine(model: EarlyExitModel, splits: data.DatasetSplits, hyper: TrainHyper,
                   on_record: Callable[[dict], None] | None = None,
                   init: bool = True) -> TrainReport:
    """Train backbone and pristine branches jointly on clean images."""
    rng = np.random.default_rng(hyper.seed)
    if init:
        model.init_xavier(rng)
    model.set_backbone_trainable(True)
    size = model.input_shape[-1]
    train_x = data.to_network_input(splits.train.images, size)
    val_x = data.to_network_input(splits.validation.images, size)
    groups = {"heads": (model.head_parameters(Kind.PRISTINE), hyper.lr_head),
              "backbone": (model.backbone_parameters(), hyper.lr_backbone)}
    return _fit(model, Kind.PRISTINE, groups, splits.train, val_x, splits.validation.labels,
                hyper, rng, lambda idx: train_x[idx], on_record)


def finetune_expert(model: EarlyExitModel, kind: Kind, splits: data.DatasetSplits, hyper: TrainHyper,
                    on_record: Callable[[dict], None] | None = None) -> TrainReport:
    """Fit the ``kind`` branch set over the frozen pristine backbone.

    Branches start from the pristine weights. Half of every mini-batch is
    distorted at a uniformly drawn level; validation uses a fully distorted
    copy of the validation split.
    """
    kind = Kind(kind)
    if kind is Kind.PRISTINE:
        raise ValueError("finetune_expert needs kind blur or noise")
    if kind not in model.kinds:
        model.add_kind(kind)
    for e in model.exit_ids:
        model.branch(e, kind).copy_weights_from(model.branch(e, Kind.PRISTINE))
    model.set_backbone_trainable(False)
    rng = np.random.default_rng([hyper.seed, kind.code])
    size = model.input_shape[-1]
    train = splits.train
    val = data.distort_uniform(splits.validation, kind, seed=hyper.seed)
    val_x = data.to_network_input(val.images, size)

    def batch_fn(idx):
        plan = plan_augmentation(len(idx), kind, rng)
        imgs = np.stack([img if spec is None else spec.apply(img)
                         for img, spec in zip(train.images[idx], plan)])
        return data.to_network_input(imgs, size)

    groups = {"heads": (model.head_parameters(kind), hyper.lr_head)}
    try:
        return _fit(model, kind, groups, train, val_x, val.labels, hyper, rng, batch_fn, on_record)
    finally:
        model.set_backbone_trainable(True)


def calibration_sets(splits: data.DatasetSplits, kinds: Sequence[Kind], seed: int) -> dict[Kind, data.LabeledDataset]:
    return {Kind(k): data.distort_uniform(splits.validation, k, seed) for k in kinds}


def calibrate_all(model: EarlyExitModel, validation: Mapping[Kind, data.LabeledDataset],
                  min_samples: int = 100) -> dict[tuple[int, Kind], float]:
    """Fit a temperature for every (exit, kind) on that kind's validation set."""
    fitted = {}
    size = model.input_shape[-1]
    for kind, ds in validation.items():
        kind = Kind(kind)
        x = data.to_network_input(ds.images, size)
        logits = batched_logits(model, x, kind)
        for e, z in zip(model.exit_ids, logits):
            t = fit_temperature(z, ds.labels, min_samples=min_samples)
            model.branch(e, kind).temperature = t
            fitted[(e, kind)] = t
            log.info("calibrated exit %d %s: T=%.4f (nll %.4f -> %.4f)", e, kind.value, t,
                     nll_at_temperature(z, ds.labels, 1.0), nll_at_temperature(z, ds.labels, t))
    return fitted
