"""Bilevel alternating optimization of network weights and architecture.

Warm-up epochs train weights only; afterwards every weight batch (trainI)
is followed by one architecture batch (trainII) updated first-order, i.e.
with the weights held fixed during the architecture step.  The two splits
stay disjoint for the whole run and every step is appended to a ledger of
(epoch, phase, batch, loss, lr) records.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .data import StereoSample, random_crop
from .modules import SGD, rng_for
from .pipeline import full_forward
from .tensor import backward


@dataclass(frozen=True)
class SearchSchedule:
    total_epochs: int = 10
    warmup_epochs: int = 3
    lr_start: float = 0.025
    lr_end: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0003
    arch_lr: float = 0.5
    batch_size: int = 4
    crop_height: int = 24
    crop_width: int = 48

    def __post_init__(self):
        if not self.warmup_epochs < self.total_epochs:
            raise ValueError(
                f"warmup epochs ({self.warmup_epochs}) must be below total "
                f"({self.total_epochs})")
        if not self.lr_end < self.lr_start:
            raise ValueError("lr_end must be below lr_start")


def cosine_lr(epoch: int, schedule: SearchSchedule) -> float:
    """Cosine decay from lr_start (epoch 0) to lr_end (epoch total_epochs)."""
    if not 0 <= epoch <= schedule.total_epochs:
        raise ValueError(
            f"epoch {epoch} outside 0..{schedule.total_epochs}")
    span = schedule.lr_start - schedule.lr_end
    return schedule.lr_end + 0.5 * span * (
        1.0 + math.cos(math.pi * epoch / schedule.total_epochs))


@dataclass(frozen=True)
class SplitDataset:
    """Disjoint index sets over one sample list: weight / arch / held-out."""

    samples: tuple
    train_w_idx: tuple
    train_arch_idx: tuple
    eval_idx: tuple

    def __post_init__(self):
        w, a, e = set(self.train_w_idx), set(self.train_arch_idx), set(self.eval_idx)
        if w & a or w & e or a & e:
            raise ValueError("dataset splits must be disjoint")
        if not self.train_w_idx or not self.train_arch_idx:
            raise ValueError("both training splits must be non-empty")

    @property
    def train_w(self):
        return [self.samples[i] for i in self.train_w_idx]

    @property
    def train_arch(self):
        return [self.samples[i] for i in self.train_arch_idx]

    @property
    def eval_samples(self):
        return [self.samples[i] for i in self.eval_idx]


def make_split(samples, eval_count: int) -> SplitDataset:
    """First half of the remainder updates weights, second half updates
    architecture, the tail is held out for evaluation."""
    n = len(samples)
    if eval_count >= n:
        raise ValueError(f"eval count {eval_count} leaves no training data")
    n_train = n - eval_count
    n_w = n_train - n_train // 2
    return SplitDataset(
        samples=tuple(samples),
        train_w_idx=tuple(range(0, n_w)),
        train_arch_idx=tuple(range(n_w, n_train)),
        eval_idx=tuple(range(n_train, n)))


class SearchAborted(RuntimeError):
    def __init__(self, epoch, phase, batch, value):
        super().__init__(
            f"non-finite loss ({value}) at epoch {epoch} phase {phase} "
            f"batch {batch}")
        self.epoch, self.phase, self.batch = epoch, phase, batch


@dataclass
class LedgerRow:
    epoch: int
    phase: str
    batch: int
    loss: float
    lr: float

    def format(self) -> str:
        return f"{self.epoch}\t{self.phase}\t{self.batch}\t{self.loss!r}\t{self.lr!r}"


LEDGER_HEADER = "epoch\tphase\tbatch\tloss\tlr"


def _make_batch(samples, idxs, schedule: SearchSchedule, rng):
    views = []
    for i in idxs:
        s = samples[i]
        if s.gt.shape != (schedule.crop_height, schedule.crop_width):
            s = random_crop(s, schedule.crop_height, schedule.crop_width, rng)
        views.append(s)
    left = np.stack([v.left for v in views])
    right = np.stack([v.right for v in views])
    gt = np.stack([v.gt for v in views])
    valid = np.stack([v.valid for v in views])
    return left, right, gt, valid


def _batched(index_count, batch_size):
    return [range(k, min(k + batch_size, index_count))
            for k in range(0, index_count, batch_size)]


def _zero_all(net, w_opt, arch_opt):
    w_opt.zero_grad()
    net.arch.zero_grad()


def _forward_checked(net, batch, max_disparity, epoch, phase, k):
    left, right, gt, valid = batch
    try:
        _disp, loss = full_forward(net, left, right, gt, valid, max_disparity)
    except ValueError as e:
        if "non-finite" in str(e):
            raise SearchAborted(epoch, phase, k, "nan") from e
        raise
    val = loss.item()
    if not math.isfinite(val):
        raise SearchAborted(epoch, phase, k, val)
    return loss, val


def bilevel_search(data: SplitDataset, schedule: SearchSchedule, net,
                   max_disparity: int, seed: int, ledger: list,
                   arch_group: str = "all", tag: str = "search"):
    """Run the alternating schedule in place; returns per-epoch arch snapshots.

    ``arch_group`` restricts which architecture parameters the arch steps
    update ("all", "feature", or "matching"); the rest stay frozen, which
    implements the separate-search ablation.
    """
    groups = {"all": net.arch.named, "feature": net.arch.feature_group,
              "matching": net.arch.matching_group}
    if arch_group not in groups:
        raise ValueError(f"unknown arch group {arch_group!r}")
    w_opt = SGD(list(net.named_parameters()), momentum=schedule.momentum,
                weight_decay=schedule.weight_decay)
    arch_opt = SGD(list(groups[arch_group]()), momentum=schedule.momentum,
                   weight_decay=0.0)
    train_w, train_arch = data.train_w, data.train_arch
    history = []
    for epoch in range(1, schedule.total_epochs + 1):
        lr = cosine_lr(epoch - 1, schedule)
        warm = epoch <= schedule.warmup_epochs
        rng = rng_for(seed, tag, "epoch", epoch)
        order_w = rng.permutation(len(train_w))
        order_a = rng.permutation(len(train_arch))
        w_batches = _batched(len(order_w), schedule.batch_size)
        a_batches = _batched(len(order_a), schedule.batch_size)
        for k, batch_range in enumerate(w_batches):
            idxs = [order_w[i] for i in batch_range]
            batch = _make_batch(train_w, idxs, schedule, rng)
            phase = "warmup" if warm else "w"
            _zero_all(net, w_opt, arch_opt)
            loss, val = _forward_checked(net, batch, max_disparity, epoch, phase, k)
            backward(loss)
            w_opt.step(lr)
            ledger.append(LedgerRow(epoch, phase, k, val, lr))
            if warm:
                continue
            a_range = a_batches[k % len(a_batches)]
            aidxs = [order_a[i] for i in a_range]
            batch = _make_batch(train_arch, aidxs, schedule, rng)
            _zero_all(net, w_opt, arch_opt)
            loss, val = _forward_checked(net, batch, max_disparity, epoch, "arch", k)
            backward(loss)
            arch_opt.step(schedule.arch_lr)  # first-order: w left untouched
            ledger.append(LedgerRow(epoch, "arch", k, val, schedule.arch_lr))
        history.append(net.arch.snapshot())
    return history


def train_network(net, samples, epochs: int, schedule: SearchSchedule,
                  max_disparity: int, seed: int, ledger: list,
                  start_epoch: int = 1, optimizer: SGD = None):
    """Plain weight training of a (decoded) network over all given samples.

    The cosine schedule spans ``epochs``; passing ``start_epoch`` plus an
    existing optimizer resumes a run deterministically.
    """
    if epochs < 1:
        raise ValueError("training needs at least one epoch")
    opt = optimizer or SGD(list(net.named_parameters()),
                           momentum=schedule.momentum,
                           weight_decay=schedule.weight_decay)
    span = replace(schedule, total_epochs=epochs, warmup_epochs=0)
    for epoch in range(start_epoch, epochs + 1):
        lr = cosine_lr(epoch - 1, span)
        rng = rng_for(seed, "train", "epoch", epoch)
        order = rng.permutation(len(samples))
        for k, batch_range in enumerate(_batched(len(order), schedule.batch_size)):
            idxs = [order[i] for i in batch_range]
            batch = _make_batch(samples, idxs, schedule, rng)
            opt.zero_grad()
            loss, val = _forward_checked(net, batch, max_disparity, epoch,
                                         "train", k)
            backward(loss)
            opt.step(lr)
            ledger.append(LedgerRow(epoch, "train", k, val, lr))
    return opt
