"""Optimizer, learning-rate plateau rule, and the patch training loop.

Each batch element runs its own forward/backward pass; per-element losses
are scaled by 1/batch so leaf gradients accumulate to the batch mean
before one optimizer step. The masked objective re-solves the block
transport problem per patch per step from the current logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .loss import LossBreakdown, compute_losses, plain_ce_loss, prepare_supervision
from .model import SegmentationNet
from .tensor import NumericError, Tensor, backward, tensor

__all__ = ["AdamW", "PlateauSchedule", "TrainSettings", "train", "predict_logits"]


class AdamW:
    """Decoupled weight decay Adam (decay skipped for biases and norm affines)."""

    def __init__(self, params: list[tuple[str, Tensor]], lr: float = 0.01,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {n: np.zeros_like(p.data, dtype=np.float64) for n, p in params}
        self._v = {n: np.zeros_like(p.data, dtype=np.float64) for n, p in params}

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()

    @staticmethod
    def _decays(name: str) -> bool:
        return not (name.endswith(".bias") or name.endswith(".gamma")
                    or name.endswith(".beta"))

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and self._decays(name):
                update = update + self.weight_decay * p.data.astype(np.float64)
            p.data[...] = (p.data.astype(np.float64) - self.lr * update).astype(p.data.dtype)


class PlateauSchedule:
    """Cut the learning rate to ``factor`` of its value when the best epoch
    loss has not improved for ``patience`` consecutive epochs."""

    def __init__(self, optimizer: AdamW, patience: int = 8, factor: float = 0.1):
        self.optimizer = optimizer
        self.patience = patience
        self.factor = factor
        self.best = np.inf
        self.stale = 0

    def update(self, epoch_loss: float) -> bool:
        if epoch_loss < self.best:
            self.best = epoch_loss
            self.stale = 0
            return False
        self.stale += 1
        if self.stale >= self.patience:
            self.optimizer.lr *= self.factor
            self.stale = 0
            return True
        return False


@dataclass
class TrainSettings:
    lr: float = 0.01
    weight_decay: float = 0.01
    batch: int = 4
    epochs: int = 10
    patience: int = 8
    factor: float = 0.1
    loss: str = "masked"     # masked | ce
    seed: int = 0


@dataclass
class TrainResult:
    epoch_losses: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_state: dict | None = None
    steps: int = 0


def _patch_loss(net: SegmentationNet, image: np.ndarray, labels: np.ndarray,
                mode: str) -> LossBreakdown:
    x = tensor(image, net.config.dtype)
    art = net(x)
    if mode == "ce":
        ca = plain_ce_loss(art.logits, labels)
        zero = Tensor(np.zeros((), dtype=ca.data.dtype))
        return LossBreakdown(ca=ca, va=zero, total=ca, ca_fraction=1.0,
                             sigma=np.zeros(net.config.classes))
    sup = prepare_supervision(art.logits.data, labels)
    return compute_losses(art.logits, art.fused_level1, labels, sup)


def train(net: SegmentationNet, patches: list[tuple[np.ndarray, np.ndarray]],
          settings: TrainSettings, log=None) -> TrainResult:
    """Minimize the configured objective over (image, labels) patches.

    Raises NumericError with a step dump if the loss goes non-finite.
    """
    opt = AdamW(net.parameters(), lr=settings.lr, weight_decay=settings.weight_decay)
    sched = PlateauSchedule(opt, settings.patience, settings.factor)
    order_rng = np.random.default_rng(settings.seed)
    result = TrainResult()

    for epoch in range(settings.epochs):
        order = order_rng.permutation(len(patches))
        step_losses = []
        for start in range(0, len(order), settings.batch):
            batch = order[start:start + settings.batch]
            opt.zero_grad()
            records = []
            for idx in batch:
                image, labels = patches[idx]
                T._reset_tape()
                lb = _patch_loss(net, image, labels, settings.loss)
                if not np.isfinite(lb.total.data).all():
                    raise NumericError(
                        f"non-finite loss at epoch {epoch} step {result.steps}: "
                        f"ca={lb.ca.item()} va={lb.va.item()} lr={opt.lr}")
                backward(T.mul(lb.total, 1.0 / len(batch)))
                records.append(lb.record())
            opt.step()
            mean_loss = float(np.mean([r["loss"] for r in records]))
            step_losses.append(mean_loss)
            if log is not None:
                log({"event": "step", "epoch": epoch, "step": result.steps,
                     "lr": opt.lr, "loss": mean_loss,
                     "loss_ca": float(np.mean([r["loss_ca"] for r in records])),
                     "loss_va": float(np.mean([r["loss_va"] for r in records])),
                     "ca_fraction": float(np.mean([r["ca_fraction"] for r in records]))})
            result.steps += 1

        epoch_loss = float(np.mean(step_losses))
        result.epoch_losses.append(epoch_loss)
        if epoch_loss <= min(result.epoch_losses):
            result.best_epoch = epoch
            result.best_state = {n: d.reshape(-1).copy() for n, d in net.state()}
        reduced = sched.update(epoch_loss)
        if log is not None:
            log({"event": "epoch", "epoch": epoch, "loss": epoch_loss,
                 "lr": opt.lr, "lr_reduced": reduced})
    return result


def predict_logits(net: SegmentationNet, image: np.ndarray) -> np.ndarray:
    with T.no_grad():
        return net(tensor(image, net.config.dtype)).logits.data
