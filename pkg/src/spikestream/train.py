"""Training: dual-head cross entropy, momentum SGD, learning-rate schedules.

The loss is the sum of a softmax cross entropy on each active head, so a
dual forward optimizes CE(spike head) + CE(accumulation head) and a
spike-only forward just the former.  The accumulation term is what carries
clean gradients to deep blocks; ``aap_loss=False`` switches it off while
leaving the forward untouched, which is the ablation the probes compare
against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .network import DualLogits, Network
from .numerics import GradTape, Gradients, Tensor, add, backward

__all__ = [
    "TrainConfig",
    "softmax_cross_entropy",
    "dual_loss",
    "SGD",
    "cosine_lr",
    "step_lr",
    "schedule_lr",
    "train",
    "evaluate",
]

_f32 = np.float32


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, tape: GradTape | None = None) -> Tensor:
    """Mean cross entropy of row-wise softmax against integer labels."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels must be ({n},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels out of range for {c} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    loss = Tensor(np.asarray(-np.mean(np.log(probs[rows, labels] + 1e-12)), dtype=_f32))
    if tape is not None:

        def vjp(g: np.ndarray):
            d = probs.astype(_f32).copy()
            d[rows, labels] -= 1.0
            return [(logits, d * (g / _f32(n)))]

        tape.record(loss, vjp)
    return loss


def dual_loss(
    out: DualLogits,
    labels: np.ndarray,
    tape: GradTape | None = None,
    aap_loss: bool = True,
) -> tuple[Tensor, float, float | None]:
    """Total loss plus the per-head values it was built from."""
    ce_s = softmax_cross_entropy(out.logits_s, labels, tape)
    if out.logits_a is not None and aap_loss:
        ce_a = softmax_cross_entropy(out.logits_a, labels, tape)
        return add(ce_s, ce_a, tape), float(ce_s.item()), float(ce_a.item())
    return ce_s, float(ce_s.item()), None


class SGD:
    """Momentum SGD: v <- mu*v + g, theta <- theta - lr*v."""

    def __init__(self, params: dict[str, Tensor], momentum: float = 0.9) -> None:
        if not (0.0 <= momentum < 1.0):
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        self.params = params
        self.momentum = _f32(momentum)
        self.velocity = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self, grads: Gradients, lr: float) -> None:
        lr = _f32(lr)
        for k, t in self.params.items():
            v = self.velocity[k]
            v *= self.momentum
            v += grads[t]
            t.data -= lr * v


def cosine_lr(base: float, epoch: int, total_epochs: int) -> float:
    """Half-cosine decay from base at epoch 0 toward 0 at total_epochs."""
    if total_epochs <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * min(epoch, total_epochs) / total_epochs))


def step_lr(base: float, epoch: int, every: int, gamma: float) -> float:
    return base * gamma ** (epoch // every)


def schedule_lr(cfg: "TrainConfig", epoch: int) -> float:
    if cfg.schedule == "cosine":
        return cosine_lr(cfg.lr, epoch, cfg.epochs)
    if cfg.schedule == "step":
        return step_lr(cfg.lr, epoch, cfg.step_every, cfg.step_gamma)
    return cfg.lr


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.1
    momentum: float = 0.9
    schedule: str = "cosine"
    step_every: int = 10
    step_gamma: float = 0.1
    aap_loss: bool = True
    mode: str = "dsnn"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.schedule not in ("cosine", "step", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.mode not in ("fsnn", "dsnn"):
            raise ValueError(f"mode must be 'fsnn' or 'dsnn', got {self.mode!r}")


def train(net: Network, dataset, cfg: TrainConfig, eval_set=None) -> list[dict]:
    """Optimize in place; returns one JSON-ready record per epoch."""
    if net.fused:
        raise ValueError("fused networks are inference-only and cannot be trained")
    opt = SGD(net.parameters(), cfg.momentum)
    history: list[dict] = []
    for epoch in range(cfg.epochs):
        lr = schedule_lr(cfg, epoch)
        seen = 0
        loss_s_sum = 0.0
        loss_a_sum = 0.0
        hits = {"s": 0, "a": 0, "combined": 0}
        for x, y in dataset.batches(cfg.batch_size, shuffle=True, seed=cfg.seed * 100003 + epoch):
            tape = GradTape()
            out = net.forward(x, mode=cfg.mode, tape=tape, training=True)
            total, ls, la = dual_loss(out, y, tape, aap_loss=cfg.aap_loss)
            grads = backward(tape, Tensor(np.ones((), dtype=_f32)), output=total)
            opt.step(grads, lr)
            b = y.shape[0]
            seen += b
            loss_s_sum += ls * b
            if la is not None:
                loss_a_sum += la * b
            hits["s"] += int((out.logits_s.data.argmax(axis=1) == y).sum())
            if out.logits_a is not None:
                hits["a"] += int((out.logits_a.data.argmax(axis=1) == y).sum())
                hits["combined"] += int((out.predictions("sum") == y).sum())
            else:
                hits["combined"] += int((out.logits_s.data.argmax(axis=1) == y).sum())
        record = {
            "epoch": epoch,
            "lr": lr,
            "loss_s": loss_s_sum / seen,
            "loss_a": loss_a_sum / seen if cfg.mode == "dsnn" and cfg.aap_loss else None,
            "acc_s": hits["s"] / seen,
            "acc_a": hits["a"] / seen if cfg.mode == "dsnn" else None,
            "acc_combined": hits["combined"] / seen,
        }
        if eval_set is not None:
            record["eval_acc"] = evaluate(net, eval_set, mode=cfg.mode)["accuracy"]
        history.append(record)
    return history


def evaluate(
    net: Network,
    dataset,
    mode: str = "dsnn",
    head_mode: str | None = None,
    batch_size: int = 64,
) -> dict:
    """Accuracy over a dataset without touching weights or running stats."""
    if head_mode is None:
        head_mode = "s_only" if mode == "fsnn" else net.config.head_mode
    correct = 0
    loss_sum = 0.0
    seen = 0
    for x, y in dataset.batches(batch_size):
        out = net.forward(x, mode=mode, training=False)
        correct += int((out.predictions(head_mode) == y).sum())
        loss_sum += float(softmax_cross_entropy(out.logits_s, y).item()) * y.shape[0]
        seen += y.shape[0]
    return {
        "accuracy": correct / seen,
        "loss_s": loss_sum / seen,
        "n_samples": seen,
        "head_mode": head_mode,
    }
