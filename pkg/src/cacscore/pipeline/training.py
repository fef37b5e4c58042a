"""Mini-batch training loop shared by the regressor and the slice classifiers."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..tensornet.layers import NonFiniteError, sigmoid
from ..tensornet.network import ConvNet
from ..tensornet.optim import AdamState, adam_update

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


def l1_loss(pred, target):
    diff = pred - target
    return float(np.mean(np.abs(diff))), np.sign(diff) * diff.dtype.type(1.0 / diff.size)


def bce_logits_loss(logits, target):
    p = sigmoid(logits)
    eps = 1e-12
    loss = -np.mean(target * np.log(p + eps) + (1 - target) * np.log(1 - p + eps))
    return float(loss), (p - target) * p.dtype.type(1.0 / logits.size)


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), 0xE90C, int(epoch)]))


def batches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled index batches; a trailing batch of one is dropped (batch norm)."""
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        idx = order[s : s + batch_size]
        if len(idx) >= 2:
            yield idx


@dataclass
class FitResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_state: dict | None = None
    best_optimizer: AdamState | None = None


def train_network(net: ConvNet, x, extra, y, *, epochs: int, batch_size: int, optimizer: AdamState,
                  seed: int, loss: Callable = l1_loss, validate: Callable[[ConvNet], float] | None = None,
                  on_epoch: Callable[[dict], None] | None = None) -> FitResult:
    """Train ``net`` in place and keep the state with the lowest validation error.

    ``validate`` returns the validation error of the current network (ties
    go to the earlier epoch); without it the last epoch is kept.
    """
    if epochs < 1:
        raise ValueError("epochs must be at least 1")
    if batch_size < 2:
        raise ValueError("batch size must be at least 2 for batch normalisation")
    x = np.asarray(x, dtype=net.dtype)
    extra = None if extra is None else np.asarray(extra, dtype=net.dtype)
    y = np.asarray(y, dtype=net.dtype).reshape(len(y), -1)
    result = FitResult()
    best = np.inf
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        total, count = 0.0, 0
        for b, idx in enumerate(batches(len(x), batch_size, epoch_rng(seed, epoch))):
            e = None if extra is None else extra[idx]
            out = net.forward(x[idx], e, train=True)
            value, dout = loss(out, y[idx])
            if not np.isfinite(value):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads, _ = net.backward(dout)
            adam_update(net.params, grads, optimizer)
            total += value * len(idx)
            count += len(idx)
        train_err = total / max(count, 1)
        val_err = float(validate(net)) if validate is not None else float("nan")
        row = {"epoch": epoch, "train_mae": train_err, "val_mae": val_err,
               "wall_seconds": time.perf_counter() - t0}
        result.history.append(row)
        if on_epoch is not None:
            on_epoch(row)
        log.debug("epoch %d train %.5f val %.5f", epoch, train_err, val_err)
        score = val_err if validate is not None else -epoch
        if score < best:
            best = score
            result.best_epoch = epoch
            result.best_state = net.copy_state()
            result.best_optimizer = optimizer.copy()
    net.load_state(result.best_state)
    return result
