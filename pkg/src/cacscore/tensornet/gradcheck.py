"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np


def relative_error(analytic, numeric, floor: float = 1e-8, atol: float = 1e-10):
    """``|a - n| / max(|a|, |n|, floor)``, or 0 where ``|a - n| <= atol``.

    The absolute cut-off covers gradients that are exactly zero (a bias
    feeding batch norm) where the difference quotient is pure roundoff.
    """
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    diff = np.abs(analytic - numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.where(diff <= atol, 0.0, diff / denom)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, index, h: float = 1e-5) -> float:
    """Central difference of ``f`` with respect to ``arr[index]`` (mutated and restored)."""
    old = arr[index]
    arr[index] = old + h
    fp = f()
    arr[index] = old - h
    fm = f()
    arr[index] = old
    return (fp - fm) / (2 * h)


def squared_loss(out, target):
    diff = out - target
    return 0.5 * float(np.sum(diff * diff)), diff


def finite_diff_check(model, x, extra=None, target=None, n_params: int = 200, h: float = 1e-5,
                      seed: int = 0, loss=squared_loss, freeze_pooling: bool = True,
                      return_details: bool = False):
    """Compare backprop against central differences on sampled parameters.

    The model runs in train mode without touching its running statistics,
    so every evaluation sees the same batch-norm batch. At least
    ``n_params`` scalar parameters are drawn across all tensors (every
    tensor contributes at least one). Returns the maximum relative error
    from ``relative_error``.

    With ``freeze_pooling`` the perturbed passes reuse the max-pool routing
    of the unperturbed pass. Backprop differentiates that routing, and a
    +-h probe that flips an argmax somewhere in a deep net would otherwise
    straddle a kink.
    """
    rng = np.random.default_rng(seed)
    if target is None:
        probe = model.forward(x, extra, train=True, update_stats=False, keep_cache=False)
        target = rng.normal(size=probe.shape)

    out = model.forward(x, extra, train=True, update_stats=False)
    _, dout = loss(out, target)
    grads, _ = model.backward(dout)
    switches = model.last_pool_switches() if freeze_pooling else None

    def f():
        out = model.forward(x, extra, train=True, update_stats=False, keep_cache=False,
                            pool_switches=switches)
        return loss(out, target)[0]

    names = list(model.params)
    sizes = np.array([model.params[k].size for k in names])
    picks = [(k, int(rng.integers(model.params[k].size))) for k in names]
    extra_n = max(0, n_params - len(picks))
    flat = rng.choice(sizes.sum(), size=min(extra_n, sizes.sum()), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    for f_idx in flat:
        t = int(np.searchsorted(offsets, f_idx, side="right") - 1)
        picks.append((names[t], int(f_idx - offsets[t])))

    details = []
    for name, flat_i in picks:
        p = model.params[name]
        idx = np.unravel_index(flat_i, p.shape)
        n = numeric_grad(f, p, idx, h)
        a = grads[name][idx]
        details.append((name, idx, a, n, float(relative_error(a, n))))
    worst = max(d[-1] for d in details)
    return (worst, details) if return_details else worst
