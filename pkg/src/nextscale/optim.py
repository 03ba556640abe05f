"""AdamW with decoupled weight decay, plus a finite-difference gradient check."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autograd import Tape, Tensor, backward, zero_grad
from .errors import ContractError, NumericError


@dataclass
class AdamWState:
    """First/second moment buffers plus hyperparameters and step counter.

    Defaults follow the training recipe used throughout the package:
    betas (0.9, 0.97), lr 6e-3.
    """

    lr: float = 6e-3
    beta1: float = 0.9
    beta2: float = 0.97
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray] | None = None,
    state: AdamWState | None = None,
    masks: Sequence[np.ndarray | None] | None = None,
) -> None:
    """One decoupled-weight-decay Adam update, in place.

    ``grads`` defaults to each parameter's accumulated ``.grad``.  All
    gradients are validated finite before any state or parameter is touched,
    so a NaN aborts the step atomically.  ``masks`` optionally restricts the
    update elementwise: entries where the mask is False are left bit-for-bit
    untouched (weight decay included).
    """
    if state is None:
        raise ContractError("an AdamWState is required")
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params):
        raise ContractError("one gradient per parameter required")
    if masks is not None and len(masks) != len(params):
        raise ContractError("one mask per parameter required")
    gs: list[np.ndarray] = []
    for p, g in zip(params, grads):
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ContractError("gradient shape mismatch")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")
        gs.append(g)

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, gs)):
        key = id(p)
        m = state.m.get(key)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[key]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[key] = m
        state.v[key] = v
        step = state.lr * (
            (m / bc1) / (np.sqrt(v / bc2) + state.eps)
            + state.weight_decay * p.data
        )
        mask = masks[i] if masks is not None else None
        if mask is None:
            np.subtract(p.data, step, out=p.data)
        else:
            np.subtract(p.data, step, out=p.data, where=mask)


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    coords_per_param: int = 8,
    seed: int = 0,
) -> float:
    """Max relative error between taped gradients and central differences.

    ``loss_fn`` must be a deterministic closure over ``params`` returning a
    scalar tensor.  For each parameter a fixed random subset of coordinates
    (all of them when the tensor is small) is probed with a +/- h central
    difference.  Relative error is |a - d| / max(|a|, |d|, 1e-8).
    """
    zero_grad(params)
    with Tape() as tape:
        loss = loss_fn()
    backward(loss, tape)
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
        for p in params
    ]
    zero_grad(params)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        coords = (
            np.arange(n)
            if n <= coords_per_param
            else rng.choice(n, size=coords_per_param, replace=False)
        )
        for c in coords:
            keep = flat[c]
            flat[c] = keep + h
            hi = loss_fn().item()
            flat[c] = keep - h
            lo = loss_fn().item()
            flat[c] = keep  # exact bitwise restore
            diff = (hi - lo) / (2.0 * h)
            ana = a.reshape(-1)[c]
            err = abs(ana - diff) / max(abs(ana), abs(diff), 1e-8)
            worst = max(worst, err)
    return worst
