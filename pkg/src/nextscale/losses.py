"""Classification losses as taped primitives with closed-form pullbacks.

Both losses take raw logits and stabilize internally with the log-sum-exp
shift, so callers never exponentiate unnormalized scores themselves.
"""

from __future__ import annotations

import numpy as np

from .autograd import Tensor, _emit, _lift
from .errors import ContractError, NumericError


def _check_logits(logits: Tensor, name: str) -> np.ndarray:
    if logits.ndim != 2:
        raise ContractError(f"{name} must be (rows, classes)")
    if logits.shape[0] < 1 or logits.shape[1] < 1:
        raise ContractError(f"{name} must be non-empty")
    if not np.all(np.isfinite(logits.data)):
        raise NumericError(f"{name} contain non-finite values")
    return logits.data


def log_softmax_array(x: np.ndarray) -> np.ndarray:
    """Stabilized log-softmax over the last axis (plain numpy)."""
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits``.

    logits: (N, V) tensor, targets: (N,) integer array.  Returns a scalar;
    the pullback is (softmax - onehot) / N per row.
    """
    logits = _lift(logits)
    x = _check_logits(logits, "logits")
    t = np.asarray(targets)
    if not np.issubdtype(t.dtype, np.integer):
        raise ContractError("targets must be integers")
    if t.shape != (x.shape[0],):
        raise ContractError("targets must be one index per logits row")
    if t.size and (t.min() < 0 or t.max() >= x.shape[1]):
        raise IndexError("target index out of range")

    n, _ = x.shape
    logp = log_softmax_array(x)
    rows = np.arange(n)
    value = -logp[rows, t].mean()

    def pull(g: np.ndarray) -> np.ndarray:
        soft = np.exp(logp)
        soft[rows, t] -= 1.0
        return (float(g) / n) * soft

    return _emit(np.asarray(value), [(logits, pull)])


def kl_divergence(teacher_logits, student_logits) -> Tensor:
    """Mean per-row KL(softmax(teacher) || softmax(student)).

    The teacher side is treated as a constant: no gradient ever flows into
    ``teacher_logits``.  Equal logits give exactly 0; the value is floored
    at 0 against last-ulp rounding.
    """
    teacher = _lift(teacher_logits)
    student = _lift(student_logits)
    tx = _check_logits(teacher, "teacher logits")
    sx = _check_logits(student, "student logits")
    if tx.shape != sx.shape:
        raise ContractError("teacher and student logits must share a shape")

    n = tx.shape[0]
    logp_t = log_softmax_array(tx)
    logp_s = log_softmax_array(sx)
    p_t = np.exp(logp_t)
    value = max(float((p_t * (logp_t - logp_s)).sum() / n), 0.0)

    def pull(g: np.ndarray) -> np.ndarray:
        return (float(g) / n) * (np.exp(logp_s) - p_t)

    # only the student participates in the graph: the teacher is detached
    return _emit(np.asarray(value), [(student, pull)])
