"""Training objective: token cross-entropy plus attention supervision."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateTargetError, ShapeError
from .tensor import Tensor, clamp_min, log, log_softmax, take_last

LOG_FLOOR = 1e-12


@dataclass
class LossBreakdown:
    nmt_loss: float
    supervision_loss: float
    total: float
    alpha: float
    graph: Tensor | None = None  # differentiable total, when built from tensors


def kl_attention_loss(A_s: Tensor, A, row_weights=None, symmetric: bool = False) -> Tensor:
    """KL(A || A_s) averaged over query rows; ``A`` is the (detached) target.

    Zero-probability target entries contribute nothing; ``A_s`` is floored
    at 1e-12 inside the log. ``row_weights`` excludes padded rows.
    With ``symmetric=True`` the result is the mean of both KL directions
    and gradient also reaches ``A`` when it is a Tensor.
    """
    target = A.data if isinstance(A, Tensor) else np.asarray(A, dtype=np.float64)
    if target.shape != A_s.shape:
        raise ShapeError(f"KL shape mismatch: {A_s.shape} vs {target.shape}")
    pos = target > 0
    entropy_term = np.where(pos, target * np.log(np.where(pos, target, 1.0)), 0.0).sum(axis=-1)
    cross = (log(clamp_min(A_s, LOG_FLOOR)) * target).sum(axis=-1)
    per_row = Tensor(entropy_term) - cross
    if symmetric:
        A_t = A if isinstance(A, Tensor) else Tensor(target)
        reverse = (A_s * (log(clamp_min(A_s, LOG_FLOOR)) - log(clamp_min(A_t, LOG_FLOOR)))).sum(axis=-1)
        per_row = (per_row + reverse) * 0.5
    if row_weights is None:
        return per_row.mean()
    w = np.broadcast_to(np.asarray(row_weights, dtype=np.float64), per_row.shape)
    return (per_row * w).sum() * (1.0 / w.sum())


def nmt_loss(logits: Tensor, targets, pad_id: int) -> Tensor:
    """Mean token cross-entropy (nats) over non-pad target positions."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"logits {logits.shape} do not match targets {targets.shape}")
    valid = targets != pad_id
    n = int(valid.sum())
    if n == 0:
        raise DegenerateTargetError("every target position is padding")
    picked = take_last(log_softmax(logits), targets)
    return -(picked * valid.astype(np.float64)).sum() * (1.0 / n)


def combined_loss(nmt, supervision, alpha: float = 0.01) -> LossBreakdown:
    """total = nmt + alpha * supervision."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if isinstance(nmt, Tensor) or isinstance(supervision, Tensor):
        graph = nmt + supervision * alpha if alpha else (nmt if isinstance(nmt, Tensor) else Tensor(nmt))
        n = nmt.item() if isinstance(nmt, Tensor) else float(nmt)
        s = supervision.item() if isinstance(supervision, Tensor) else float(supervision)
        return LossBreakdown(n, s, graph.item(), alpha, graph)
    n, s = float(nmt), float(supervision)
    return LossBreakdown(n, s, n + alpha * s, alpha)
