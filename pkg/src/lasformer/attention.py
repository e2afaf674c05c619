"""Full attention, low-dimensional selection attention and top-k masking.

Shapes follow the ``[..., N_q, N_k]`` convention: leading axes are batch
(and, for the main attention, heads). A selection mask has no head axis;
it is shared by every head of the attention it gates.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import IO

import numpy as np

from . import kernels
from .errors import DegenerateRowError, ShapeError
from .tensor import SENTINEL, Tensor, matmul, record_ops, softmax_rows, swap_last

KINDS = ("encoder-self", "cross", "decoder-self")


@dataclass
class SelectionLayer:
    """Projections from model width ``d`` down to the selection width ``d_s``."""

    w_q: Tensor
    w_k: Tensor

    def __post_init__(self) -> None:
        if self.w_q.ndim != 2 or self.w_q.shape != self.w_k.shape:
            raise ShapeError(f"selection weights must share a [d, d_s] shape, got {self.w_q.shape} and {self.w_k.shape}")
        if self.d_s > self.d:
            raise ShapeError(f"selection width {self.d_s} exceeds model width {self.d}")

    @property
    def d(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_s(self) -> int:
        return self.w_q.shape[1]

    @classmethod
    def init(cls, d: int, d_s: int, rng: np.random.Generator) -> SelectionLayer:
        std = 1.0 / math.sqrt(d)
        return cls(
            Tensor(rng.normal(0.0, std, (d, d_s)), requires_grad=True),
            Tensor(rng.normal(0.0, std, (d, d_s)), requires_grad=True),
        )


@dataclass
class AttentionRecord:
    """One attention site's matrices, captured for supervision, reports and export."""

    kind: str
    layer_index: int
    full_attention: np.ndarray
    selection_attention: np.ndarray | None
    mask: np.ndarray

    @property
    def rows(self) -> int:
        return self.mask.shape[-2]

    @property
    def cols(self) -> int:
        return self.mask.shape[-1]

    def to_dict(self) -> dict:
        sel = self.selection_attention
        return {
            "kind": self.kind,
            "layer_index": int(self.layer_index),
            "rows": self.rows,
            "cols": self.cols,
            "full_attention": np.asarray(self.full_attention).tolist(),
            "selection_attention": None if sel is None else np.asarray(sel).tolist(),
            "mask": np.asarray(self.mask, dtype=int).tolist(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> AttentionRecord:
        sel = obj.get("selection_attention")
        return cls(
            kind=obj["kind"],
            layer_index=int(obj["layer_index"]),
            full_attention=np.asarray(obj["full_attention"], dtype=np.float64),
            selection_attention=None if sel is None else np.asarray(sel, dtype=np.float64),
            mask=np.asarray(obj["mask"], dtype=bool),
        )


def dump_records(records: list[AttentionRecord], fp: IO[str]) -> None:
    json.dump([r.to_dict() for r in records], fp)


def load_records(fp: IO[str]) -> list[AttentionRecord]:
    return [AttentionRecord.from_dict(o) for o in json.load(fp)]


# ----------------------------------------------------------------------------
# structural masks


def structural_mask(q_valid: np.ndarray, k_valid: np.ndarray, causal: bool) -> np.ndarray:
    """Admissibility ``[B, N_q, N_k]`` from per-position validity flags.

    Padded keys are never admissible. Padded query rows keep their key
    admissibility so every row stays well defined; their outputs are
    ignored downstream.
    """
    adm = np.broadcast_to(k_valid[:, None, :], (k_valid.shape[0], q_valid.shape[1], k_valid.shape[1]))
    if causal:
        n_q, n_k = q_valid.shape[1], k_valid.shape[1]
        adm = adm & np.tri(n_q, n_k, dtype=bool)
    return np.ascontiguousarray(adm)


def additive(mask: np.ndarray) -> np.ndarray:
    return np.where(mask, 0.0, SENTINEL)


def _expand_heads(mask: np.ndarray, ndim: int) -> np.ndarray:
    """Insert a head axis so a ``[B, Nq, Nk]`` mask broadcasts over ``[B, H, Nq, Nk]``."""
    return mask[..., None, :, :] if mask.ndim == ndim - 1 else mask


# ----------------------------------------------------------------------------
# attention operations


def full_attention(Q: Tensor, K: Tensor, V: Tensor, structural=None) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention; returns (output, weights)."""
    if Q.shape[-1] != K.shape[-1]:
        raise ShapeError(f"query/key width mismatch: {Q.shape} vs {K.shape}")
    scale = 1.0 / math.sqrt(Q.shape[-1])
    logits = matmul(Q, swap_last(K), "attn.logits") * scale
    add = None if structural is None else additive(_expand_heads(np.asarray(structural, bool), logits.ndim))
    weights = softmax_rows(logits, add)
    return matmul(weights, V, "attn.weighted_sum"), weights


def selection_scores(X_q: Tensor, X_k: Tensor, layer: SelectionLayer, structural=None) -> Tensor:
    """Row-stochastic lightweight attention computed at width ``d_s``."""
    if X_q.shape[-1] != layer.d or X_k.shape[-1] != layer.d:
        raise ShapeError(f"inputs of width {X_q.shape[-1]}/{X_k.shape[-1]} do not fit selection layer {layer.w_q.shape}")
    q_s = matmul(X_q, layer.w_q, "select.proj")
    k_s = matmul(X_k, layer.w_k, "select.proj")
    logits = matmul(q_s, swap_last(k_s), "select.logits") * (1.0 / math.sqrt(layer.d_s))
    return softmax_rows(logits, None if structural is None else additive(np.asarray(structural, bool)))


def kept_counts(n_admissible, k_ratio: float, min_tokens: int) -> np.ndarray:
    """clamp(ceil(k * n), min(min_tokens, n), n) per row."""
    if not 0.0 < k_ratio <= 1.0:
        raise ValueError(f"k_ratio must lie in (0, 1], got {k_ratio}")
    n = np.asarray(n_admissible, dtype=np.int64)
    # the epsilon keeps e.g. 0.07 * 100 from rounding up to 8
    raw = np.ceil(k_ratio * n - 1e-9).astype(np.int64)
    return np.clip(raw, np.minimum(min_tokens, n), n)


def topk_mask(A_s, k_ratio: float, min_tokens: int, structural=None, backend: str | None = None) -> np.ndarray:
    """Binary mask keeping the highest selection scores of every row."""
    scores = A_s.data if isinstance(A_s, Tensor) else np.asarray(A_s, dtype=np.float64)
    adm = np.ones(scores.shape, bool) if structural is None else np.broadcast_to(np.asarray(structural, bool), scores.shape)
    kept = kept_counts(adm.sum(axis=-1), k_ratio, min_tokens)
    n_k = scores.shape[-1]
    mask = kernels.topk_rows(scores.reshape(-1, n_k), adm.reshape(-1, n_k), kept.reshape(-1), backend=backend)
    return mask.reshape(scores.shape)


def straight_through(mask: np.ndarray, A_s: Tensor, anchor: np.ndarray | None = None) -> Tensor:
    """``mask + A_s - stop_gradient(A_s)``: the hard mask forward, identity gradient into ``A_s``.

    ``anchor`` is the value the stop-gradient copy is frozen at; by default
    it is ``A_s`` itself, so the forward value equals the mask exactly.
    Passing the unperturbed scores as ``anchor`` turns the surrogate into
    an ordinary function of ``A_s`` for finite-difference checks.
    """
    mask = np.asarray(mask)
    if mask.shape != A_s.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match selection scores {A_s.shape}")
    anchor = A_s.data if anchor is None else np.asarray(anchor, dtype=np.float64)
    value = mask.astype(np.float64) + (A_s.data - anchor)
    return Tensor.from_op(value, (A_s,), lambda g: (g,))


def mask_gate(soft_mask) -> Tensor:
    """Additive logit gate ``log(mask)``: 0 on kept positions, SENTINEL elsewhere.

    Kept entries of a straight-through mask hold exactly 1, so the gate is
    exactly 0 there and its derivative is 1. Dropped entries get zero
    softmax weight, so no gradient reaches them.
    """
    if not isinstance(soft_mask, Tensor):
        return Tensor(additive(np.asarray(soft_mask) > 0.5))
    keep = soft_mask.data > 0.5
    safe = np.where(keep, soft_mask.data, 1.0)
    value = np.where(keep, np.log(safe), SENTINEL)
    return Tensor.from_op(value, (soft_mask,), lambda g: (np.where(keep, g / safe, 0.0),))


def _check_nonempty(mask: np.ndarray) -> None:
    if not np.all(mask.any(axis=-1)):
        raise DegenerateRowError("selective attention row with no kept position")


def selective_attention(
    Q: Tensor,
    K: Tensor,
    V: Tensor,
    mask,
    mode: str = "train",
    soft_mask: Tensor | None = None,
    backend: str | None = None,
    logits: Tensor | None = None,
) -> tuple[Tensor, np.ndarray | Tensor]:
    """Attention restricted to the kept positions of ``mask``.

    ``train`` computes every logit and gates dropped ones before the
    softmax (``soft_mask``, when given, carries the straight-through
    gradient). ``infer`` gathers only kept keys through the sparse kernel;
    it builds no autodiff graph. ``logits`` reuses already computed
    scaled scores in train mode.
    """
    hard = np.asarray(mask.data if isinstance(mask, Tensor) else mask) > 0.5
    _check_nonempty(hard)
    if mode == "train":
        if logits is None:
            logits = matmul(Q, swap_last(K), "attn.logits") * (1.0 / math.sqrt(Q.shape[-1]))
        gate = mask_gate(soft_mask if soft_mask is not None else hard)
        if gate.ndim == logits.ndim - 1:
            gate = gate.reshape(gate.shape[:-2] + (1,) + gate.shape[-2:])
        weights = softmax_rows(logits + gate)
        return matmul(weights, V, "attn.weighted_sum"), weights
    if mode != "infer":
        raise ValueError(f"unknown attention mode {mode!r}")

    q, k, v = (t.data if isinstance(t, Tensor) else np.asarray(t) for t in (Q, K, V))
    n_q, dh = q.shape[-2:]
    n_k, dv = v.shape[-2:]
    if hard.ndim == q.ndim:
        heads = 1
    elif hard.ndim == q.ndim - 1:
        heads = q.shape[-3]
    else:
        raise ShapeError(f"mask shape {hard.shape} does not fit query shape {q.shape}")
    lead = q.shape[:-2]
    out, weights, kept_total = kernels.sparse_attention(
        q.reshape(-1, n_q, dh),
        np.broadcast_to(k, lead + (n_k, dh)).reshape(-1, n_k, dh),
        np.broadcast_to(v, lead + (n_k, dv)).reshape(-1, n_k, dv),
        hard.reshape(-1, n_q, n_k),
        heads,
        backend=backend,
    )
    record_ops("attn.logits", kept_total * dh)
    record_ops("attn.weighted_sum", kept_total * dv)
    return Tensor(out.reshape(lead + (n_q, dv))), weights.reshape(lead + (n_q, n_k))


def fixed_window_mask(n_q: int, n_k: int, window_length: int, kind: str) -> np.ndarray:
    """Keep keys within ``window_length / 2`` of the query's centre.

    Cross attention centres query ``i`` at ``i * (n_k - 1) / (n_q - 1)``
    (rounded); self attention centres it on itself. Decoder self
    attention additionally drops future keys.
    """
    if window_length < 1:
        raise ValueError("window_length must be >= 1")
    if kind not in KINDS:
        raise ValueError(f"unknown attention kind {kind!r}")
    i = np.arange(n_q)
    if kind == "cross":
        centre = np.rint(i * (n_k - 1) / max(n_q - 1, 1)) if n_q > 1 else np.zeros(n_q)
    else:
        centre = i
    j = np.arange(n_k)
    mask = np.abs(centre[:, None] - j[None, :]) <= window_length / 2
    if kind == "decoder-self":
        mask &= j[None, :] <= i[:, None]
    return mask
