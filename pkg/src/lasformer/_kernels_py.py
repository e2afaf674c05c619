"""Pure numpy implementations of the hot kernels.

Used when the compiled extension is unavailable or explicitly disabled.
Signatures mirror ``_kernels.pyx`` exactly.
"""
import numpy as np

from .errors import DegenerateRowError


def topk_rows(scores, admissible, kept):
    """Keep the ``kept[r]`` highest-scoring admissible entries of each row.

    Ties go to the lowest column index. Returns a uint8 mask.
    """
    rows, cols = scores.shape
    if rows == 0:
        return np.zeros((rows, cols), dtype=np.uint8)
    adm = admissible.astype(bool)
    key = np.where(adm, -scores, np.inf)
    order = np.argsort(key, axis=-1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.broadcast_to(np.arange(cols), (rows, cols)), axis=-1)
    return ((rank < kept[:, None]) & adm).astype(np.uint8)


def sparse_attention(q, k, v, mask, heads):
    """Attention restricted to the kept positions of ``mask``.

    q: [R, Nq, dh]; k: [R, Nk, dh]; v: [R, Nk, dv]; mask: [R // heads, Nq, Nk].
    Row ``r`` of q/k/v uses mask ``r // heads``. Only kept keys are gathered
    and scored. Returns (output [R, Nq, dv], weights [R, Nq, Nk], kept_total).
    """
    n_rows, n_q, dh = q.shape
    n_k = k.shape[1]
    keep = mask.astype(bool)
    counts = keep.sum(axis=-1)
    if np.any(counts == 0):
        raise DegenerateRowError("sparse attention row with no kept position")
    width = int(counts.max()) if counts.size else 0
    # kept columns first, in increasing index order
    idx = np.argsort(~keep, axis=-1, kind="stable")[..., :width]
    valid = np.arange(width) < counts[..., None]
    idx = np.repeat(idx, heads, axis=0)
    valid = np.repeat(valid, heads, axis=0)

    r = np.arange(n_rows)[:, None, None]
    k_g = k[r, idx]
    v_g = v[r, idx]
    logits = np.einsum("rqd,rqmd->rqm", q, k_g) * (1.0 / np.sqrt(dh))
    logits = np.where(valid, logits, -np.inf)
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    w = e / e.sum(axis=-1, keepdims=True)
    out = np.einsum("rqm,rqmd->rqd", w, v_g)

    weights = np.zeros((n_rows, n_q, n_k))
    np.put_along_axis(weights, idx, w, axis=-1)
    return out, weights, int(counts.sum()) * heads
