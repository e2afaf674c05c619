"""Decoding-based accuracy metrics and far-binding recall probes."""
from __future__ import annotations

import numpy as np

from .data import PAD, QUERY, Pair, binding_distance, make_batch
from .model import Seq2Seq


def token_accuracy(predictions: list[list[int]], targets: list[list[int]]) -> tuple[float, float]:
    """(token accuracy, exact-sequence accuracy).

    Tokens are compared position by position against the target; missing
    predicted positions count as errors, surplus ones are ignored.
    """
    hits = total = exact = 0
    for pred, tgt in zip(predictions, targets):
        total += len(tgt)
        hits += sum(1 for i, t in enumerate(tgt) if i < len(pred) and pred[i] == t)
        exact += pred == tgt
    n = max(len(targets), 1)
    return hits / max(total, 1), exact / n


def decode_dataset(model: Seq2Seq, pairs: list[Pair], batch_size: int = 32, mode: str = "infer") -> list[list[int]]:
    preds: list[list[int]] = []
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i : i + batch_size]
        steps = max(len(t) for _, t in chunk)
        preds += model.greedy_decode(make_batch(chunk).src, steps, mode=mode)
    return preds


def evaluate(model: Seq2Seq, pairs: list[Pair], batch_size: int = 32, mode: str = "infer") -> dict:
    preds = decode_dataset(model, pairs, batch_size, mode)
    tok, seq = token_accuracy(preds, [t for _, t in pairs])
    return {"token_accuracy": tok, "sequence_accuracy": seq, "n": len(pairs)}


def window_reach(n_layers: int, window_length: int) -> float:
    """How far (in source positions) information can travel into a cross-window centre.

    Each fixed-window encoder layer widens the receptive field by half a
    window; the cross window adds one more half window.
    """
    return (n_layers + 1) * window_length / 2


def is_far_binding(src: list[int], tgt_len: int, n_layers: int, window_length: int) -> bool:
    """True when the queried value lies outside the fixed-window receptive field
    of the decoder row that emits it (row 1 of a ``[key, value]`` target)."""
    marker = len(src) - 1 - src[::-1].index(QUERY)
    value_pos = marker - binding_distance(src) + 1
    n_k = len(src) + 1  # EOS
    n_q = tgt_len + 1  # BOS + target
    centre = round(1 * (n_k - 1) / max(n_q - 1, 1))
    return abs(value_pos - centre) > window_reach(n_layers, window_length)


def value_recall(model: Seq2Seq, pairs: list[Pair], batch_size: int = 32) -> np.ndarray:
    """Per-example hit of the teacher-forced value prediction (target position 1).

    The decoder is given the true queried key, so a miss isolates the
    failure to retrieve the bound value from the source.
    """
    hits = []
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i : i + batch_size]
        b = make_batch(chunk, PAD)
        logits = model.forward(b.src, b.tgt_in, "infer").logits.data
        hits += list(logits[:, 1].argmax(axis=-1) == b.tgt_out[:, 1])
    return np.asarray(hits, dtype=bool)
