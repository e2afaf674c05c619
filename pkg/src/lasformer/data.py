"""Deterministic synthetic sequence-to-sequence tasks.

Token ids 0-3 are reserved (pad, begin, end, query marker). ``copy`` and
``reverse`` draw bodies from every other id. ``longrange-recall`` splits
the remaining ids into keys, values and filler: the source holds
``key value`` bindings among filler tokens and ends with
``QUERY key``; the target is ``key value`` for the queried key, whose
binding sits a sampled distance before the query marker.

Dataset pairs hold bare bodies; :func:`batch` adds the framing tokens.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import SpecError

PAD, BOS, EOS, QUERY = 0, 1, 2, 3
N_SPECIAL = 4
TASKS = ("copy", "reverse", "longrange-recall")
SPLITS = ("train", "valid", "test")

Pair = tuple[list[int], list[int]]


@dataclass
class TaskSpec:
    task: str = "copy"
    vocab_size: int = 64
    min_len: int = 16
    max_len: int = 32
    min_distance: int = 16
    max_distance: int = 32
    n_pairs: int = 4
    n_keys: int = 16
    n_values: int = 16
    seed: int = 0
    n_train: int = 2000
    n_valid: int = 200
    n_test: int = 200

    def validate(self) -> None:
        if self.task not in TASKS:
            raise SpecError(f"unknown task {self.task!r}; choose one of {TASKS}")
        if not 1 <= self.min_len <= self.max_len:
            raise SpecError(f"need 1 <= min_len <= max_len, got {self.min_len}, {self.max_len}")
        content = self.vocab_size - N_SPECIAL
        if content < 2:
            raise SpecError(f"vocab_size {self.vocab_size} leaves no content tokens")
        if self.task == "longrange-recall":
            if content < self.n_keys + self.n_values + 1:
                raise SpecError(
                    f"vocab_size {self.vocab_size} too small for {self.n_keys} keys, {self.n_values} values and filler"
                )
            if self.n_pairs > self.n_keys or self.n_pairs < 1:
                raise SpecError("n_pairs must lie in [1, n_keys]")
            if not 2 <= self.min_distance <= self.max_distance:
                raise SpecError("need 2 <= min_distance <= max_distance")
            # query marker + key at the end, binding `distance` before the marker
            if self.max_distance + 2 > self.min_len:
                raise SpecError("min_len must exceed max_distance + 2 for longrange-recall")
            if 2 * self.n_pairs + 2 > self.min_len:
                raise SpecError("min_len too short to hold every binding")

    @property
    def key_tokens(self) -> range:
        return range(N_SPECIAL, N_SPECIAL + self.n_keys)

    @property
    def value_tokens(self) -> range:
        return range(N_SPECIAL + self.n_keys, N_SPECIAL + self.n_keys + self.n_values)

    @property
    def filler_tokens(self) -> range:
        return range(N_SPECIAL + self.n_keys + self.n_values, self.vocab_size)

    def split_size(self, split: str) -> int:
        return {"train": self.n_train, "valid": self.n_valid, "test": self.n_test}[split]


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named random stream."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def _recall_example(spec: TaskSpec, rng: np.random.Generator) -> tuple[Pair, int]:
    length = int(rng.integers(spec.min_len, spec.max_len + 1))
    fillers = np.asarray(spec.filler_tokens)
    body = [int(t) for t in rng.choice(fillers, size=length)]
    marker = length - 2
    distance = int(rng.integers(spec.min_distance, spec.max_distance + 1))
    keys = [int(k) for k in rng.choice(np.asarray(spec.key_tokens), size=spec.n_pairs, replace=False)]
    values = [int(v) for v in rng.choice(np.asarray(spec.value_tokens), size=spec.n_pairs)]
    # slots are the positions of binding keys; values follow at slot + 1
    slots = [marker - distance]
    free = [p for p in range(0, marker - 1) if abs(p - slots[0]) >= 2]
    rng.shuffle(free)
    for p in free:
        if len(slots) == spec.n_pairs:
            break
        if all(abs(p - s) >= 2 for s in slots):
            slots.append(p)
    if len(slots) < spec.n_pairs:
        raise SpecError("could not place every binding; lengthen sequences or reduce n_pairs")
    for key, value, pos in zip(keys, values, slots):
        body[pos], body[pos + 1] = key, value
    body[marker], body[marker + 1] = QUERY, keys[0]
    return (body, [keys[0], values[0]]), distance


def generate_split(spec: TaskSpec, split: str) -> list[Pair]:
    spec.validate()
    rng = stream(spec.seed, f"data/{split}")
    content = np.arange(N_SPECIAL, spec.vocab_size)
    pairs: list[Pair] = []
    for _ in range(spec.split_size(split)):
        if spec.task == "longrange-recall":
            pair, _ = _recall_example(spec, rng)
        else:
            length = int(rng.integers(spec.min_len, spec.max_len + 1))
            src = [int(t) for t in rng.choice(content, size=length)]
            pair = (src, list(src) if spec.task == "copy" else src[::-1])
        pairs.append(pair)
    return pairs


def generate(spec: TaskSpec) -> dict[str, list[Pair]]:
    """All three splits, each from its own seed stream."""
    return {split: generate_split(spec, split) for split in SPLITS}


def recall_oracle(src: list[int]) -> list[int] | None:
    """Rule-based answer for longrange-recall, or None if undetermined."""
    try:
        marker = len(src) - 1 - src[::-1].index(QUERY)
    except ValueError:
        return None
    if marker + 1 >= len(src):
        return None
    key = src[marker + 1]
    for pos in range(marker - 2, -1, -1):
        if src[pos] == key:
            return [key, src[pos + 1]]
    return None


def task_oracle(task: str, src: list[int]) -> list[int] | None:
    if task == "copy":
        return list(src)
    if task == "reverse":
        return src[::-1]
    return recall_oracle(src)


def binding_distance(src: list[int]) -> int | None:
    """Distance from the query marker back to the queried binding's key."""
    marker = len(src) - 1 - src[::-1].index(QUERY)
    key = src[marker + 1]
    for pos in range(marker - 2, -1, -1):
        if src[pos] == key:
            return marker - pos
    return None


# ----------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    src: np.ndarray  # [B, S] framed source ids (body + EOS)
    tgt_in: np.ndarray  # [B, T] BOS + body
    tgt_out: np.ndarray  # [B, T] body + EOS
    src_valid: np.ndarray  # [B, S] bool
    tgt_valid: np.ndarray  # [B, T] bool

    def __len__(self) -> int:
        return self.src.shape[0]


def _pad(seqs: list[list[int]], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    arr = np.full((len(seqs), width), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        arr[i, : len(s)] = s
    valid = np.zeros(arr.shape, dtype=bool)
    for i, s in enumerate(seqs):
        valid[i, : len(s)] = True
    return arr, valid


def make_batch(pairs: list[Pair], pad_id: int = PAD) -> Batch:
    src, src_valid = _pad([list(s) + [EOS] for s, _ in pairs], pad_id)
    tgt_in, tgt_valid = _pad([[BOS] + list(t) for _, t in pairs], pad_id)
    tgt_out, _ = _pad([list(t) + [EOS] for _, t in pairs], pad_id)
    return Batch(src, tgt_in, tgt_out, src_valid, tgt_valid)


def batch(dataset: list[Pair], batch_size: int, pad_id: int = PAD) -> list[Batch]:
    """Consecutive padded batches in dataset order."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return [make_batch(dataset[i : i + batch_size], pad_id) for i in range(0, len(dataset), batch_size)]


def sample_batch(dataset: list[Pair], batch_size: int, seed: int, step: int, pad_id: int = PAD) -> Batch:
    """Batch for a training step, a pure function of (seed, step)."""
    rng = np.random.default_rng([seed, zlib.crc32(b"batches"), step])
    idx = rng.choice(len(dataset), size=min(batch_size, len(dataset)), replace=False)
    return make_batch([dataset[i] for i in idx], pad_id)


# ----------------------------------------------------------------------------
# files


def write_dataset(pairs: Iterable[Pair], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fp:
        for src, tgt in pairs:
            fp.write(" ".join(map(str, src)) + "\t" + " ".join(map(str, tgt)) + "\n")


def read_dataset(path: str | Path) -> list[Pair]:
    pairs = []
    with open(path, encoding="utf-8") as fp:
        for line in fp:
            line = line.rstrip("\n")
            if not line:
                continue
            src, tgt = line.split("\t")
            pairs.append(([int(t) for t in src.split()], [int(t) for t in tgt.split()]))
    return pairs
