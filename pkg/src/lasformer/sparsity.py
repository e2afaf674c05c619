"""Adaptive sparsity control and layer-group sharing."""
from __future__ import annotations

import csv
import dataclasses
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import IO, Iterable

import numpy as np

from .attention import KINDS, AttentionRecord
from .errors import ConfigError, EmptyReportError, ShapeError

SELECTORS = ("topk", "fixed-window")


@dataclass
class SelectionConfig:
    """Hyperparameters of the selection mechanism.

    ``adaptive=False`` pins k at ``k_init``. ``selector``, ``window_length``
    and ``straight_through`` exist for the ablations.
    """

    d_s: int = 16
    t: float = 0.95
    step: float = 0.001
    alpha: float = 0.01
    r: int = 2
    k_init: float = 1.0
    k_min: float = 0.01
    min_tokens: int = 10
    freeze_threshold: float = 0.5
    adaptive: bool = True
    straight_through: bool = True
    selector: str = "topk"
    window_length: int = 8
    symmetric_kl: bool = False

    def validate(self, n_layers: int | None = None) -> None:
        if not 0.0 < self.t < 1.0:
            raise ConfigError(f"selection.t must lie in (0, 1), got {self.t}")
        if self.step <= 0:
            raise ConfigError("selection.step must be positive")
        if not 0.0 < self.k_min <= self.k_init <= 1.0:
            raise ConfigError(f"need 0 < k_min <= k_init <= 1, got k_min={self.k_min}, k_init={self.k_init}")
        if self.min_tokens < 1:
            raise ConfigError("selection.min_tokens must be >= 1")
        if self.r < 1 or (n_layers is not None and n_layers % self.r):
            raise ConfigError(f"selection.r={self.r} must divide the layer count {n_layers}")
        if self.d_s < 1:
            raise ConfigError("selection.d_s must be positive")
        if self.alpha < 0:
            raise ConfigError("selection.alpha must be non-negative")
        if self.selector not in SELECTORS:
            raise ConfigError(f"selection.selector must be one of {SELECTORS}, got {self.selector!r}")
        if self.window_length < 1:
            raise ConfigError("selection.window_length must be >= 1")


@dataclass(frozen=True)
class SparsityState:
    """Live keep-ratio of one selection group (keyed by its leader layer)."""

    k: float
    kind: str
    layer_index: int
    frozen_increase: bool = False


def update_k(state: SparsityState, captured_mass: float, config: SelectionConfig) -> SparsityState:
    """One controller step: shrink k while the kept tokens hold more than ``t``
    of the attention mass, grow it otherwise.

    Growth is disabled while k is above ``freeze_threshold``. Once k has
    dropped below the threshold the state latches, and later growth can
    bring k back up to the threshold but never past it.
    """
    if not math.isfinite(captured_mass) or not -1e-9 <= captured_mass <= 1.0 + 1e-9:
        raise ValueError(f"captured mass must be a finite fraction, got {captured_mass}")
    if not config.adaptive:
        return state
    k = state.k
    if captured_mass > config.t:
        k = max(k - config.step, config.k_min)
    elif k <= config.freeze_threshold:
        k = min(k + config.step, config.freeze_threshold if state.frozen_increase else 1.0)
    frozen = state.frozen_increase or k < config.freeze_threshold
    return dataclasses.replace(state, k=k, frozen_increase=frozen)


def captured_mass(A, mask, row_weights=None) -> float:
    """Mean over query rows of the attention mass that falls on kept keys.

    ``A`` may carry extra leading axes (batch, heads); ``mask`` broadcasts
    against it. ``row_weights`` (e.g. a query-validity flag) broadcasts
    against ``A.shape[:-1]`` and excludes padded rows from the mean.
    """
    A = np.asarray(A, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == A.ndim - 1:
        mask = mask[..., None, :, :]
    try:
        per_row = (A * mask).sum(axis=-1)
    except ValueError as exc:
        raise ShapeError(f"attention shape {A.shape} and mask shape {mask.shape} disagree") from exc
    if row_weights is None:
        return float(per_row.mean())
    w = np.broadcast_to(np.asarray(row_weights, dtype=np.float64), per_row.shape)
    return float((per_row * w).sum() / w.sum())


def group_leader(layer_index: int, r: int) -> int:
    return (layer_index // r) * r


def sparsity_report(records: Iterable[AttentionRecord]) -> list[dict]:
    """Mean kept fraction per (leader layer, kind), one row per leader.

    Kept fraction is measured against the admissible positions of each
    row, so decoder self attention rows use ``i + 1`` as denominator.
    Records must be trimmed to real (unpadded) lengths.
    """
    sums: dict[tuple[int, str], list[float]] = defaultdict(list)
    for rec in records:
        mask = np.asarray(rec.mask, dtype=bool)
        if rec.kind == "decoder-self":
            adm = np.minimum(np.arange(1, mask.shape[-2] + 1), mask.shape[-1])
            adm = np.broadcast_to(adm, mask.shape[:-1])
        else:
            adm = np.full(mask.shape[:-1], mask.shape[-1])
        sums[(rec.layer_index, rec.kind)].extend((mask.sum(axis=-1) / adm).reshape(-1).tolist())
    if not sums:
        raise EmptyReportError("sparsity report needs at least one attention record")
    rows = []
    for layer in sorted({layer for layer, _ in sums}):
        row: dict = {"layer": layer}
        for kind in KINDS:
            vals = sums.get((layer, kind))
            row[kind] = float(np.mean(vals)) if vals else None
        rows.append(row)
    return rows


def write_sparsity_report(rows: list[dict], fp: IO[str]) -> None:
    w = csv.writer(fp, lineterminator="\n")
    w.writerow(["layer", "encoder_self_pct", "cross_pct", "decoder_self_pct"])
    for row in rows:
        w.writerow([row["layer"]] + ["" if row[k] is None else f"{100 * row[k]:.2f}" for k in KINDS])


TRAJECTORY_COLUMNS = ("step", "kind", "leader_layer", "k", "captured_mass")


def write_trajectory(rows: Iterable[dict], fp: IO[str], header: bool = True) -> None:
    w = csv.writer(fp, lineterminator="\n")
    if header:
        w.writerow(TRAJECTORY_COLUMNS)
    for row in rows:
        w.writerow([row["step"], row["kind"], row["leader_layer"], repr(float(row["k"])), repr(float(row["captured_mass"]))])
