"""Analytic attention cost of a dense transformer versus selective attention.

Counts are multiply-accumulates. For ``n`` layers, sequence length ``N``
and width ``d`` the dense attention costs ``2 n N^2 d`` (scores plus
weighted sum). Selective attention pays ``n N^2 d_s / r`` for the shared
low-dimensional selection and ``2 k n N^2 d`` for the kept positions.
"""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from typing import IO, Sequence

from .errors import ConfigError, InstrumentationError
from .tensor import OpCounter


@dataclass(frozen=True)
class CostInputs:
    n: int = 6
    N: int = 1000
    d: int = 512
    d_s: int = 64
    k: float = 0.05
    r: float = 3
    include_projections: bool = False
    projection_multiplier: int = 4
    # key length when it differs from the query length (cross attention)
    N_kv: int | None = None

    def __post_init__(self) -> None:
        if min(self.n, self.N, self.d, self.d_s) <= 0:
            raise ValueError("n, N, d and d_s must be positive")
        if not 0.0 < self.k <= 1.0:
            raise ValueError(f"k must lie in (0, 1], got {self.k}")
        if self.r < 1:
            raise ValueError("r must be >= 1")

    @property
    def n_keys(self) -> int:
        return self.N if self.N_kv is None else self.N_kv


@dataclass(frozen=True)
class CostReport:
    baseline_ops: float
    selective_ops: float
    baseline_terms: dict
    selective_terms: dict

    @property
    def ratio(self) -> float:
        return self.selective_ops / self.baseline_ops


def _baseline_terms(c: CostInputs) -> dict:
    terms = {"attention": 2 * c.n * c.N * c.n_keys * c.d}
    if c.include_projections:
        # query/output projections scale with N, key/value with N_kv; equal for self attention
        terms["projections"] = c.n * c.projection_multiplier * (c.N + c.n_keys) / 2 * c.d * c.d
    return terms


def _selective_terms(c: CostInputs) -> dict:
    terms = {
        "selection": c.n * c.N * c.n_keys * c.d_s / c.r,
        "masked_attention": 2 * c.k * c.n * c.N * c.n_keys * c.d,
    }
    if c.include_projections:
        terms["projections"] = _baseline_terms(c)["projections"]
        terms["selection_projections"] = c.n * (c.N + c.n_keys) * c.d * c.d_s / c.r
    return terms


def baseline_cost(c: CostInputs) -> float:
    return float(sum(_baseline_terms(c).values()))


def lasformer_cost(c: CostInputs) -> float:
    return float(sum(_selective_terms(c).values()))


def cost_report(c: CostInputs) -> CostReport:
    b, s = _baseline_terms(c), _selective_terms(c)
    return CostReport(float(sum(b.values())), float(sum(s.values())), b, s)


def ratio(c: CostInputs) -> float:
    return lasformer_cost(c) / baseline_cost(c)


# ----------------------------------------------------------------------------
# sweeps over reference operating points

HEADLINE = CostInputs(n=6, N=1000, d=512, d_s=64, k=0.05, r=3)

# (parameter value, reported k, reported cost percent)
THRESHOLD_TABLE = [(0.90, 0.03, 5.0), (0.95, 0.05, 7.0), (0.99, 0.14, 16.0)]
DIMENSION_TABLE = [(16, 0.24, 23.0), (32, 0.15, 16.0), (64, 0.05, 7.0), (128, 0.048, 9.0), (256, 0.043, 13.0), (512, 0.052, 21.0)]
SHARING_TABLE = [(6, 0.09, 10.0), (3, 0.05, 7.0), (2, 0.05, 8.0), (1, 0.05, 11.0)]
LENGTHS = [128, 256, 512, 1024, 2048, 4096, 8192]

TABLES = ("headline", "threshold-table", "dimension-table", "sharing-table", "length-curve")


def sweep(table: str, overrides: dict | None = None) -> list[dict]:
    """Rows of (parameters, ratio) for one reference table or the length curve.

    The three tables use the reported k values without projection terms;
    ``reported_pct`` holds the reported cost for comparison. The length curve
    includes projection terms.
    """
    overrides = dict(overrides or {})
    unknown = set(overrides) - {f.name for f in dataclasses.fields(CostInputs)}
    if unknown:
        raise ConfigError(f"unknown cost override(s): {sorted(unknown)}")
    base = dataclasses.replace(HEADLINE, **overrides)
    rows: list[dict] = []
    if table == "headline":
        rows.append({"n": base.n, "d": base.d, "d_s": base.d_s, "k": base.k, "r": base.r, "ratio": ratio(base), "reported_pct": 7.0})
    elif table == "threshold-table":
        for t, k, reported in THRESHOLD_TABLE:
            c = dataclasses.replace(base, k=overrides.get("k", k))
            rows.append({"t": t, "k": c.k, "d_s": c.d_s, "r": c.r, "ratio": ratio(c), "reported_pct": reported})
    elif table == "dimension-table":
        for d_s, k, reported in DIMENSION_TABLE:
            c = dataclasses.replace(base, d_s=d_s, k=overrides.get("k", k))
            rows.append({"d_s": d_s, "k": c.k, "r": c.r, "ratio": ratio(c), "reported_pct": reported})
    elif table == "sharing-table":
        for r, k, reported in SHARING_TABLE:
            c = dataclasses.replace(base, r=r, k=overrides.get("k", k))
            rows.append({"r": r, "k": c.k, "d_s": c.d_s, "ratio": ratio(c), "reported_pct": reported})
    elif table == "length-curve":
        base = dataclasses.replace(base, include_projections=overrides.get("include_projections", True))
        for N in LENGTHS:
            c = dataclasses.replace(base, N=N)
            rows.append({"N": N, "k": c.k, "d_s": c.d_s, "r": c.r, "ratio": ratio(c)})
    else:
        raise ConfigError(f"unknown cost table {table!r}; choose one of {', '.join(TABLES)}")
    return rows


def write_csv(rows: list[dict], fp: IO[str]) -> None:
    """Header plus rows; ratios as 12-significant-digit fractions and rounded percents."""
    if not rows:
        return
    cols = [c for c in rows[0] if c != "ratio"] + ["ratio", "pct"]
    w = csv.writer(fp, lineterminator="\n")
    w.writerow(cols)
    for row in rows:
        out = []
        for col in cols:
            if col == "ratio":
                out.append(f"{row['ratio']:.12g}")
            elif col == "pct":
                out.append(f"{100 * row['ratio']:.2f}")
            else:
                out.append(row[col])
        w.writerow(out)


# ----------------------------------------------------------------------------
# instrumented runs


SELECTION_LABEL = "select.logits"
MASKED_LABELS = ("attn.logits", "attn.weighted_sum")


def measured_vs_analytic(counter: OpCounter, sites: Sequence[CostInputs]) -> dict:
    """Relative deviation of counted attention work from the analytic model.

    ``sites`` holds one CostInputs per attention kind of the run (with the
    realized keep fraction as ``k``); their selective terms are summed.
    Returns deviations for the selection term, the masked-attention term
    and their sum.
    """
    missing = [label for label in (SELECTION_LABEL,) + MASKED_LABELS if label not in counter]
    if missing:
        raise InstrumentationError(f"counter lacks label(s) {missing}")
    analytic_sel = sum(_selective_terms(c)["selection"] for c in sites)
    analytic_masked = sum(_selective_terms(c)["masked_attention"] for c in sites)
    measured_sel = counter[SELECTION_LABEL]
    measured_masked = sum(counter[label] for label in MASKED_LABELS)

    def dev(measured: float, analytic: float) -> float:
        return abs(measured - analytic) / analytic

    return {
        "selection": dev(measured_sel, analytic_sel),
        "masked_attention": dev(measured_masked, analytic_masked),
        "attention": dev(measured_sel + measured_masked, analytic_sel + analytic_masked),
        "measured": {"selection": measured_sel, "masked_attention": measured_masked},
        "analytic": {"selection": analytic_sel, "masked_attention": analytic_masked},
    }
