import io

import pytest

from lasformer import cost
from lasformer.cost import CostInputs, measured_vs_analytic, ratio, sweep
from lasformer.errors import ConfigError, InstrumentationError
from lasformer.tensor import OpCounter


def test_headline_ratio_exact():
    # (64/3 + 2*0.05*512) / (2*512) = 0.0708333...
    assert ratio(cost.HEADLINE) == pytest.approx((64 / 3 + 51.2) / 1024, rel=1e-15)
    assert round(100 * ratio(cost.HEADLINE), 2) == 7.08


def test_baseline_is_two_n_squared_d():
    c = CostInputs(n=2, N=10, d=8, d_s=4, k=0.5, r=1)
    assert cost.baseline_cost(c) == 2 * 2 * 100 * 8
    assert cost.lasformer_cost(c) == 2 * 100 * 4 + 2 * 0.5 * 2 * 100 * 8


def test_k_one_r_one_costs_more_than_dense():
    c = CostInputs(k=1.0, r=1)
    assert ratio(c) == pytest.approx(1 + 64 / 1024)


@pytest.mark.parametrize(
    "table, expected",
    [
        ("threshold-table", [5.08, 7.08, 16.08]),
        ("dimension-table", [24.52, 16.04, 7.08, 8.97, 12.63, 21.87]),
        ("sharing-table", [10.04, 7.08, 8.12, 11.25]),
    ],
)
def test_tables_match_hand_values(table, expected):
    assert [round(100 * r["ratio"], 2) for r in sweep(table)] == expected


def test_length_curve_decreases_toward_limit():
    rows = sweep("length-curve")
    ratios = [r["ratio"] for r in rows]
    assert all(b < a for a, b in zip(ratios, ratios[1:]))
    far = ratio(CostInputs(N=10**6, include_projections=True))
    assert abs(far - ratio(cost.HEADLINE)) < 0.01


def test_projection_terms_cancel_in_the_limit():
    small = ratio(CostInputs(N=64, include_projections=True))
    assert small > ratio(CostInputs(N=64))


def test_cross_attention_key_length():
    c = CostInputs(n=1, N=4, N_kv=6, d=2, d_s=2, k=1.0, r=1)
    assert cost.baseline_cost(c) == 2 * 4 * 6 * 2
    assert cost.cost_report(c).selective_terms["selection"] == 4 * 6 * 2


def test_sweep_overrides_and_errors():
    rows = sweep("headline", {"k": 0.1})
    assert rows[0]["k"] == 0.1
    with pytest.raises(ConfigError):
        sweep("headline", {"bogus": 1})
    with pytest.raises(ConfigError):
        sweep("nope")


def test_invalid_inputs():
    for bad in (dict(k=0.0), dict(k=1.5), dict(r=0.5), dict(N=0)):
        with pytest.raises(ValueError):
            CostInputs(**bad)


def test_csv_output():
    buf = io.StringIO()
    cost.write_csv(sweep("headline"), buf)
    header, row = buf.getvalue().splitlines()
    assert header == "n,d,d_s,k,r,reported_pct,ratio,pct"
    assert row.endswith(",0.0708333333333,7.08")


def test_measured_vs_analytic():
    c = CostInputs(n=1, N=3, d=4, d_s=2, k=0.5, r=1)
    counter = OpCounter()
    counter.add("select.logits", 18)
    counter.add("attn.logits", 18)
    counter.add("attn.weighted_sum", 20)
    out = measured_vs_analytic(counter, [c])
    assert out["selection"] == 0.0
    assert out["masked_attention"] == pytest.approx(2 / 36)
    with pytest.raises(InstrumentationError):
        measured_vs_analytic(OpCounter(), [c])
