import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from causaltraffic.evaluation import (
    MetricReport,
    ablation_compare,
    attention_maps,
    export_attention,
    metrics,
    predict_windows,
    read_matrix_csv,
    sign_agreement,
    write_predictions_csv,
)
from conftest import fresh_state


def test_metrics_examples():
    y = np.array([[50.0, 40.0], [30.0, 0.5]])
    zero = metrics(y, y)
    assert (zero.mae, zero.mse, zero.rmse, zero.mape) == (0, 0, 0, 0)
    r = metrics(y + 3, y)
    assert (r.mae, r.mse, r.rmse) == (3.0, 9.0, 3.0)
    # floor of 1 km/h for the tiny target
    assert r.mape == pytest.approx((3 / 50 + 3 / 40 + 3 / 30 + 3 / 1.0) / 4 * 100)
    assert r.n == 2 and r.horizon == 2


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 12, elements=st.floats(-100, 100)), arrays(np.float64, 12, elements=st.floats(-100, 100)))
def test_metrics_match_resummation(a, b):
    r = metrics(a, b)
    n = len(a)
    assert r.mae == pytest.approx(sum(abs(x - y) for x, y in zip(a, b)) / n, abs=1e-9)
    assert r.mse == pytest.approx(sum((x - y) ** 2 for x, y in zip(a, b)) / n, rel=1e-12, abs=1e-12)
    assert r.mape == pytest.approx(sum(abs(x - y) / max(abs(y), 1.0) for x, y in zip(a, b)) / n * 100,
                                   rel=1e-9, abs=1e-9)
    assert abs(r.rmse ** 2 - r.mse) <= 1e-9 * max(1.0, r.mse)
    assert min(r.mae, r.mse, r.rmse, r.mape) >= 0


def test_metric_triple_format():
    assert MetricReport(3.607, 25.427, 5.043, 7.1, 10).triple() == "3.607 / 25.427 / 5.043"
    assert MetricReport(3.6074, 25.4266, 5.04248, 7.1, 10).triple() == "3.607 / 25.427 / 5.042"


def test_metrics_reject_bad_input():
    with pytest.raises(ValueError):
        metrics([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        metrics([], [])
    with pytest.raises(ValueError):
        metrics([np.nan], [1.0])


def test_ablation_zero_with_silent_causal_head(tiny_windows):
    state = fresh_state(tiny_windows)
    p = state.params
    # no event path at all: causal embedding, event bias and causal head silenced
    for k in ("causal_w2", "causal_b2", "acausal_w2", "acausal_b2"):
        p[k].value = np.zeros(p[k].shape)
    pairs = tiny_windows.windows["test"]
    rep, _ = ablation_compare(state, tiny_windows, pairs)
    assert rep.causal == rep.neutral
    assert all(v == 0.0 for v in rep.delta_pct.values())
    assert set(rep.to_dict()) >= {"causal", "neutral", "delta_pct"}


def test_predictions_are_km_per_hour(tiny_windows, tmp_path):
    state = fresh_state(tiny_windows)
    pairs = tiny_windows.windows["test"][:50]
    pr = predict_windows(state, tiny_windows, pairs)
    norm = state.normalizer
    np.testing.assert_allclose(pr.y_hat - pr.y_base, pr.a_causal * pr.gate, atol=1e-10)
    assert abs(pr.y_hat.mean() - norm.mean) < 5 * norm.std
    write_predictions_csv(tmp_path / "p.csv", tiny_windows, pairs, pr)
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert len(lines) == 51 and lines[0].startswith("segment_id,anchor_time,event,y_hat_1")


def test_sign_agreement():
    a = np.array([[1.0, 1.0], [-2.0, -1.0], [0.5, 0.5], [3.0, 3.0]])
    e = np.array([[2.0, 1.0], [1.0, 1.0], [0.0, 0.0], [4.0, 4.0]])
    share, n = sign_agreement(a, e)
    assert n == 3 and share == pytest.approx(2 / 3)
    share, n = sign_agreement(a, e, mask=[False, True, True, False])
    assert (share, n) == (0.0, 1)
    assert math.isnan(sign_agreement(a, np.zeros_like(e))[0])


def test_attention_maps_contracts(tiny_windows, tmp_path):
    state = fresh_state(tiny_windows)
    state.params["beta_attn"].value = np.array(2.0)
    batch = tiny_windows.batch(tiny_windows.windows["train"][:40])
    mean, var, open_cells = attention_maps(state, batch)
    T = mean.shape[0]
    np.testing.assert_allclose(mean.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(mean[~open_cells] == 0)
    paths = export_attention(state, batch, tmp_path / "maps")
    back = read_matrix_csv(paths["mean_csv"])
    assert np.all(np.isnan(back[np.triu_indices(T, 1)]))
    np.testing.assert_allclose(np.nansum(back, axis=1), 1.0, atol=1e-6)
    assert np.all(np.isnan(read_matrix_csv(paths["variance_csv"])[np.triu_indices(T, 1)]))
    svg = paths["mean_svg"].read_text()
    assert svg.startswith("<svg") and svg.count("<rect") == T * T
    # exports are a pure function of state and batch
    again = export_attention(state, batch, tmp_path / "maps2")
    assert again["mean_csv"].read_bytes() == paths["mean_csv"].read_bytes()


def test_single_window_has_zero_variance(tiny_windows):
    state = fresh_state(tiny_windows)
    batch = tiny_windows.batch(tiny_windows.windows["train"][:1])
    _, var, _ = attention_maps(state, batch)
    assert np.all(var == 0)
