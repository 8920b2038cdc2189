import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from userfas.errors import ContractError
from userfas.metrics import (
    ConfusionCounts,
    ScoreRecord,
    boxplot_summary,
    compute_metrics,
    confusion,
    decide,
    emit_report,
    evaluate,
    load_report,
    read_scores,
    threshold_sweep,
    write_scores,
)

from oracles import five_numbers, recount


def records_from(labels, probs, subjects=None, threshold=0.5):
    subjects = subjects or ["s"] * len(labels)
    return [ScoreRecord(s, "v", i, t, float(p), decide(p, threshold))
            for i, (s, t, p) in enumerate(zip(subjects, labels, probs))]


def test_decision_rule_is_inclusive():
    assert decide(0.5, 0.5) == "spoof"
    assert decide(0.4999999, 0.5) == "live"


def test_hand_worked_counts():
    # 3 live (one rejected), 5 spoof (two accepted)
    labels = ["live"] * 3 + ["spoof"] * 5
    probs = [0.1, 0.2, 0.9, 0.8, 0.7, 0.6, 0.3, 0.4]
    counts = confusion(records_from(labels, probs))
    assert counts == ConfusionCounts(tp_live=2, fn_live=1, tn_spoof=3, fp_spoof=2)
    m = compute_metrics(counts)
    assert m.apcer == pytest.approx(2 / 5, abs=1e-15)
    assert m.npcer == pytest.approx(1 / 3, abs=1e-15)
    assert m.acer == pytest.approx((2 / 5 + 1 / 3) / 2, abs=1e-15)
    assert m.accuracy == pytest.approx(5 / 8)
    assert m.f1 == pytest.approx(4 / 7)
    assert (m.far, m.frr) == (m.apcer, m.npcer)


def test_published_acer_row():
    m = compute_metrics(ConfusionCounts(tp_live=100, fn_live=0, tn_spoof=56, fp_spoof=44))
    assert abs(m.apcer - 0.44) <= 1e-12 and m.npcer == 0.0
    assert abs(m.acer - 0.22) <= 1e-12


def test_all_live_makes_spoof_rates_undefined():
    m = compute_metrics(confusion(records_from(["live"] * 4, [0.1, 0.2, 0.7, 0.3])))
    assert m.apcer is None and m.acer is None and m.far is None
    assert m.npcer == 0.25


def test_empty_and_bad_threshold():
    with pytest.raises(ContractError):
        confusion([])
    with pytest.raises(ContractError):
        confusion(records_from(["live"], [0.1]), -0.1)
    with pytest.raises(ContractError):
        ScoreRecord("s", "v", 0, "live", 1.5, "live")


def test_threshold_extremes():
    recs = records_from(["live", "spoof", "spoof"], [0.0, 0.3, 1.0])
    assert confusion(recs, 0.0) == ConfusionCounts(0, 1, 2, 0)
    # threshold above 1 accepts everything
    assert confusion(recs, 1.5) == ConfusionCounts(1, 0, 0, 2)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["live", "spoof"]), st.floats(0, 1)), min_size=1, max_size=200),
       st.floats(0, 1))
def test_metrics_match_bruteforce(pairs, threshold):
    labels, probs = zip(*pairs)
    expected = recount(labels, probs, threshold)
    m = compute_metrics(confusion(records_from(labels, probs), threshold))
    c = m.counts
    assert (c.tp_live, c.fn_live, c.tn_spoof, c.fp_spoof) == expected["counts"]
    for field in ("apcer", "npcer", "far", "frr", "acer", "accuracy", "f1"):
        got, want = getattr(m, field), expected[field]
        assert (got is None) == (want is None)
        if want is not None:
            assert abs(got - float(want)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=60))
def test_boxplot_matches_numpy(values):
    b = boxplot_summary(values)
    want = five_numbers(values)
    got = [b.min, b.q1, b.median, b.q3, b.max]
    assert np.allclose(got, want, rtol=0, atol=1e-12)
    assert got == sorted(got)


def test_boxplot_hand_example():
    b = boxplot_summary([1, 2, 3, 4])
    assert (b.q1, b.median, b.q3) == (1.75, 2.5, 3.25)


def test_evaluate_and_sweep():
    labels = ["live"] * 4 + ["spoof"] * 4
    probs = [0.1, 0.2, 0.6, 0.3, 0.9, 0.8, 0.2, 0.7]
    subjects = ["a", "a", "b", "b", "a", "a", "b", "b"]
    report = evaluate(records_from(labels, probs, subjects), 0.5)
    assert report.per_subject == {"a": 1.0, "b": 0.5}
    assert report.boxplot.median == 0.75
    rows = threshold_sweep(records_from(labels, probs), [0.0, 0.5, 1.01])
    assert rows[0]["npcer"] == 1.0 and rows[0]["apcer"] == 0.0
    assert rows[2]["apcer"] == 1.0 and rows[2]["npcer"] == 0.0


def test_report_files(tmp_path):
    labels = ["live", "live", "spoof", "spoof"]
    recs = records_from(labels, [0.1, 0.7, 0.8, 0.4], ["a", "b", "a", "b"])
    report = evaluate(recs)
    js = emit_report(report, tmp_path / "r.json", "json", plot=tmp_path / "box.png")
    assert [p.name for p in js] == ["r.json", "box.png"] and js[1].stat().st_size > 0
    text = js[0].read_text()
    obj = json.loads(text)
    assert list(obj) == sorted(obj)
    assert '"acer": 0.500000' in text
    assert load_report(js[0]).acer == 0.5
    csv_path = emit_report(report, tmp_path / "r.csv", "csv")[0]
    assert csv_path.read_text().splitlines() == ["subject,accuracy", "a,1.000000", "b,0.000000"]
    # a second write is byte-identical
    again = emit_report(report, tmp_path / "r2.json", "json")[0]
    assert again.read_bytes() == js[0].read_bytes()


def test_undefined_rates_serialise_as_null(tmp_path):
    report = evaluate(records_from(["live"], [0.2]))
    obj = json.loads(emit_report(report, tmp_path / "r.json")[0].read_text())
    assert obj["apcer"] is None and obj["acer"] is None


def test_scores_roundtrip(tmp_path):
    recs = records_from(["live", "spoof"], [0.123456, 0.987654])
    path = write_scores(recs, tmp_path / "scores.csv")
    with open(path) as fh:
        assert next(csv.reader(fh)) == ["subject", "video", "frame", "true_label", "p_spoof", "decision"]
    assert read_scores(path) == recs


def test_hand_counts_from_published_style_example():
    m = compute_metrics(ConfusionCounts(tp_live=9, fn_live=1, tn_spoof=6, fp_spoof=4))
    assert m.accuracy == 0.75 and m.frr == 0.1 and m.far == 0.4
    assert m.f1 == pytest.approx(18 / 23, abs=1e-15)


def test_json_roundtrip_equal_report(tmp_path):
    report = evaluate(records_from(["live", "spoof", "live"], [0.2, 0.9, 0.6], ["a", "a", "b"]))
    path = emit_report(report, tmp_path / "r.json")[0]
    assert load_report(path) == report.rounded(6)
