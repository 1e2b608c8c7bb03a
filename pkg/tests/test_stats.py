import math
import re
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grokmuon import stats
from grokmuon.errors import AnalysisError
from grokmuon.stats import box_stats, quartiles, summarize, t_survival, welch_t_test

# frozen from scipy.stats.t.sf / ttest_ind
T_SF = [
    (1.0, 1000, 0.1587762090423363),
    (2.0, 1000, 0.022885173246625833),
    (3.0, 1000, 0.0013833545221190939),
    (1.0, 3.5, 0.19066862678172278),
    (0.3, 7.2, 0.3863269460945543),
    (12.0, 2.5, 0.0014181075150391613),
    (2.776, 4, 0.0250113891599882),
]


def test_welch_hand_example():
    r = welch_t_test([1, 2, 3], [2, 3, 4])
    assert r.t_statistic == pytest.approx(-1.224744871391589, abs=1e-12)
    assert r.degrees_of_freedom == pytest.approx(4.0, abs=1e-12)
    assert r.p_value == pytest.approx(0.2878641347266908, abs=1e-10)
    assert (r.mean_a, r.mean_b, r.n_a, r.n_b) == (2.0, 3.0, 3, 3)


def test_identical_samples():
    r = welch_t_test([5, 7, 9], [5, 7, 9])
    assert r.t_statistic == 0.0 and r.p_value == 1.0
    r = welch_t_test([4, 4], [4, 4])
    assert r.t_statistic == 0.0 and r.p_value == 1.0


def test_unequal_samples_against_frozen_reference():
    a, b = [10, 12, 15, 11, 30], [7, 8, 8, 9]
    r = welch_t_test(a, b)
    assert r.t_statistic == pytest.approx(2.0438774200987653, rel=1e-12)
    assert r.p_value == pytest.approx(0.10879041858425854, rel=1e-9)
    r = welch_t_test(a, b, pooled=True)
    assert r.degrees_of_freedom == 7
    assert r.t_statistic == pytest.approx(1.8068917734986096, rel=1e-12)
    assert r.p_value == pytest.approx(0.11373126381399618, rel=1e-9)


def test_insufficient_data():
    with pytest.raises(AnalysisError, match="n_a=1"):
        welch_t_test([1], [2, 3])
    with pytest.raises(AnalysisError):
        welch_t_test([1, 1], [2, 2])


def test_t_survival_examples():
    for df in (1, 4, 30.5):
        assert t_survival(0.0, df) == 0.5
    assert t_survival(1.0, 1) == pytest.approx(0.25, abs=1e-14)
    for t, df, want in T_SF:
        assert t_survival(t, df) == pytest.approx(want, abs=1e-12)
    with pytest.raises(ValueError):
        t_survival(1.0, 0)


def test_t_survival_cauchy_closed_form():
    for t in np.linspace(-20, 20, 81):
        assert t_survival(t, 1) == pytest.approx(0.5 - math.atan(t) / math.pi, abs=1e-12)


@pytest.mark.parametrize("df", [2000, 10_000, 1e6])
def test_t_survival_normal_limit(df):
    for t in (1.0, 2.0, 3.0):
        normal = 0.5 * math.erfc(t / math.sqrt(2))
        assert abs(t_survival(t, df) - normal) < 1e-4


@settings(max_examples=300, deadline=None)
@given(t=st.floats(-50, 50), df=st.floats(0.5, 500))
def test_t_survival_symmetry(t, df):
    assert t_survival(t, df) + t_survival(-t, df) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(t1=st.floats(-30, 30), t2=st.floats(-30, 30), df=st.floats(0.5, 200))
def test_t_survival_monotone(t1, t2, df):
    lo, hi = min(t1, t2), max(t1, t2)
    assert t_survival(hi, df) <= t_survival(lo, df)


def test_t_test_invariants_on_random_pairs():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        a = rng.normal(rng.uniform(50, 200), rng.uniform(1, 40), size=rng.integers(2, 12))
        b = rng.normal(rng.uniform(50, 200), rng.uniform(1, 40), size=rng.integers(2, 12))
        ab, ba = welch_t_test(a, b), welch_t_test(b, a)
        assert ab.t_statistic == -ba.t_statistic
        assert ab.p_value == ba.p_value
        assert 0.0 <= ab.p_value <= 1.0
        c = rng.uniform(-1000, 1000)
        shifted = welch_t_test(a + c, b + c)
        assert shifted.t_statistic == pytest.approx(ab.t_statistic, rel=1e-9, abs=1e-12)
        assert shifted.degrees_of_freedom == pytest.approx(ab.degrees_of_freedom, rel=1e-9)
        assert shifted.p_value == pytest.approx(ab.p_value, rel=1e-8, abs=1e-12)


def test_betainc_edges():
    assert stats.betainc(2, 3, 0.0) == 0.0 and stats.betainc(2, 3, 1.0) == 1.0
    # I_x(1, 1) = x and I_x(a, 1) = x**a
    assert stats.betainc(1, 1, 0.3) == pytest.approx(0.3, abs=1e-14)
    assert stats.betainc(2.5, 1, 0.6) == pytest.approx(0.6 ** 2.5, abs=1e-14)
    with pytest.raises(ValueError):
        stats.betainc(1, 1, 1.5)


def test_quartile_rule():
    assert quartiles(range(1, 10)) == (3.0, 5.0, 7.0)
    assert quartiles([1, 2, 3, 4]) == (1.75, 2.5, 3.25)


def test_box_stats_examples():
    assert box_stats("g", [10, 20, 30]).median == 20
    b = box_stats("g", [1, 2, 3, 4, 100])
    assert (b.q1, b.q3) == (2.0, 4.0)
    assert b.outliers == [100.0]
    assert (b.min, b.max) == (1.0, 4.0)
    with pytest.raises(AnalysisError):
        box_stats("g", [])


def runs(*pairs):
    return [{"optimizer": o, "task": "mod_add", "softmax": "softmax", "grok_epoch": e} for o, e in pairs]


def test_summarize_examples():
    (row,) = summarize(runs(("adamw", 40)))
    assert row["mean_epoch"] == row["median_epoch"] == 40 and row["grok_rate"] == 1.0
    (row,) = summarize(runs(("adamw", 40), ("adamw", None)))
    assert row["grok_rate"] == 0.5 and row["mean_epoch"] == 40 and row["n"] == 2
    rows = summarize(runs(("muon", 100), ("adamw", 150), ("muon", 106)))
    assert [r["group"] for r in rows] == ["adamw", "muon"]
    assert rows[1]["mean_epoch"] == 103 and rows[1]["min"] == 100 and rows[1]["max"] == 106


def test_summarize_by_two_keys():
    data = runs(("adamw", 40), ("muon", 30))
    data[1]["task"] = "mod_mul"
    assert [r["group"] for r in summarize(data, ("task", "optimizer"))] == ["mod_add/adamw", "mod_mul/muon"]


def test_boxplot_skips_empty_group_with_warning():
    with pytest.warns(UserWarning, match="muon"):
        boxes, skipped = stats.boxplot_stats(runs(("adamw", 40), ("adamw", 50), ("muon", None)))
    assert [b.group for b in boxes] == ["adamw"] and skipped == ["muon"]


def test_boxplot_files(tmp_path):
    data = runs(("adamw", 150), ("adamw", 160), ("adamw", 140), ("muon", 100), ("muon", 104), ("muon", 300))
    boxes = stats.boxplot_emit(data, tmp_path)
    assert [b.group for b in boxes] == ["adamw", "muon"]
    lines = (tmp_path / "boxplot.csv").read_text().splitlines()
    assert lines[0] == "group,min,q1,median,q3,max,outliers"
    assert lines[1] == "adamw,140,145,150,155,160,"
    root = ET.fromstring((tmp_path / "boxplot.svg").read_text())
    ns = {"s": "http://www.w3.org/2000/svg"}
    groups = root.findall("s:g[@class='box']", ns)
    assert [g.get("data-group") for g in groups] == ["adamw", "muon"]
    xs = [float(g.find("s:rect", ns).get("x")) for g in groups]
    widths = [float(g.find("s:rect", ns).get("width")) for g in groups]
    assert xs[0] + widths[0] < xs[1]  # adjacent, not overlapping


def test_summary_csv(tmp_path):
    path = tmp_path / "summary.csv"
    stats.write_summary_csv(summarize(runs(("adamw", 40), ("adamw", None), ("muon", 31))), path)
    lines = path.read_text().splitlines()
    assert lines[0] == "group,n,grok_rate,mean_epoch,median_epoch,min,max"
    assert lines[1] == "adamw,2,0.5,40,40,40,40"
    assert re.fullmatch(r"muon,1,1,31,31,31,31", lines[2])
