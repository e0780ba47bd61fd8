import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from glyphforge.evaluation import (
    BenchCase,
    EmptyOCR,
    NoisyOCR,
    OCRLine,
    OracleOCR,
    StubScorer,
    evaluate_lines,
    identity_system,
    levenshtein,
    load_cases,
    match_lines,
    ned,
    run_benchmark,
    write_report,
)
from glyphforge.layout import BBox


def _lev_oracle(a: str, b: str) -> int:
    """Full-table dynamic program."""
    d = np.zeros((len(a) + 1, len(b) + 1), dtype=int)
    d[:, 0] = np.arange(len(a) + 1)
    d[0, :] = np.arange(len(b) + 1)
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            d[i, j] = min(d[i - 1, j] + 1, d[i, j - 1] + 1, d[i - 1, j - 1] + (a[i - 1] != b[j - 1]))
    return int(d[-1, -1])


def test_levenshtein_examples():
    assert levenshtein("kitten", "sitting") == 3
    assert levenshtein("", "abc") == 3
    assert levenshtein("abc", "abc") == 0


@settings(max_examples=100, deadline=None)
@given(a=st.text("abcd", max_size=10), b=st.text("abcd", max_size=10))
def test_levenshtein_matches_oracle(a, b):
    assert levenshtein(a, b) == _lev_oracle(a, b)
    assert levenshtein(a, b) == levenshtein(b, a)


def test_ned_examples():
    assert ned("", "") == 0.0
    assert ned("abc", "abd") == pytest.approx(1 / 3, abs=1e-15)
    assert ned("abc", "") == 1.0


def _line(text, l, t=0, w=10, h=10):
    return OCRLine(text, BBox(l, t, l + w, t + h))


def test_composite_ned_case():
    # one exact line, one line with a 1-of-3 substitution, one missed line
    gt = [_line("abc", 0), _line("xyz", 100), _line("qqq", 200)]
    pred = [_line("abc", 0), _line("xya", 100)]
    rep = evaluate_lines(pred, gt)
    assert rep.ned == pytest.approx((0 + 1 / 3 + 1) / 3, abs=1e-15)
    assert rep.precision == 0.5
    assert rep.recall == pytest.approx(1 / 3)
    assert rep.n_matched == 2 and rep.n_correct == 1


def test_match_prefers_higher_iou():
    gt = [_line("a", 0)]
    pred = [_line("a", 3), _line("a", 1)]
    m = match_lines(pred, gt)
    assert m.pairs[0][:2] == (1, 0)
    assert m.unmatched_pred == [0]


def test_empty_inputs():
    rep = evaluate_lines([], [])
    assert rep.empty_gt and rep.f_score == 0.0 and rep.ned == 0.0
    rep = evaluate_lines([], [_line("a", 0)])
    assert rep.ned == 1.0 and rep.recall == 0.0
    with pytest.raises(ValueError):
        match_lines([], [], iou_thresh=1.5)


line_st = st.builds(
    lambda x, y, w, h: _line("t", x, y, w, h),
    st.integers(0, 30), st.integers(0, 30), st.integers(2, 20), st.integers(2, 20),
)


@settings(max_examples=100, deadline=None)
@given(pred=st.lists(line_st, max_size=6), gt=st.lists(line_st, max_size=6))
def test_matching_is_one_to_one(pred, gt):
    m = match_lines(pred, gt)
    ps = [i for i, _, _ in m.pairs]
    gs = [j for _, j, _ in m.pairs]
    assert len(set(ps)) == len(ps) and len(set(gs)) == len(gs)
    assert sorted(ps + m.unmatched_pred) == list(range(len(pred)))
    assert sorted(gs + m.unmatched_gt) == list(range(len(gt)))
    assert all(v >= 0.5 for _, _, v in m.pairs)


def _cases():
    return [
        BenchCase("c0", {"canvas": [32, 16]}, [_line("hello", 0), _line("world", 40)]),
        BenchCase("c1", {"canvas": [16, 16]}, [_line("abc", 0)]),
    ]


def test_benchmark_oracle_and_empty():
    cases = _cases()
    res = run_benchmark(cases, identity_system, OracleOCR())
    assert res.report.accuracy == 1.0 and res.report.ned == 0.0
    res = run_benchmark(cases, identity_system, EmptyOCR())
    assert res.report.recall == 0.0 and res.report.ned == 1.0


def test_noisy_ocr_is_deterministic():
    a = run_benchmark(_cases(), identity_system, NoisyOCR(0.5, seed=3))
    b = run_benchmark(_cases(), identity_system, NoisyOCR(0.5, seed=3))
    assert a.report.to_dict() == b.report.to_dict()
    assert 0.0 < a.report.ned <= 1.0


def test_benchmark_isolates_failures():
    def flaky(case):
        if case.case_id == "c1":
            raise RuntimeError("boom")
        return identity_system(case)

    res = run_benchmark(_cases(), flaky, OracleOCR())
    assert [f["id"] for f in res.failures] == ["c1"]
    assert len(res.rows) == 1
    with pytest.raises(RuntimeError):
        run_benchmark(_cases(), lambda c: 1 / 0, OracleOCR())


def test_report_files_are_reproducible(tmp_path):
    res = run_benchmark(_cases(), identity_system, OracleOCR())
    j1, c1 = write_report(res, tmp_path / "a")
    res2 = run_benchmark(_cases(), identity_system, OracleOCR())
    j2, c2 = write_report(res2, tmp_path / "b")
    assert j1.read_bytes() == j2.read_bytes()
    assert c1.read_bytes() == c2.read_bytes()
    assert json.loads(j1.read_text())["schema_version"] == 1


def test_case_manifest_roundtrip(tmp_path):
    path = tmp_path / "cases.json"
    path.write_text(json.dumps([c.to_dict() for c in _cases()]))
    loaded = load_cases(path)
    assert [c.case_id for c in loaded] == ["c0", "c1"]
    assert loaded[0].gt_lines[1].bbox == BBox(40, 0, 50, 10)
    path.write_text("{}")
    with pytest.raises(ValueError):
        load_cases(path)


def test_stub_scorer():
    a = np.zeros((2, 2, 3))
    b = np.ones((2, 2, 3))
    s = StubScorer()
    assert s.score([a], [b]) == -1.0
    assert s.score([b]) == 1.0
