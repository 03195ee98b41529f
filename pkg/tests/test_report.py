import json

import pytest

from src.report import Report, ReportError, render, render_many


def sample():
    report = Report("costs", ["n", "strategy", "ratio"], notes=["modeled"])
    report.add_row(n=100, strategy="single pass", ratio=1.0)
    report.add_row({"n": 5, "strategy": "a\tb"})
    return report


def test_unknown_column_is_rejected():
    with pytest.raises(ReportError):
        sample().add_row(colour="red")


def test_missing_cells_render_as_dash():
    text = render(sample(), "table")
    assert text.startswith("costs\n")
    assert "note: modeled" in text
    assert text.splitlines()[-3].split()[-1] == "-"


def test_tsv_has_schema_line_and_escapes_tabs():
    lines = render(sample(), "tsv").splitlines()
    assert lines[0] == "#schema\tn\tstrategy\tratio"
    assert lines[-1] == "5\ta\\tb\t-"


def test_json_round_trips():
    data = json.loads(render(sample(), "json"))
    assert data["rows"][0] == {"n": 100, "strategy": "single pass", "ratio": 1.0}
    assert data["rows"][1]["ratio"] is None
    assert json.loads(render_many([sample(), sample()], "json"))[1]["title"] == "costs"


def test_empty_report_says_so():
    assert "(no rows)" in render(Report("empty", ["a"]), "table")


def test_unknown_format_is_rejected():
    with pytest.raises(ReportError):
        render(sample(), "xml")
