"""
Report rendering.

A Report is a titled table with a fixed column schema and free-text
notes. It renders as an aligned text table for people, as tab-separated
rows under a "#schema" header line, or as JSON.
"""

import json
import math
from collections import OrderedDict

from typing import Any, Dict, List, Optional, Sequence

from .utils import MvpError

FORMATS = ("table", "tsv", "json")


class ReportError(MvpError):
    """Exception raised when a report cannot be built or rendered."""


def escape_cell(value):
    # type: (str) -> str
    """Keep a cell on one TSV line."""
    return value.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n").replace("\r", "")


def format_value(value):
    # type: (Any) -> str
    if value is None:
        return "-"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if not math.isfinite(value):
            return str(value)
        return "{:.6g}".format(value)
    return str(value)


def _json_value(value):
    # type: (Any) -> Any
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if hasattr(value, "item") and not isinstance(value, (list, dict, str)):
        return _json_value(value.item())
    return value


class Report(object):
    """Rows of one report under a fixed column schema."""

    def __init__(self, title, columns, rows=None, notes=None):
        # type: (str, Sequence[str], Optional[List[Dict[str, Any]]], Optional[List[str]]) -> None
        self.title = title
        self.columns = list(columns)
        self.rows = []  # type: List[Dict[str, Any]]
        self.notes = list(notes or [])
        for row in rows or []:
            self.add_row(row)

    def add_row(self, row=None, **values):
        # type: (Optional[Dict[str, Any]], **Any) -> None
        """
        Append a row.

        Raises:
            ReportError: If the row names a column outside the schema.
        """
        merged = dict(row or {})
        merged.update(values)
        unknown = sorted(set(merged) - set(self.columns))
        if unknown:
            raise ReportError("report '{}' has no column(s) {}".format(self.title, ", ".join(unknown)))
        self.rows.append(OrderedDict((c, merged.get(c)) for c in self.columns))

    def add_note(self, note):
        # type: (str) -> None
        self.notes.append(note)

    def column(self, name):
        # type: (str) -> List[Any]
        return [row[name] for row in self.rows]

    def __len__(self):
        # type: () -> int
        return len(self.rows)

    def to_dict(self):
        # type: () -> Dict[str, Any]
        return OrderedDict([
            ("title", self.title),
            ("columns", self.columns),
            ("rows", [OrderedDict((k, _json_value(v)) for k, v in row.items()) for row in self.rows]),
            ("notes", self.notes),
        ])

    def __repr__(self):
        # type: () -> str
        return "Report({}, {} rows)".format(self.title, len(self.rows))


def render_table(report):
    # type: (Report) -> str
    cells = [[format_value(row[c]) for c in report.columns] for row in report.rows]
    widths = [len(c) for c in report.columns]
    for line in cells:
        widths = [max(w, len(v)) for w, v in zip(widths, line)]
    lines = [report.title, ""]
    lines.append("  ".join(c.ljust(w) for c, w in zip(report.columns, widths)).rstrip())
    lines.append("  ".join("-" * w for w in widths))
    for line in cells:
        lines.append("  ".join(v.ljust(w) for v, w in zip(line, widths)).rstrip())
    if not cells:
        lines.append("(no rows)")
    if report.notes:
        lines.append("")
        lines.extend("note: {}".format(n) for n in report.notes)
    return "\n".join(lines) + "\n"


def render_tsv(report):
    # type: (Report) -> str
    lines = ["#schema\t" + "\t".join(report.columns)]
    lines.extend("# {}".format(escape_cell(n)) for n in [report.title] + report.notes)
    for row in report.rows:
        lines.append("\t".join(escape_cell(format_value(row[c])) for c in report.columns))
    return "\n".join(lines) + "\n"


def render_json(report):
    # type: (Report) -> str
    return json.dumps(report.to_dict(), indent=2) + "\n"


def render(report, output_format="table"):
    # type: (Report, str) -> str
    """
    Raises:
        ReportError: On an unknown format.
    """
    if output_format == "table":
        return render_table(report)
    if output_format == "tsv":
        return render_tsv(report)
    if output_format == "json":
        return render_json(report)
    raise ReportError("unknown report format '{}' (supported: {})".format(output_format, ", ".join(FORMATS)))


def render_many(reports, output_format="table"):
    # type: (Sequence[Report], str) -> str
    """Several reports in one document; a JSON list for the json format."""
    if output_format == "json":
        return json.dumps([r.to_dict() for r in reports], indent=2) + "\n"
    return "\n".join(render(r, output_format) for r in reports)
