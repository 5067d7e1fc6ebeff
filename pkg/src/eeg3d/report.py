"""Plain-text result tables and their parser.

Layout, one record per line, fields separated by `` | ``::

    layout | ablation_table
    target | ground truth
    columns | 2-way Top-1 | 10-way Top-1 | ... | LPIPS
    row | GWIT | Full architecture | 0.946 0.854 0.906 0.763 0.822 0.648 17.195 153.295 0.783
    row | GWIT | Direct image-to-3D | 0.946 0.836 ...
    row | GWIT | Gain/loss | 0.000 +0.018 ... -30.271 -0.025
    failures | 1
    failure | c003_t0001 | reason | output failed validation after 3 attempts
    meta | nway_trials | 20

Every value prints with three decimals; ``n/a`` marks a value that could not
be computed. Difference rows are derived from the already rounded values, so
a printed delta always equals the difference of the printed numbers; an exact
zero prints unsigned. For FID and LPIPS lower is better, so a negative delta
there is a gain.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Mapping, Sequence

LAYOUTS = ("gt_table", "intermediate_table", "ablation_table")
METRICS = ("top1_2way", "top1_10way", "top2_10way", "top1_50way", "top2_50way", "clip", "is", "fid", "lpips")
COLUMNS = ("2-way Top-1", "10-way Top-1", "10-way Top-2", "50-way Top-1", "50-way Top-2",
           "CLIPScore", "IS", "FID", "LPIPS")
LOWER_IS_BETTER = frozenset({"fid", "lpips"})
NWAY_COLUMNS = {"top1_2way": (2, 1), "top1_10way": (10, 1), "top2_10way": (10, 2),
                "top1_50way": (50, 1), "top2_50way": (50, 2)}

FULL = "Full architecture"
DIRECT = "Direct image-to-3D"
GAIN = "Gain/loss"
GAIN_VS_GT = "Gain vs ground truth"
SETTING_OF_MODE = {"full": FULL, "direct": DIRECT}
TARGETS = {"gt_table": "ground truth", "intermediate_table": "intermediate decoded image",
           "ablation_table": "ground truth"}
SEP = " | "
NA = "n/a"


class ReportError(ValueError):
    pass


def _q(x: float) -> Decimal:
    """Three decimals, half away from zero, applied to the shortest repr of x."""
    return Decimal(repr(float(x))).quantize(Decimal("0.001"), rounding=ROUND_HALF_UP)


def fmt_value(x: float | None) -> str:
    return NA if x is None else f"{_q(x):.3f}"


def fmt_delta(d: Decimal | None) -> str:
    if d is None:
        return NA
    if d == 0:
        return "0.000"
    return f"{d:+.3f}"


def rounded_delta(a: float | None, b: float | None) -> Decimal | None:
    """a - b on the three-decimal values as printed."""
    if a is None or b is None:
        return None
    return _q(a) - _q(b)


@dataclass
class Row:
    backbone: str
    setting: str
    values: tuple  # floats or None, one per metric; Decimal for difference rows
    derived: bool = False


@dataclass
class Report:
    layout: str
    rows: list[Row]
    failures: list[tuple[str, str, str]] = field(default_factory=list)
    meta: dict[str, str] = field(default_factory=dict)

    def row(self, backbone: str, setting: str) -> Row:
        for r in self.rows:
            if r.backbone == backbone and r.setting == setting:
                return r
        raise KeyError((backbone, setting))


def _values(scores: Mapping[str, float | None]) -> tuple:
    missing = [m for m in METRICS if m not in scores]
    if missing:
        raise ReportError(f"scores missing metrics {missing}")
    return tuple(None if scores[m] is None else float(scores[m]) for m in METRICS)


def _check_name(name: str, what: str) -> None:
    if not name or "\n" in name or "|" in name or name != name.strip():
        raise ReportError(f"{what} {name!r} must be non-empty, single-line, trimmed and free of '|'")


def gt_report(rows: Sequence[tuple[str, str, Mapping[str, float | None]]], failures=(), meta=None) -> Report:
    """One row per (backbone, setting) scored against the ground-truth stimuli."""
    return Report("gt_table", [Row(b, s, _values(v)) for b, s, v in rows], list(failures), dict(meta or {}))


def intermediate_report(rows: Sequence[tuple[str, str, Mapping[str, float | None], Mapping[str, float | None]]],
                        failures=(), meta=None) -> Report:
    """Scores against the decoded images, each followed by its gain over the ground-truth scores.

    ``rows`` holds (backbone, setting, vs_intermediate, vs_ground_truth).
    """
    out = []
    for b, s, inter, gt in rows:
        vi, vg = _values(inter), _values(gt)
        out.append(Row(b, s, vi))
        out.append(Row(b, GAIN_VS_GT, tuple(rounded_delta(x, y) for x, y in zip(vi, vg)), derived=True))
    return Report("intermediate_table", out, list(failures), dict(meta or {}))


def ablation_report(blocks: Sequence[tuple[str, Mapping[str, float | None], Mapping[str, float | None]]],
                    failures=(), meta=None) -> Report:
    """Per backbone: full pipeline, direct lifting, and full minus direct."""
    out = []
    for b, full, direct in blocks:
        vf, vd = _values(full), _values(direct)
        out.append(Row(b, FULL, vf))
        out.append(Row(b, DIRECT, vd))
        out.append(Row(b, GAIN, tuple(rounded_delta(x, y) for x, y in zip(vf, vd)), derived=True))
    return Report("ablation_table", out, list(failures), dict(meta or {}))


def render_report(report: Report, layout: str | None = None) -> str:
    layout = layout or report.layout
    if layout not in LAYOUTS:
        raise ReportError(f"unknown layout {layout!r}")
    if layout != report.layout:
        raise ReportError(f"report was built for {report.layout}, not {layout}")
    if not report.rows:
        raise ReportError("report has no rows")
    lines = [SEP.join(("layout", layout)), SEP.join(("target", TARGETS[layout])), SEP.join(("columns",) + COLUMNS)]
    for r in report.rows:
        _check_name(r.backbone, "backbone")
        _check_name(r.setting, "setting")
        if len(r.values) != len(METRICS):
            raise ReportError(f"row {r.backbone}/{r.setting} has {len(r.values)} values")
        cells = [fmt_delta(v) if r.derived else fmt_value(v) for v in r.values]
        lines.append(SEP.join(("row", r.backbone, r.setting, " ".join(cells))))
    lines.append(SEP.join(("failures", str(len(report.failures)))))
    for trial_id, stage, message in report.failures:
        lines.append(SEP.join(("failure", trial_id, stage, " ".join(str(message).split()))))
    for key in sorted(report.meta):
        lines.append(SEP.join(("meta", key, " ".join(str(report.meta[key]).split()))))
    return "\n".join(lines) + "\n"


def _parse_cell(cell: str, derived: bool):
    if cell == NA:
        return None
    try:
        return Decimal(cell) if derived else float(cell)
    except (ArithmeticError, ValueError):
        raise ReportError(f"bad numeric cell {cell!r}") from None


DERIVED_SETTINGS = (GAIN, GAIN_VS_GT)


def parse_report(text: str) -> Report:
    lines = text.splitlines()
    if len(lines) < 4:
        raise ReportError("report is truncated")
    head = [line.split(SEP) for line in lines[:3]]
    if head[0][0] != "layout" or len(head[0]) != 2 or head[0][1] not in LAYOUTS:
        raise ReportError("first line must name a known layout")
    if head[2] != ["columns", *COLUMNS]:
        raise ReportError("unexpected column header")
    report = Report(head[0][1], [])
    expected_failures = None
    for lineno, line in enumerate(lines[3:], start=4):
        parts = line.split(SEP)
        kind = parts[0]
        if kind == "row" and len(parts) == 4:
            derived = parts[2] in DERIVED_SETTINGS
            cells = parts[3].split(" ")
            if len(cells) != len(METRICS):
                raise ReportError(f"line {lineno}: expected {len(METRICS)} values, got {len(cells)}")
            report.rows.append(Row(parts[1], parts[2], tuple(_parse_cell(c, derived) for c in cells), derived))
        elif kind == "failures" and len(parts) == 2:
            expected_failures = int(parts[1])
        elif kind == "failure" and len(parts) >= 4:
            report.failures.append((parts[1], parts[2], SEP.join(parts[3:])))
        elif kind == "meta" and len(parts) >= 3:
            report.meta[parts[1]] = SEP.join(parts[2:])
        else:
            raise ReportError(f"line {lineno}: unrecognized record {line!r}")
    if not report.rows:
        raise ReportError("report has no rows")
    if expected_failures != len(report.failures):
        raise ReportError(f"failure count {expected_failures} disagrees with {len(report.failures)} listed")
    return report
