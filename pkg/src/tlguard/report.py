"""CSV, JSON and SVG output for experiment reports."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

from .experiment import CSV_COLUMNS, MetricsReport

PLOTTED = ("tpr", "reject_rate_targeted", "reject_rate_nontargeted", "residual_targeted", "residual_nontargeted")


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(round(v, 10))
    return str(v)


def csv_text(report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in report.rows:
        w.writerow([_cell(row.get(c)) for c in CSV_COLUMNS])
    return buf.getvalue()


def plot_sweep(report, path):
    """Line plot of the defended rates against the sweep axis."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = [r["axis_value"] for r in report.rows]
    numeric = all(isinstance(x, (int, float)) for x in xs)
    pos = xs if numeric else list(range(len(xs)))
    fig, ax = plt.subplots(figsize=(6, 4))
    for name in PLOTTED:
        ys = [r.get(name) for r in report.rows]
        if all(y is None or (isinstance(y, float) and math.isnan(y)) for y in ys):
            continue
        ax.plot(pos, [float("nan") if y is None else y for y in ys], marker="o", label=name)
    if not numeric:
        ax.set_xticks(pos, [str(x) for x in xs])
    ax.set_xlabel(report.axis)
    ax.set_ylabel("rate")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    # fixed metadata keeps repeated renders identical
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def emit_report(report, out_dir, formats=("csv", "json", "svg"), stem="report"):
    """Write ``<stem>.csv``, ``<stem>.json`` and ``<stem>.svg`` into ``out_dir``.

    Returns the paths written.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out}: {e}") from e
    written = []
    if "csv" in formats:
        p = out / f"{stem}.csv"
        p.write_text(csv_text(report))
        written.append(p)
    if "json" in formats:
        p = out / f"{stem}.json"
        p.write_text(report.to_json())
        written.append(p)
    if "svg" in formats and report.rows:
        p = out / f"{stem}.svg"
        plot_sweep(report, p)
        written.append(p)
    return written


def load_report(path):
    return MetricsReport.from_json(Path(path).read_text())


def write_records(records, path):
    Path(path).write_text(json.dumps(records, indent=1, sort_keys=True))
