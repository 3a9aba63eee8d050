"""Report rendering: CSV / JSON / markdown tables plus PNG figures.

Scores arrive as fractions and are rendered as 2-decimal percentages.  All
output is deterministic: fixed column orders, fixed float formatting, and
figures saved without software/version stamps.
"""
import csv
import io
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import ConfigError
from .evaluation import REGION_NAMES, StabilityReport
from .phantoms import MODALITIES

FORMATS = ("csv", "json", "markdown-table")
_AGG_ROWS = ("avg", "std", "var", "min", "max")


def pct(value: float) -> str:
    return f"{100.0 * value:.2f}"


def pct_var(value: float) -> str:
    # variance of a percent-scaled score carries the square of the factor
    return f"{1e4 * value:.2f}"


def _agg_str(key: str, value: float) -> str:
    return pct_var(value) if key == "var" else pct(value)


def render_csv(report: StabilityReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["region", "combination"] + list(MODALITIES) + ["dice_pct"])
    for region in REGION_NAMES:
        for i, combo in enumerate(report.combos):
            writer.writerow([region, i + 1] + [int(v) for v in combo]
                            + [pct(report.per_combo[region][i])])
        for key in _AGG_ROWS:
            writer.writerow([region, key, "", "", "", "",
                             _agg_str(key, report.aggregate[region][key])])
    return buf.getvalue()


def render_json(report: StabilityReport) -> str:
    return report.to_json()


def render_markdown(report: StabilityReport) -> str:
    n = len(report.combos)
    head = [""] + [str(i + 1) for i in range(n)] + ["Avg"]
    lines = ["# Stability report", "",
             f"Cases: {report.n_cases}; combinations: {n}.", "",
             "| " + " | ".join(head) + " |",
             "|" + "---|" * len(head)]
    for m, name in enumerate(MODALITIES):
        marks = ["•" if combo[m] else "◦" for combo in report.combos]
        lines.append("| " + " | ".join([name] + marks + [""]) + " |")
    for region in REGION_NAMES:
        cells = [pct(v) for v in report.per_combo[region]]
        cells.append(pct(report.aggregate[region]["avg"]))
        lines.append("| " + " | ".join([region] + cells) + " |")
    lines += ["", "## Stability", "",
              "| Region | Min-Max | Mean±Std | Variance |",
              "|---|---|---|---|"]
    for region in REGION_NAMES:
        a = report.aggregate[region]
        lines.append(f"| {region} | {pct(a['min'])}-{pct(a['max'])} "
                     f"| {pct(a['avg'])}±{pct(a['std'])} | {pct_var(a['var'])} |")
    return "\n".join(lines) + "\n"


_RENDERERS = {"csv": render_csv, "json": render_json,
              "markdown-table": render_markdown}
_SUFFIX = {"csv": ".csv", "json": ".json", "markdown-table": ".md"}


def emit_report(report: StabilityReport, fmt: str, out_path) -> str:
    """Write one rendering of `report`; returns the path written."""
    if fmt not in _RENDERERS:
        raise ConfigError(f"unknown report format {fmt!r}; expected one of {FORMATS}")
    text = _RENDERERS[fmt](report)
    with open(out_path, "w", encoding="utf-8") as f:
        f.write(text)
    return str(out_path)


def _save(fig, path):
    # a None Software field keeps the PNG bytes free of version stamps
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def render_figures(report: StabilityReport, out_dir) -> list:
    """PNG figures alongside the delimited output; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    n = len(report.combos)
    xs = np.arange(1, n + 1)

    fig, ax = plt.subplots(figsize=(7.5, 3.5), dpi=110)
    for region, marker in zip(REGION_NAMES, ("o", "s", "^")):
        ax.plot(xs, [100.0 * v for v in report.per_combo[region]],
                marker=marker, linewidth=1.2, markersize=4, label=region)
    ax.set_xticks(xs)
    ax.set_xlabel("modality combination")
    ax.set_ylabel("Dice (%)")
    ax.set_title("Dice per modality combination")
    ax.legend(loc="best", fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    p = os.path.join(out_dir, "dice_combinations.png")
    _save(fig, p)
    paths.append(p)

    fig, ax = plt.subplots(figsize=(4.5, 3.2), dpi=110)
    stds = [100.0 * report.aggregate[r]["std"] for r in REGION_NAMES]
    ax.bar(REGION_NAMES, stds, color=("#4878d0", "#ee854a", "#6acc64"))
    ax.set_ylabel("std of Dice across combinations (%)")
    ax.set_title("Cross-combination stability")
    fig.tight_layout()
    p = os.path.join(out_dir, "stability_std.png")
    _save(fig, p)
    paths.append(p)
    return paths


def write_report_bundle(report: StabilityReport, out_dir, stem="report") -> dict:
    """All three renderings plus figures in one directory."""
    os.makedirs(out_dir, exist_ok=True)
    written = {}
    for fmt in FORMATS:
        path = os.path.join(out_dir, stem + _SUFFIX[fmt])
        written[fmt] = emit_report(report, fmt, path)
    written["figures"] = render_figures(report, out_dir)
    return written
