"""SVG plots of benchmark reports (needs the optional matplotlib extra)."""

from __future__ import annotations

from pathlib import Path

from .report import BenchReport

# experiment -> (x column, y column, series column, log-scale x)
PLOTS = {
    "appel-li": ("variant", "per_op_ns", "flush_mode", False),
    "memops": ("buffer_bytes", "map_per_page_ns", "page_size", True),
    "gups": ("table_bytes", "miss_ratio", "page_size", True),
    "gc-tracking": ("round", "invocations", "tracker", False),
    "coloring": ("config", "small_hit_ratio", None, False),
    "pager": ("resident", "faults", "pattern", True),
}


def plot_report(report: BenchReport, path: str | Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    x, y, series, logx = PLOTS[report.name]
    groups: dict[object, list[dict]] = {}
    for row in report.rows:
        groups.setdefault(row.get(series) if series else y, []).append(row)
    categorical = any(isinstance(r[x], str) for r in report.rows)
    cats = list(dict.fromkeys(r[x] for r in report.rows)) if categorical else []
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for key, rows in groups.items():
        xs = [cats.index(r[x]) if categorical else r[x] for r in rows]
        ax.plot(xs, [r[y] for r in rows], marker="o", label=str(key))
    if categorical:
        ax.set_xticks(range(len(cats)), cats, rotation=20)
    elif logx:
        ax.set_xscale("log", base=2)
    ax.set_xlabel(x)
    ax.set_ylabel(y)
    ax.set_title(report.name)
    if series:
        ax.legend(title=series)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
