"""Reliability diagrams rendered to deterministic SVG with matplotlib.

Each bar carries an ``id`` attribute holding its numbers: count, mean
confidence, accuracy, and the rendered heights (in points) of the bar top
and of the diagonal at the bin's mean confidence. Golden-file tests can
diff the values without parsing path geometry.
"""

from __future__ import annotations

import re
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

from matplotlib.backends.backend_svg import FigureCanvasSVG  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

from ..calibration import BinSummary  # noqa: E402

BAR_COLOR = "#3b6ea8"
GAP_COLOR = "#d95f5f"
DIAG_WIDTH = 1.0

_RC = {
    "svg.hashsalt": "calibrl",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "path.simplify": False,
}


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def render_reliability_svg(
    bins: Sequence[BinSummary],
    histogram: Sequence[int],
    path: str | Path,
    title: str = "",
    ece: float | None = None,
) -> Path:
    """Reliability diagram (top) with the confidence histogram (bottom)."""
    path = Path(path)
    with matplotlib.rc_context(_RC):
        fig = Figure(figsize=(3.6, 4.6), dpi=72)  # 1 px == 1 pt in the SVG
        FigureCanvasSVG(fig)
        ax, hax = fig.subplots(2, 1, gridspec_kw={"height_ratios": [3, 1.2]})
        fig.subplots_adjust(left=0.17, right=0.96, top=0.92, bottom=0.1, hspace=0.45)

        diag = ax.plot([0, 1], [0, 1], color="0.35", linestyle="--", linewidth=DIAG_WIDTH)[0]
        diag.set_gid("diagonal")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        ax.set_xlabel("confidence")
        ax.set_ylabel("accuracy")
        label = title if ece is None else f"{title}  ECE={100 * ece:.2f}"
        ax.set_title(label)

        bars = []
        for b in bins:
            lo, hi = b.lo, b.hi
            width = max(hi - lo, 0.01)
            left = min(lo, 1.0 - width)
            rect = ax.bar(left, b.accuracy, width=width, align="edge", color=BAR_COLOR,
                          edgecolor="white", linewidth=0.4)[0]
            gap = ax.bar(left, b.confidence - b.accuracy, bottom=b.accuracy, width=width,
                         align="edge", color=GAP_COLOR, alpha=0.35, linewidth=0)[0]
            bars.append((b, rect, gap, left + width / 2))

        hax.bar([i / len(histogram) for i in range(len(histogram))], histogram,
                width=1 / len(histogram), align="edge", color="0.45", edgecolor="white", linewidth=0.3)
        for i, patch in enumerate(hax.patches):
            patch.set_gid(f"hist{i}_count{int(histogram[i])}")
        hax.set_xlim(0, 1)
        hax.set_xlabel("confidence")
        hax.set_ylabel("count")

        # pixel geometry is only final once the layout is fixed
        to_px = ax.transData
        for b, rect, gap, centre in bars:
            top_px = to_px.transform((centre, b.accuracy))[1]
            diag_px = to_px.transform((b.confidence, b.confidence))[1]
            rect.set_gid(
                f"bin{b.index}_count{b.count}_conf{_fmt(b.confidence)}_acc{_fmt(b.accuracy)}"
                f"_center{_fmt(centre)}_toppx{_fmt(top_px)}_diagpx{_fmt(diag_px)}"
            )
            gap.set_gid(f"gap{b.index}")

        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, format="svg", metadata={"Date": None})
    return path


def parse_bar_ids(svg_text: str) -> list[dict]:
    """Recover the per-bin numbers embedded in a rendered SVG."""
    pat = re.compile(
        r'id="bin(\d+)_count(\d+)_conf([-\d.]+)_acc([-\d.]+)_center([-\d.]+)_toppx([-\d.]+)_diagpx([-\d.]+)"'
    )
    out = []
    for m in pat.finditer(svg_text):
        out.append(
            dict(
                index=int(m.group(1)), count=int(m.group(2)), confidence=float(m.group(3)),
                accuracy=float(m.group(4)), center=float(m.group(5)),
                top_px=float(m.group(6)), diag_px=float(m.group(7)),
            )
        )
    return out


def parse_histogram_ids(svg_text: str) -> list[int]:
    return [int(c) for _, c in re.findall(r'id="hist(\d+)_count(\d+)"', svg_text)]
