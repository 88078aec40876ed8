"""Rate-distortion figures: estimated points over reference curves and bounds.

Output is deterministic: a fixed SVG hash salt, no date stamp, and the
non-interactive Agg backend.
"""
from __future__ import annotations

import io
import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import ConfigurationError  # noqa: E402
from .results import atomic_write  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.6),
    "font.size": 9,
    "axes.linewidth": 0.6,
    "axes.grid": True,
    "grid.linewidth": 0.3,
    "grid.alpha": 0.5,
    "legend.frameon": False,
    "svg.hashsalt": "irdf",
    "svg.fonttype": "path",
}
MARKERS = ("o", "s", "^", "D", "v", "P")


def _series(rows: Sequence[dict], units: str):
    key = "R_hat_bits" if units == "bits" else "R_hat_nats"
    pts = [(r["D_hat"], r[key]) for r in rows
           if r.get("status", "ok") == "ok" and math.isfinite(r["D_hat"]) and math.isfinite(r[key])]
    pts.sort()
    return [p[0] for p in pts], [p[1] for p in pts]


def render_curves(series: Sequence[tuple[str, Sequence[dict]]], units: str = "bits", title: str | None = None) -> bytes:
    """SVG bytes for a list of ``(label, rows)``.

    Rows whose ``source`` starts with ``oracle:`` or ``bound:`` are drawn as
    lines; everything else as markers.
    """
    if not series:
        raise ConfigurationError("nothing to plot")
    if units not in ("bits", "nats"):
        raise ConfigurationError(f"units must be bits or nats, not {units!r}")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        marker = 0
        for label, rows in series:
            D, R = _series(rows, units)
            if not D:
                continue
            source = str(rows[0].get("source", ""))
            if source.startswith(("oracle:", "bound:")):
                style = "--" if source.startswith("bound:") else "-"
                ax.plot(D, R, style, lw=1.2, label=label)
            else:
                ax.plot(D, R, MARKERS[marker % len(MARKERS)], ms=4, mfc="none", label=label)
                marker += 1
        ax.set_xlabel("distortion D")
        ax.set_ylabel(f"rate R ({units})")
        ax.set_ylim(bottom=0)
        if title:
            ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        buf = io.BytesIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
        plt.close(fig)
    return buf.getvalue()


def save_curves(path, series, units: str = "bits", title: str | None = None) -> Path:
    return atomic_write(path, render_curves(series, units, title))
