"""Bar-chart SVGs with machine-readable bars.

Each bar rectangle carries a ``gid`` of the form
``bar|<series>|<label>|<value>`` (parts URL-quoted), which matplotlib
writes out as the id of the bar's group. :func:`read_bar_svg` parses those
ids back, so a figure can be checked against the CSV it was drawn from.
"""
from __future__ import annotations

import xml.etree.ElementTree as ET
from pathlib import Path
from urllib.parse import quote, unquote

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_RC = {"svg.hashsalt": "splitleak", "svg.fonttype": "none"}


def bar_svg(path, labels, series: dict, title: str, ylabel: str) -> Path:
    """Grouped bars: one group per label, one bar per series entry."""
    labels = [str(l) for l in labels]
    names = list(series)
    width = 0.8 / max(len(names), 1)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(max(6.0, 0.6 * len(labels) * max(len(names), 1)), 4.0))
        for k, name in enumerate(names):
            values = [float(v) for v in series[name]]
            xs = [i + (k - (len(names) - 1) / 2) * width for i in range(len(labels))]
            bars = ax.bar(xs, values, width=width, label=name)
            for rect, lab, val in zip(bars, labels, values):
                rect.set_gid("bar|" + "|".join(quote(s, safe="") for s in (name, lab, repr(val))))
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        if len(names) > 1:
            ax.legend(fontsize=8)
        fig.tight_layout()
        path = Path(path)
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path


def read_bar_svg(path) -> dict:
    """``{series: [(label, value), ...]}`` recovered from a :func:`bar_svg` file."""
    tree = ET.parse(path)
    out: dict = {}
    for el in tree.iter():
        gid = el.get("id", "")
        if not gid.startswith("bar|"):
            continue
        _, name, lab, val = gid.split("|")
        out.setdefault(unquote(name), []).append((unquote(lab), float(unquote(val))))
    return out
