"""The ``report`` step: re-derive summaries from raw rows, then draw figures."""
from __future__ import annotations

import json
import math
from pathlib import Path

from .. import __version__
from .io import read_csv, sha256
from .plots import bar_svg
from .suites import summarize


class ReportMismatch(RuntimeError):
    pass


def _num(text: str) -> float:
    return math.nan if text in ("", "nan") else float(text)


def _parse_rows(rows: list) -> list:
    out = []
    for r in rows:
        d = dict(r)
        for k in ("precision", "recall", "rouge_l", "distance", "defense_param"):
            d[k] = _num(d[k])
        d["q1"] = int(d["q1"])
        out.append(d)
    return out


def _same(a: float, b: float, tol: float = 1e-12) -> bool:
    if math.isnan(a) and math.isnan(b):
        return True
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


def cross_check(suite_dir: Path) -> dict:
    """Compare ``summary.csv`` with a fresh summary of ``results.csv``."""
    raw = _parse_rows(read_csv(suite_dir / "results.csv"))
    written = read_csv(suite_dir / "summary.csv")
    fresh = summarize(raw)
    problems = []
    if len(fresh) != len(written):
        problems.append(f"{len(written)} summary rows, expected {len(fresh)}")
    for w, f in zip(written, fresh):
        for key, val in f.items():
            if key in ("defense",):
                ok = w[key] == val
            else:
                ok = _same(_num(w[key]), float(val))
            if not ok:
                problems.append(f"{w['defense']}@{w['defense_param']} q1={w['q1']}: {key} "
                                f"{w[key]} != {val!r}")
    return {"suite": suite_dir.name, "rows": len(raw), "cells": len(fresh), "ok": not problems,
            "problems": problems}


def _figures(out_dir: Path, fig_dir: Path) -> list:
    figs = []
    grid = out_dir / "defense_grid" / "summary.csv"
    if grid.is_file():
        rows = read_csv(grid)
        kinds = [k for k in dict.fromkeys(r["defense"] for r in rows) if k != "none"]
        per = {k: [r for r in rows if r["defense"] == k] for k in kinds}
        n = max((len(v) for v in per.values()), default=0)
        series = {k: [float(r["rouge_l_mean"]) for r in v] for k, v in per.items() if len(v) == n}
        if series:
            figs.append(bar_svg(fig_dir / "defense_grid.svg", [f"level {i + 1}" for i in range(n)],
                                series, "Attack ROUGE-L by defense level", "mean ROUGE-L"))
    q1 = out_dir / "q1_ablation" / "summary.csv"
    if q1.is_file():
        rows = read_csv(q1)
        figs.append(bar_svg(fig_dir / "q1_ablation.svg", [f"Q1={r['q1']}" for r in rows],
                            {"recall": [float(r["recall_mean"]) for r in rows]},
                            "Attack recall by split point", "mean recall (%)"))
    paf = out_dir / "paf" / "paf.csv"
    if paf.is_file():
        rows = read_csv(paf)
        figs.append(bar_svg(fig_dir / "paf.svg", [r["layer"] for r in rows],
                            {"mean PAF": [float(r["mean_paf"]) for r in rows],
                             "Max-PAF": [float(r["max_paf"]) for r in rows]},
                            "Layer sensitivity", "amplification"))
    by = out_dir / "bypass" / "bypass.csv"
    if by.is_file():
        rows = read_csv(by)
        figs.append(bar_svg(fig_dir / "bypass.svg", [r["layer"] for r in rows],
                            {"ROUGE-L without layer": [float(r["rouge_l"]) for r in rows]},
                            "Attack quality with one layer bypassed", "mean ROUGE-L"))
    tm = out_dir / "timing" / "timing.csv"
    if tm.is_file():
        rows = read_csv(tm)
        figs.append(bar_svg(fig_dir / "timing.svg",
                            [f"{r['defense']} r={float(r['protected_ratio']):g}" for r in rows],
                            {"s / 1k tokens": [float(r["seconds_per_1k_tokens_mean"]) for r in rows]},
                            "Client-side defense cost", "seconds per 1k tokens"))
    return figs


def build_report(out_dir) -> dict:
    out_dir = Path(out_dir)
    if not out_dir.is_dir():
        raise FileNotFoundError(f"no results directory at {out_dir}")
    fig_dir = out_dir / "report"
    fig_dir.mkdir(exist_ok=True)
    checks = [cross_check(d) for d in sorted(out_dir.iterdir())
              if (d / "results.csv").is_file() and (d / "summary.csv").is_file()]
    figs = _figures(out_dir, fig_dir)
    report = {"artifact_version": __version__, "checks": checks,
              "ok": all(c["ok"] for c in checks),
              "figures": [p.name for p in figs]}
    rpath = fig_dir / "report.json"
    rpath.write_text(json.dumps(report, indent=2) + "\n")
    manifest = {"files": {p.name: sha256(p) for p in figs + [rpath]}}
    (fig_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if not report["ok"]:
        raise ReportMismatch("; ".join(p for c in checks for p in c["problems"]))
    return report
