"""CSV, JSON and SVG outputs for run results."""
from __future__ import annotations

import csv
import json
from pathlib import Path
from xml.sax.saxutils import escape

CSV_COLUMNS = ("experiment_id", "kind", "variant", "cut", "metric", "value", "seed",
               "manifest_digest")

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
           "#7f7f7f", "#bcbd22", "#17becf")


def _open_for_write(path):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        return path.open("w", newline="")
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e


def emit_csv(result, path) -> None:
    """One row per (variant, cut, metric, seed), sorted so output is order-independent."""
    rows = result.sorted_rows() if result is not None else []
    with _open_for_write(path) as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([r.experiment_id, r.kind, r.variant, r.cut, r.metric, repr(r.value),
                        r.seed, r.manifest_digest])


def emit_json(result, path) -> None:
    doc = {
        "experiment_id": result.manifest.id,
        "kind": result.manifest.kind,
        "manifest_digest": result.manifest_digest,
        "passed": result.passed,
        "assertions": [a.__dict__ for a in result.assertions],
        "reports": {v: [r.to_dict() for r in reps] for v, reps in result.reports.items()},
        "wall_clock": result.wall_clock,
        "environment": result.environment,
    }
    with _open_for_write(path) as f:
        json.dump(doc, f, indent=2, sort_keys=True)


def _series(result, metric: str) -> dict[str, list[tuple[int, float]]]:
    acc: dict = {}
    for r in result.rows:
        if r.metric == metric and r.cut >= 0:
            acc.setdefault(r.variant, {}).setdefault(r.cut, []).append(r.value)
    return {v: sorted((c, sum(x) / len(x)) for c, x in pts.items()) for v, pts in acc.items()}


def emit_svg(result, path, metric: str | None = None, width: int = 640,
             height: int = 400) -> None:
    """Line chart of ``metric`` (default: penalty, else the first metric found) against cut,
    one polyline per variant."""
    if metric is None:
        metrics = [r.metric for r in result.rows if r.cut >= 0]
        metric = "penalty" if "penalty" in metrics else (metrics[0] if metrics else "penalty")
    series = _series(result, metric)
    left, right, top, bottom = 64, 150, 30, 50
    pw, ph = width - left - right, height - top - bottom
    pts = [p for s in series.values() for p in s]
    cuts = [c for c, _ in pts] or [0, 1]
    vals = [v for _, v in pts] or [0.0, 1.0]
    x0, x1 = min(cuts), max(max(cuts), min(cuts) + 1)
    y0, y1 = min(min(vals), 0.0), max(max(vals), 0.0)
    if y1 - y0 < 1e-9:
        y1 = y0 + 1.0

    def sx(c):
        return left + (c - x0) / (x1 - x0) * pw

    def sy(v):
        return top + (y1 - v) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
           f'<title>{escape(result.manifest.id)}: {escape(metric)} vs cut</title>',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for c in range(int(x0), int(x1) + 1):
        out.append(f'<text x="{sx(c):.1f}" y="{top + ph + 16}" text-anchor="middle">{c}</text>')
    for i in range(5):
        v = y0 + (y1 - y0) * i / 4
        out.append(f'<text x="{left - 6}" y="{sy(v) + 4:.1f}" text-anchor="end">{v:.3f}</text>')
    if y0 < 0 < y1:
        out.append(f'<line x1="{left}" y1="{sy(0):.1f}" x2="{left + pw}" y2="{sy(0):.1f}" '
                   'stroke="#999" stroke-dasharray="4 3"/>')
    out.append(f'<text x="{left + pw / 2}" y="{height - 10}" text-anchor="middle">cut index</text>')
    out.append(f'<text x="16" y="{top + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 16 {top + ph / 2})">{escape(metric)}</text>')
    for i, (variant, s) in enumerate(sorted(series.items())):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{sx(c):.1f},{sy(v):.1f}" for c, v in s)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        ly = top + 14 + 18 * i
        out.append(f'<line x1="{left + pw + 12}" y1="{ly - 4}" x2="{left + pw + 32}" '
                   f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 36}" y="{ly}">{escape(variant)}</text>')
    out.append("</svg>")
    with _open_for_write(path) as f:
        f.write("\n".join(out) + "\n")


def write_outputs(result, out_dir) -> dict:
    out_dir = Path(out_dir)
    paths = {"csv": out_dir / f"{result.manifest.id}.csv",
             "json": out_dir / f"{result.manifest.id}.json",
             "svg": out_dir / f"{result.manifest.id}.svg"}
    emit_csv(result, paths["csv"])
    emit_json(result, paths["json"])
    emit_svg(result, paths["svg"])
    return paths
