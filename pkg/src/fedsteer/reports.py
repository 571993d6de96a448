"""CSV and SVG artifact writers.

Every CSV starts with comment lines naming the producing subcommand, the
config digest and the seed, so artifacts are traceable and pipeline runs
byte-reproducible (no timestamps).
"""
from __future__ import annotations

import csv
from pathlib import Path


def write_csv(path, columns, rows, subcommand: str, digest: str,
              seed="n/a") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# subcommand={subcommand}\n")
        fh.write(f"# config={digest}\n")
        fh.write(f"# seed={seed}\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow(_format_row(row))


def _format_row(row):
    out = []
    for value in row:
        if isinstance(value, float):
            out.append(f"{value:.6g}")
        else:
            out.append(value)
    return out


def read_csv(path) -> tuple[dict, list, list]:
    """Returns (header comments, column names, rows of strings)."""
    meta, columns, rows = {}, [], []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                meta[key.strip()] = val.strip()
                continue
            reader = csv.reader([line] + list(fh))
            parsed = list(reader)
            columns = parsed[0]
            rows = parsed[1:]
            break
    return meta, columns, rows


def svg_line_chart(path, series: dict, title: str, x_label: str,
                   y_label: str, width: int = 640, height: int = 400) -> None:
    """Tiny dependency-free multi-series line chart.

    ``series`` maps a legend name to a list of (x, y) pairs.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    margin = 60
    plot_w, plot_h = width - 2 * margin, height - 2 * margin
    points = [p for pts in series.values() for p in pts]
    if not points:
        raise ValueError("nothing to plot")
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    x_min, x_max = min(xs), max(xs)
    y_min, y_max = min(ys), max(ys)
    if x_max == x_min:
        x_max = x_min + 1
    if y_max == y_min:
        y_max = y_min + 1

    def sx(x):
        return margin + (x - x_min) / (x_max - x_min) * plot_w

    def sy(y):
        return height - margin - (y - y_min) / (y_max - y_min) * plot_h

    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
               "#8c564b", "#17becf", "#e377c2", "#7f7f7f", "#bcbd22"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" '
        f'font-size="15" font-family="sans-serif">{title}</text>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 12}" text-anchor="middle" '
        f'font-size="12" font-family="sans-serif">{x_label}</text>',
        f'<text x="16" y="{height / 2:.1f}" text-anchor="middle" '
        f'font-size="12" font-family="sans-serif" '
        f'transform="rotate(-90 16 {height / 2:.1f})">{y_label}</text>',
    ]
    for tick in range(5):
        y_val = y_min + (y_max - y_min) * tick / 4
        x_val = x_min + (x_max - x_min) * tick / 4
        parts.append(f'<text x="{margin - 6}" y="{sy(y_val) + 4:.1f}" '
                     f'text-anchor="end" font-size="10" '
                     f'font-family="sans-serif">{y_val:.4g}</text>')
        parts.append(f'<text x="{sx(x_val):.1f}" y="{height - margin + 16}" '
                     f'text-anchor="middle" font-size="10" '
                     f'font-family="sans-serif">{x_val:.4g}</text>')
    for i, (name, pts) in enumerate(series.items()):
        color = palette[i % len(palette)]
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in pts)
        parts.append(f'<polyline points="{coords}" fill="none" '
                     f'stroke="{color}" stroke-width="1.5"/>')
        ly = margin + 16 * i
        parts.append(f'<line x1="{width - margin - 110}" y1="{ly}" '
                     f'x2="{width - margin - 90}" y2="{ly}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{width - margin - 84}" y="{ly + 4}" '
                     f'font-size="11" font-family="sans-serif">{name}</text>')
    parts.append("</svg>")
    path.write_text("\n".join(parts))
