"""CSV, SVG and PGM writers for analysis output.

SVGs are hand-built so that the bytes depend only on the input values. Line
charts carry their axis mapping as ``data-*`` attributes on the plot group, which
lets :func:`read_svg_series` invert polyline coordinates back into values.
"""

from __future__ import annotations

import csv
import xml.etree.ElementTree as ET
from pathlib import Path
from xml.sax.saxutils import escape, quoteattr

import numpy as np

from .analysis import FrameAttentionSummary, SimilarityReport

SIMILARITY_COLUMNS = ["step", "layer", "frame_pair", "similarity"]
ATTENTION_COLUMNS = ["step", "layer", "query_frame", "key_block", "mass"]
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"]
SVG_NS = "http://www.w3.org/2000/svg"


def _writer(fh):
    return csv.writer(fh, lineterminator="\r\n")


def write_similarity_csv(report: SimilarityReport, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = _writer(fh)
        w.writerow(SIMILARITY_COLUMNS)
        for step, layer, pair, value in report.rows():
            w.writerow([step, layer, pair, repr(value)])
    return path


def read_similarity_csv(path) -> list[tuple[int, int, int, float]]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != SIMILARITY_COLUMNS:
            raise ValueError(f"unexpected similarity CSV header {header}")
        return [(int(s), int(l), int(p), float(v)) for s, l, p, v in reader]


def write_attention_csv(summaries: list[FrameAttentionSummary], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = _writer(fh)
        w.writerow(ATTENTION_COLUMNS)
        for summ in summaries:
            F = summ.masses.shape[0]
            for q in range(F):
                for k, v in enumerate(summ.masses[q]):
                    block = "text" if k == 0 else f"frame{k - 1}"
                    w.writerow([summ.step, summ.layer, q, block, repr(float(v))])
    return path


def write_rows_csv(path, header: list[str], rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = _writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def read_rows_csv(path) -> tuple[list[str], list[list[str]]]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [row for row in reader]


# ---------------------------------------------------------------------------
# SVG


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def svg_line_chart(xs, series: dict[str, list[float]], title: str, xlabel: str = "layer",
                   ylabel: str = "similarity", width: int = 640, height: int = 400) -> str:
    """Polyline chart, one series per key, x positions shared."""
    xs = [float(x) for x in xs]
    left, right, top, bottom = 70.0, 20.0, 40.0, 50.0
    pw, ph = width - left - right, height - top - bottom
    values = [v for vals in series.values() for v in vals]
    lo, hi = (min(values), max(values)) if values else (0.0, 1.0)
    pad = 0.05 * (hi - lo) if hi > lo else 0.05
    ymin, ymax = lo - pad, hi + pad
    xmin, xmax = (min(xs), max(xs)) if xs else (0.0, 1.0)
    if xmax == xmin:
        xmin, xmax = xmin - 1.0, xmax + 1.0

    def px(x):
        return left + pw * (x - xmin) / (xmax - xmin)

    def py(y):
        return top + ph * (1.0 - (y - ymin) / (ymax - ymin))

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="{SVG_NS}" version="1.1" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f"<title>{escape(title)}</title>",
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" font-size="15">{escape(title)}</text>',
        f'<g id="plot" data-left="{_fmt(left)}" data-top="{_fmt(top)}" data-width="{_fmt(pw)}" '
        f'data-height="{_fmt(ph)}" data-xmin="{xmin!r}" data-xmax="{xmax!r}" data-ymin="{ymin!r}" data-ymax="{ymax!r}">',
        f'<line x1="{_fmt(left)}" y1="{_fmt(top + ph)}" x2="{_fmt(left + pw)}" y2="{_fmt(top + ph)}" stroke="black"/>',
        f'<line x1="{_fmt(left)}" y1="{_fmt(top)}" x2="{_fmt(left)}" y2="{_fmt(top + ph)}" stroke="black"/>',
    ]
    for x in xs:
        out.append(f'<text x="{_fmt(px(x))}" y="{_fmt(top + ph + 18)}" text-anchor="middle" font-size="11">{x:g}</text>')
    for k in range(5):
        y = ymin + (ymax - ymin) * k / 4
        out.append(f'<text x="{_fmt(left - 6)}" y="{_fmt(py(y) + 4)}" text-anchor="end" font-size="11">{y:.4f}</text>')
    out.append(f'<text x="{_fmt(left + pw / 2)}" y="{height - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{_fmt(top + ph / 2)}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 16 {_fmt(top + ph / 2)})">{escape(ylabel)}</text>')
    for i, (label, vals) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{_fmt(px(x))},{_fmt(py(v))}" for x, v in zip(xs, vals))
        annotated = " ".join(repr(float(v)) for v in vals)
        out.append(f'<polyline class="series" data-label={quoteattr(label)} data-values="{annotated}" '
                   f'fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        ly = top + 14 * i
        out.append(f'<text x="{_fmt(left + pw - 4)}" y="{_fmt(ly + 10)}" text-anchor="end" font-size="11" '
                   f'fill="{color}">{escape(label)}</text>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def read_svg_series(svg: str) -> dict[str, list[tuple[float, float]]]:
    """Invert every polyline of a :func:`svg_line_chart` back to ``(x, value)`` pairs."""
    root = ET.fromstring(svg)
    plot = root.find(f".//{{{SVG_NS}}}g[@id='plot']")
    a = {k[5:]: float(v) for k, v in plot.attrib.items() if k.startswith("data-")}
    result = {}
    for line in plot.findall(f"{{{SVG_NS}}}polyline"):
        pairs = []
        for pt in line.attrib["points"].split():
            x, y = (float(c) for c in pt.split(","))
            xv = a["xmin"] + (x - a["left"]) / a["width"] * (a["xmax"] - a["xmin"])
            yv = a["ymin"] + (a["top"] + a["height"] - y) / a["height"] * (a["ymax"] - a["ymin"])
            pairs.append((xv, yv))
        result[line.attrib["data-label"]] = pairs
    return result


def svg_heatmap(matrix, title: str, row_labels=None, col_labels=None, cell: int = 28) -> str:
    """Grayscale grid, black at the matrix minimum and white at its maximum."""
    m = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    rows, cols = m.shape
    left, top = 70, 40
    width, height = left + cols * cell + 20, top + rows * cell + 30
    lo, hi = float(m.min()), float(m.max())
    span = hi - lo if hi > lo else 1.0
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="{SVG_NS}" version="1.1" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f"<title>{escape(title)}</title>",
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<g id="heatmap" data-rows="{rows}" data-cols="{cols}" data-min="{lo!r}" data-max="{hi!r}">',
    ]
    for r in range(rows):
        for c in range(cols):
            level = int(round(255 * (m[r, c] - lo) / span))
            out.append(f'<rect x="{left + c * cell}" y="{top + r * cell}" width="{cell}" height="{cell}" '
                       f'fill="rgb({level},{level},{level})" data-value="{float(m[r, c])!r}"/>')
    for r, label in enumerate(row_labels or []):
        out.append(f'<text x="{left - 6}" y="{top + r * cell + cell / 2 + 4:.1f}" text-anchor="end" '
                   f'font-size="10">{escape(str(label))}</text>')
    for c, label in enumerate(col_labels or []):
        out.append(f'<text x="{left + c * cell + cell / 2:.1f}" y="{top + rows * cell + 14}" text-anchor="middle" '
                   f'font-size="10">{escape(str(label))}</text>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.write_text(text, encoding="utf-8", newline="\n")
    return path


# ---------------------------------------------------------------------------
# PGM


def pgm_strip(clip: np.ndarray) -> bytes:
    """Binary PGM (P5) with the frames of an ``(F, G, G)`` clip side by side.

    Values in ``[-1, 1]`` map linearly onto ``0..255``; anything outside is clipped.
    """
    clip = np.asarray(clip, dtype=np.float64)
    F, G, W = clip.shape
    strip = np.concatenate(list(clip), axis=1)
    pixels = np.clip(np.rint((strip + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return f"P5\n{F * W} {G}\n255\n".encode("ascii") + pixels.tobytes()


def read_pgm(blob: bytes) -> np.ndarray:
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
