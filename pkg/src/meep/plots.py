"""Static SVG reliability diagrams and probability histograms.

The markup is written by hand so the package needs no plotting library. Every
bar carries ``data-*`` attributes holding the exact numbers it was drawn from,
which lets tests read the data back without parsing geometry.
"""

from __future__ import annotations

import re
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .metrics import CalibrationReport

W, H = 320, 320
PAD = 40
PLOT = W - 2 * PAD


def _x(v: float) -> float:
    return PAD + v * PLOT


def _y(v: float) -> float:
    return H - PAD - v * PLOT


def _svg(title: str, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">\n'
            f'<title>{escape(title)}</title>\n'
            f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>\n'
            f'<text x="{W / 2}" y="20" text-anchor="middle" font-family="sans-serif" font-size="13">{escape(title)}</text>\n')
    axes = (f'<line x1="{_x(0)}" y1="{_y(0)}" x2="{_x(1)}" y2="{_y(0)}" stroke="black"/>\n'
            f'<line x1="{_x(0)}" y1="{_y(0)}" x2="{_x(0)}" y2="{_y(1)}" stroke="black"/>\n')
    ticks = "".join(
        f'<text x="{_x(t):.1f}" y="{_y(0) + 14:.1f}" text-anchor="middle" font-family="sans-serif" font-size="10">{t:g}</text>\n'
        for t in (0, 0.5, 1))
    return head + axes + ticks + "".join(body) + "</svg>\n"


def reliability_svg(name: str, report: CalibrationReport) -> str:
    """Accuracy per confidence bin as bars, with the identity diagonal."""
    bins = report.bins
    edges = bins.edges()
    body = [f'<line class="diagonal" x1="{_x(0)}" y1="{_y(0)}" x2="{_x(1)}" y2="{_y(1)}" '
            f'stroke="gray" stroke-dasharray="4 3"/>\n']
    for m in range(bins.n_bins):
        lo, hi = float(edges[m]), float(edges[m + 1])
        acc = float(bins.accuracy[m]) if bins.counts[m] else 0.0
        conf = float(bins.mean_confidence[m]) if bins.counts[m] else 0.0
        body.append(
            f'<rect class="bar" data-bin="{m}" data-count="{int(bins.counts[m])}" data-confidence="{conf!r}" '
            f'data-accuracy="{acc!r}" x="{_x(lo):.2f}" y="{_y(acc):.2f}" width="{(hi - lo) * PLOT:.2f}" '
            f'height="{acc * PLOT:.2f}" fill="steelblue" stroke="white"/>\n')
    body.append(f'<text x="{W / 2}" y="{H - 8}" text-anchor="middle" font-family="sans-serif" font-size="11">'
                f'confidence (ECE {report.ece:.4f})</text>\n')
    return _svg(f"reliability: {name}", body)


def histogram_svg(name: str, counts: np.ndarray) -> str:
    """Foreground-probability histogram on a log-scaled count axis."""
    counts = np.asarray(counts, dtype=np.int64)
    n = counts.size
    top = np.log1p(counts.max()) if counts.size and counts.max() > 0 else 1.0
    body = []
    for i, c in enumerate(counts):
        h = np.log1p(c) / top
        body.append(
            f'<rect class="bar" data-bin="{i}" data-count="{int(c)}" x="{_x(i / n):.2f}" y="{_y(h):.2f}" '
            f'width="{PLOT / n:.2f}" height="{h * PLOT:.2f}" fill="darkorange" stroke="white"/>\n')
    body.append(f'<text x="{W / 2}" y="{H - 8}" text-anchor="middle" font-family="sans-serif" font-size="11">'
                f'foreground probability (log counts)</text>\n')
    return _svg(f"histogram: {name}", body)


def read_bars(svg: str) -> list[dict[str, str]]:
    """The ``data-*`` attributes of every bar, in drawing order."""
    return [dict(re.findall(r'data-([a-z]+)="([^"]*)"', tag)) for tag in re.findall(r'<rect class="bar"[^>]*>', svg)]


def safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.+@-]", "_", name)


def render_reports(records, outdir) -> list[Path]:
    """Write ``reliability_<model>.svg``, ``hist_<model>.svg`` and ``results.csv`` for ``records``."""
    from .runner import results_csv

    if not records:
        raise ValueError("no records to render")
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for rec in records:
        report = rec.pooled_report()
        if report is None:
            continue
        name = safe_name(rec.name)
        for fname, text in ((f"reliability_{name}.svg", reliability_svg(rec.name, report)),
                            (f"hist_{name}.svg", histogram_svg(rec.name, report.prob_histogram))):
            (out / fname).write_text(text)
            written.append(out / fname)
    (out / "results.csv").write_text(results_csv(records))
    written.append(out / "results.csv")
    return written
