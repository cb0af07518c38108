"""Learning-curve plots as self-contained SVG.

One ``<polyline>`` per series: raw dev error and smoothed error share the
left axis, gamma uses a fixed [0, 1] axis on the right. Coordinates are
written with three decimals so the figure can be parsed back in tests.
"""

from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

from .errors import InputError
from .transfer import read_curve_csv

WIDTH, HEIGHT = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 64, 64, 32, 56
X0, X1 = LEFT, WIDTH - RIGHT
Y0, Y1 = TOP, HEIGHT - BOTTOM

SERIES = (
    ("error", "dev error", "#1f77b4", ""),
    ("smoothed", "smoothed error", "#ff7f0e", ""),
    ("gamma", "gamma (right axis)", "#2ca02c", ' stroke-dasharray="6 3"'),
)


def nice_step(span: float, target: int = 5) -> float:
    raw = span / target
    mag = 10 ** math.floor(math.log10(raw))
    for m in (1, 2, 5, 10):
        if raw <= m * mag:
            return m * mag
    return 10 * mag


def _ticks(lo: float, hi: float) -> list[float]:
    step = nice_step(hi - lo)
    first = math.ceil(lo / step - 1e-9) * step
    n = int(math.floor((hi - first) / step + 1e-9))
    return [first + i * step for i in range(n + 1)]


def _fmt(v: float) -> str:
    return f"{v:.3f}"


def _label(v: float) -> str:
    return f"{v:g}"


def render_svg(rows: list[dict]) -> str:
    """SVG text for curve rows as returned by ``read_curve_csv``."""
    if not rows:
        raise InputError("curve has no rows to plot")
    its = [r["iteration"] for r in rows]
    lo, hi = min(its), max(its)
    if lo == hi:
        lo, hi = lo - 1, hi + 1
    errs = [r["error"] for r in rows] + [r["smoothed"] for r in rows if r["smoothed"] is not None]
    top = max(errs)
    e_hi = math.ceil(top * 10 - 1e-9) / 10 if top > 0 else 0.1
    e_hi = max(e_hi, 0.1)

    def sx(it):
        return X0 + (it - lo) / (hi - lo) * (X1 - X0)

    def sy_err(e):
        return Y1 - e / e_hi * (Y1 - Y0)

    def sy_gamma(g):
        return Y1 - g * (Y1 - Y0)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
           "<title>learning curve</title>",
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<rect class="plot-area" x="{X0}" y="{Y0}" width="{X1 - X0}" height="{Y1 - Y0}" '
           f'fill="none" stroke="#444"/>']

    for t in _ticks(lo, hi):
        x = _fmt(sx(t))
        out.append(f'<line x1="{x}" y1="{Y1}" x2="{x}" y2="{Y1 + 4}" stroke="#444"/>')
        out.append(f'<text class="xtick" data-value="{_label(t)}" x="{x}" y="{Y1 + 16}" '
                   f'text-anchor="middle">{_label(t)}</text>')
    for t in _ticks(0.0, e_hi):
        y = _fmt(sy_err(t))
        out.append(f'<line x1="{X0 - 4}" y1="{y}" x2="{X0}" y2="{y}" stroke="#444"/>')
        out.append(f'<text class="ytick-left" x="{X0 - 6}" y="{y}" text-anchor="end" '
                   f'dominant-baseline="middle">{_label(round(t, 10))}</text>')
    for t in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = _fmt(sy_gamma(t))
        out.append(f'<line x1="{X1}" y1="{y}" x2="{X1 + 4}" y2="{y}" stroke="#444"/>')
        out.append(f'<text class="ytick-right" x="{X1 + 6}" y="{y}" '
                   f'dominant-baseline="middle">{_label(t)}</text>')
    out.append(f'<text x="{(X0 + X1) / 2}" y="{HEIGHT - 16}" text-anchor="middle">'
               f'iteration</text>')
    out.append(f'<text x="16" y="{(Y0 + Y1) / 2}" text-anchor="middle" '
               f'transform="rotate(-90 16 {(Y0 + Y1) / 2})">dev error</text>')
    out.append(f'<text x="{WIDTH - 12}" y="{(Y0 + Y1) / 2}" text-anchor="middle" '
               f'transform="rotate(90 {WIDTH - 12} {(Y0 + Y1) / 2})">gamma</text>')

    for key, _, colour, dash in SERIES:
        scale = sy_gamma if key == "gamma" else sy_err
        pts = " ".join(f"{_fmt(sx(r['iteration']))},{_fmt(scale(r[key]))}"
                       for r in rows if r[key] is not None)
        out.append(f'<polyline data-series="{key}" fill="none" stroke="{colour}" '
                   f'stroke-width="1.5"{dash} points="{pts}"/>')

    lx, ly = X1 - 150, Y0 + 8
    out.append(f'<rect class="legend" x="{lx - 6}" y="{ly - 6}" width="152" height="54" '
               f'fill="white" stroke="#999"/>')
    for i, (_, name, colour, dash) in enumerate(SERIES):
        y = ly + 6 + 16 * i
        out.append(f'<line x1="{lx}" y1="{y}" x2="{lx + 24}" y2="{y}" stroke="{colour}" '
                   f'stroke-width="1.5"{dash}/>')
        out.append(f'<text x="{lx + 30}" y="{y}" dominant-baseline="middle">'
                   f'{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plot(curve_csv, out_path) -> Path:
    """Render ``curve.csv`` to an SVG file; an empty curve is an InputError."""
    try:
        rows = read_curve_csv(curve_csv)
    except (KeyError, ValueError) as exc:
        raise InputError(f"{curve_csv}: not a curve file ({exc})") from exc
    if not rows:
        raise InputError(f"{curve_csv}: curve is empty")
    out_path = Path(out_path)
    out_path.write_text(render_svg(rows), encoding="utf-8")
    return out_path
