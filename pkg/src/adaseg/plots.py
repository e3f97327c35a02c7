"""Dependency-free SVG output for convergence curves and IoU heatmaps."""

from __future__ import annotations

from typing import Optional, Sequence

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")


def _f(x: float) -> str:
    return f"{x:.2f}"


def _panel(series, x0, y0, w, h, xlim, ylim, ticks=True) -> list[str]:
    (xa, xb), (ya, yb) = xlim, ylim
    sx = w / (xb - xa) if xb > xa else 0.0
    sy = h / (yb - ya) if yb > ya else 0.0

    def px(x):
        return x0 + (x - xa) * sx

    def py(y):
        return y0 + h - (y - ya) * sy

    out = [f'<rect x="{_f(x0)}" y="{_f(y0)}" width="{_f(w)}" height="{_f(h)}" fill="none" stroke="#000"/>']
    if ticks:
        for k in range(6):
            yv = ya + (yb - ya) * k / 5
            out.append(f'<text x="{_f(x0 - 6)}" y="{_f(py(yv) + 4)}" font-size="10" text-anchor="end">{yv:.1f}</text>')
            xv = xa + (xb - xa) * k / 5
            out.append(f'<text x="{_f(px(xv))}" y="{_f(y0 + h + 14)}" font-size="10" text-anchor="middle">{xv:.0f}</text>')
    for i, (_, pts) in enumerate(series):
        pts = [(x, y) for x, y in pts if xa <= x <= xb and y == y]
        if not pts:
            continue
        coords = " ".join(f"{_f(px(x))},{_f(py(min(max(y, ya), yb)))}" for x, y in pts)
        out.append(f'<polyline fill="none" stroke="{PALETTE[i % len(PALETTE)]}" stroke-width="1.5" points="{coords}"/>')
    return out


def convergence_svg(series: Sequence[tuple[str, list]], zoom: Optional[tuple[float, float]] = None,
                    ylabel: str = "DSC") -> str:
    """One polyline per ``(label, [(epoch, value), ...])``, x-sorted; optional zoom inset."""
    series = [(label, sorted(pts)) for label, pts in series]
    xs = [x for _, pts in series for x, _ in pts]
    ys = [y for _, pts in series for _, y in pts if y == y]
    xlim = (min(xs), max(xs)) if xs else (0, 1)
    ylim = (min(0.0, min(ys)) if ys else 0.0, max(100.0, max(ys)) if ys else 100.0)
    W, H = 720, 440
    x0, y0, w, h = 60, 30, 460, 360
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           '<rect width="100%" height="100%" fill="#fff"/>']
    out += _panel(series, x0, y0, w, h, xlim, ylim)
    out.append(f'<text x="{x0 + w / 2}" y="{H - 10}" font-size="12" text-anchor="middle">epoch</text>')
    out.append(f'<text x="16" y="{y0 + h / 2}" font-size="12" text-anchor="middle" '
               f'transform="rotate(-90 16 {y0 + h / 2})">{ylabel}</text>')
    for i, (label, _) in enumerate(series):
        ly = y0 + 10 + 18 * i
        color = PALETTE[i % len(PALETTE)]
        out.append(f'<line x1="540" y1="{ly}" x2="560" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="566" y="{ly + 4}" font-size="11">{_escape(label)}</text>')
    if zoom is not None:
        za, zb = zoom
        zy = [y for _, pts in series for x, y in pts if za <= x <= zb and y == y]
        zlim = (min(zy), max(zy)) if zy else ylim
        if zlim[1] <= zlim[0]:
            zlim = (zlim[0] - 1, zlim[1] + 1)
        out.append(f'<text x="540" y="{H - 190}" font-size="11">zoom {za:g}-{zb:g}</text>')
        out += _panel(series, 540, H - 180, 160, 130, (za, zb), zlim, ticks=False)
    out.append("</svg>")
    return "\n".join(out) + "\n"


def heatmap_svg(labels: Sequence[str], matrix) -> str:
    """Grid heatmap with one labelled cell per matrix entry (values in [0, 1])."""
    m = len(labels)
    cell, left, top = 60, 110, 110
    W, H = left + cell * m + 20, top + cell * m + 20
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           '<rect width="100%" height="100%" fill="#fff"/>']
    for i, label in enumerate(labels):
        out.append(f'<text x="{left - 6}" y="{top + cell * i + cell / 2 + 4}" font-size="11" '
                   f'text-anchor="end">{_escape(label)}</text>')
        cx = left + cell * i + cell / 2
        out.append(f'<text x="{cx}" y="{top - 8}" font-size="11" text-anchor="start" '
                   f'transform="rotate(-45 {cx} {top - 8})">{_escape(label)}</text>')
    for i in range(m):
        for j in range(m):
            v = float(matrix[i][j])
            shade = int(round(255 * (1 - max(0.0, min(1.0, v)))))
            fill = f"#{shade:02x}{shade:02x}ff"
            x, y = left + cell * j, top + cell * i
            out.append(f'<rect class="cell" x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{fill}" stroke="#000"/>')
            color = "#fff" if v > 0.6 else "#000"
            out.append(f'<text x="{x + cell / 2}" y="{y + cell / 2 + 4}" font-size="12" '
                       f'text-anchor="middle" fill="{color}">{v:.2f}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
