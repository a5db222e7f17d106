"""Plain SVG line charts (no plotting dependency)."""

from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def curve_svg(curves, title="", xlabel="deletion area a", ylabel="mean similarity ratio", width=640, height=400):
    """Render ``{name: (xs, ys)}`` as one polyline per entry.

    Coordinates are written with fixed precision so identical inputs give
    byte-identical files.
    """
    left, right, top, bottom = 60, 170, 30, 50
    pw, ph = width - left - right, height - top - bottom
    xs_all = [float(v) for xs, _ in curves.values() for v in xs]
    ys_all = [float(v) for _, ys in curves.values() for v in ys]
    x_max = max(xs_all) if xs_all else 1.0
    x_max = x_max if x_max > 0 else 1.0
    y_max = max(1.0, max(ys_all) if ys_all else 1.0)
    y_min = min(0.0, min(ys_all) if ys_all else 0.0)

    def sx(v):
        return left + pw * float(v) / x_max

    def sy(v):
        return top + ph * (1 - (float(v) - y_min) / (y_max - y_min))

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{left}" y="18" font-family="sans-serif" font-size="13">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for k in range(6):
        xv = x_max * k / 5
        yv = y_min + (y_max - y_min) * k / 5
        out.append(
            f'<text x="{sx(xv):.2f}" y="{top + ph + 16}" font-family="sans-serif" font-size="10" '
            f'text-anchor="middle">{xv:.3g}</text>'
        )
        out.append(
            f'<text x="{left - 6}" y="{sy(yv) + 3:.2f}" font-family="sans-serif" font-size="10" '
            f'text-anchor="end">{yv:.2f}</text>'
        )
    out.append(
        f'<text x="{left + pw / 2:.1f}" y="{height - 12}" font-family="sans-serif" font-size="11" '
        f'text-anchor="middle">{escape(xlabel)}</text>'
    )
    out.append(
        f'<text x="14" y="{top + ph / 2:.1f}" font-family="sans-serif" font-size="11" text-anchor="middle" '
        f'transform="rotate(-90 14 {top + ph / 2:.1f})">{escape(ylabel)}</text>'
    )
    for i, (name, (xs, ys)) in enumerate(sorted(curves.items())):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{sx(x):.3f},{sy(y):.3f}" for x, y in zip(xs, ys))
        out.append(f'<polyline data-name="{escape(name)}" fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = top + 14 + 18 * i
        out.append(f'<line x1="{left + pw + 12}" y1="{ly}" x2="{left + pw + 32}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 36}" y="{ly + 4}" font-family="sans-serif" font-size="11">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
