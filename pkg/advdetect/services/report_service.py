"""CSV tables and static SVG charts for experiment outputs."""
import csv
import io
import logging
import math
import pathlib
from collections.abc import Iterable, Sequence
from html import escape

from advdetect.models.results import RocCurve

logger = logging.getLogger(__name__)

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#17becf", "#8c564b", "#e377c2")

WIDTH, HEIGHT = 640, 440
MARGIN_LEFT, MARGIN_RIGHT, MARGIN_TOP, MARGIN_BOTTOM = 64, 150, 40, 56


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------
def format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return f"{value:.10g}"
    if hasattr(value, "value"):
        return str(value.value)
    return str(value)


def csv_text(header: Sequence[str], rows: Iterable[Sequence], seed: int, config_sha256: str) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_value(v) for v in row])
    buf.write(f"# seed={seed} config_sha256={config_sha256}\n")
    return buf.getvalue()


def write_csv(
    path: str | pathlib.Path,
    header: Sequence[str],
    rows: Iterable[Sequence],
    seed: int,
    config_sha256: str,
) -> pathlib.Path:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(csv_text(header, rows, seed, config_sha256).encode("utf-8"))
    logger.info("Wrote %s", path)
    return path


def read_csv_rows(path: str | pathlib.Path) -> list[dict[str, str]]:
    """Rows of a CSV written by write_csv, footer comment skipped."""
    lines = [line for line in pathlib.Path(path).read_text(encoding="utf-8").splitlines() if not line.startswith("#")]
    return list(csv.DictReader(lines))


# ---------------------------------------------------------------------------
# SVG
# ---------------------------------------------------------------------------
def _scale(value: float, lo: float, hi: float, out_lo: float, out_hi: float) -> float:
    if hi == lo:
        return (out_lo + out_hi) / 2.0
    return out_lo + (value - lo) / (hi - lo) * (out_hi - out_lo)


def _ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / count for i in range(count + 1)]


def line_chart_svg(
    title: str,
    x_label: str,
    y_label: str,
    series: dict[str, tuple[Sequence[float], Sequence[float]]],
    x_range: tuple[float, float] | None = None,
    y_range: tuple[float, float] | None = None,
    diagonal: bool = False,
    markers: bool = True,
) -> str:
    xs_all = [float(v) for xs, _ in series.values() for v in xs if math.isfinite(v)]
    ys_all = [float(v) for _, ys in series.values() for v in ys if math.isfinite(v)]
    x_lo, x_hi = x_range or (min(xs_all, default=0.0), max(xs_all, default=1.0))
    y_lo, y_hi = y_range or (min(ys_all, default=0.0), max(ys_all, default=1.0))

    left, right = MARGIN_LEFT, WIDTH - MARGIN_RIGHT
    top, bottom = MARGIN_TOP, HEIGHT - MARGIN_BOTTOM

    def px(x: float) -> float:
        return _scale(x, x_lo, x_hi, left, right)

    def py(y: float) -> float:
        return _scale(y, y_lo, y_hi, bottom, top)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{(left + right) / 2:.1f}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{escape(title)}</text>',
        f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>',
    ]
    for tick in _ticks(x_lo, x_hi):
        x = px(tick)
        parts.append(f'<line x1="{x:.1f}" y1="{bottom}" x2="{x:.1f}" y2="{bottom + 5}" stroke="black"/>')
        parts.append(
            f'<text x="{x:.1f}" y="{bottom + 18}" text-anchor="middle" font-family="sans-serif" font-size="11">{tick:.3g}</text>'
        )
    for tick in _ticks(y_lo, y_hi):
        y = py(tick)
        parts.append(f'<line x1="{left - 5}" y1="{y:.1f}" x2="{left}" y2="{y:.1f}" stroke="black"/>')
        parts.append(
            f'<text x="{left - 8}" y="{y + 4:.1f}" text-anchor="end" font-family="sans-serif" font-size="11">{tick:.3g}</text>'
        )
    parts.append(
        f'<text x="{(left + right) / 2:.1f}" y="{HEIGHT - 14}" text-anchor="middle" font-family="sans-serif" font-size="13">{escape(x_label)}</text>'
    )
    parts.append(
        f'<text x="16" y="{(top + bottom) / 2:.1f}" text-anchor="middle" font-family="sans-serif" font-size="13" '
        f'transform="rotate(-90 16 {(top + bottom) / 2:.1f})">{escape(y_label)}</text>'
    )
    if diagonal:
        parts.append(
            f'<line x1="{px(x_lo):.1f}" y1="{py(y_lo):.1f}" x2="{px(x_hi):.1f}" y2="{py(y_hi):.1f}" '
            'stroke="#999999" stroke-dasharray="4 4"/>'
        )

    for i, (name, (xs, ys)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        points = [(px(float(x)), py(float(y))) for x, y in zip(xs, ys) if math.isfinite(x) and math.isfinite(y)]
        if points:
            coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in points)
            parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
            if markers:
                parts.extend(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="2.5" fill="{color}"/>' for x, y in points)
        ly = top + 16 * i + 8
        parts.append(f'<line x1="{right + 12}" y1="{ly}" x2="{right + 32}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        parts.append(
            f'<text x="{right + 38}" y="{ly + 4}" font-family="sans-serif" font-size="12">{escape(name)}</text>'
        )

    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def roc_svg(title: str, curves: dict[str, RocCurve]) -> str:
    series = {f"{name} ({curve.auc:.3f})": (curve.fpr.tolist(), curve.tpr.tolist()) for name, curve in curves.items()}
    return line_chart_svg(
        title, "false positive rate", "true positive rate", series,
        x_range=(0.0, 1.0), y_range=(0.0, 1.0), diagonal=True, markers=False,
    )


def roc_rows(curves: dict[str, RocCurve]) -> list[tuple]:
    return [
        (name, float(threshold), float(fpr), float(tpr))
        for name, curve in curves.items()
        for threshold, fpr, tpr in zip(curve.thresholds, curve.fpr, curve.tpr)
    ]


def write_svg(path: str | pathlib.Path, svg: str) -> pathlib.Path:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(svg.encode("utf-8"))
    logger.info("Wrote %s", path)
    return path
