"""File formats: canonical JSON, point CSVs, trajectory CSVs and minimal SVG plots.

Floats are written with 17 significant digits so that a value read back is
bit-identical to the one written, and dictionaries are emitted with sorted
keys. Two runs that compute the same numbers therefore produce the same
bytes, which lets reproducibility tests compare files directly.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import ValidationError

FLOAT_FORMAT = ".17g"


class InputError(ValidationError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, message: str, path: str | Path | None = None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


def format_float(x: float) -> str:
    x = float(x)
    if not math.isfinite(x):
        raise ValidationError(f"cannot serialize non-finite value {x}")
    if x == 0.0:
        return "0.0"  # folds -0.0 so sign noise does not change the bytes
    s = format(x, FLOAT_FORMAT)
    if "e" not in s and "." not in s and "n" not in s:
        s += ".0"
    return s


def _encode(obj: Any, out: list[str]) -> None:
    if obj is None:
        out.append("null")
    elif obj is True:
        out.append("true")
    elif obj is False:
        out.append("false")
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(format_float(obj))
    elif isinstance(obj, str):
        out.append(json.dumps(obj, ensure_ascii=False))
    elif isinstance(obj, dict):
        keys = sorted(obj, key=str)
        out.append("{")
        for n, k in enumerate(keys):
            if n:
                out.append(",")
            out.append(json.dumps(str(k), ensure_ascii=False))
            out.append(":")
            _encode(obj[k], out)
        out.append("}")
    elif isinstance(obj, (list, tuple, np.ndarray)):
        seq = obj.tolist() if isinstance(obj, np.ndarray) else obj
        out.append("[")
        for n, v in enumerate(seq):
            if n:
                out.append(",")
            _encode(v, out)
        out.append("]")
    else:
        raise ValidationError(f"cannot serialize {type(obj).__name__}")


def dumps_canonical(obj: Any) -> str:
    """Serialize ``obj`` with sorted keys, no whitespace and round-trip floats."""
    out: list[str] = []
    _encode(obj, out)
    return "".join(out)


def write_json(path: str | Path, obj: Any) -> None:
    Path(path).write_text(dumps_canonical(obj) + "\n", encoding="utf-8")


def read_json(path: str | Path) -> Any:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read file ({exc.strerror})", p) from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"invalid JSON: {exc.msg}", p, exc.lineno) from exc


# ---------------------------------------------------------------------------
# CSV


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def read_points_csv(path: str | Path) -> tuple[np.ndarray, list[str] | None]:
    """Read an ``(n, d)`` point cloud; a non-numeric first row is taken as the header.

    Blank lines are skipped. Errors report the offending line number.
    """
    p = Path(path)
    try:
        fh = p.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read file ({exc.strerror})", p) from exc
    header = None
    rows: list[list[float]] = []
    width = None
    with fh:
        for lineno, raw in enumerate(csv.reader(fh), start=1):
            cells = [c.strip() for c in raw]
            if not cells or all(c == "" for c in cells):
                continue
            if header is None and not rows and not all(_is_number(c) for c in cells):
                header = cells
                width = len(cells)
                continue
            if width is not None and len(cells) != width:
                raise InputError(f"expected {width} columns, found {len(cells)}", p, lineno)
            width = len(cells)
            try:
                vals = [float(c) for c in cells]
            except ValueError:
                bad = next(c for c in cells if not _is_number(c))
                raise InputError(f"non-numeric value {bad!r}", p, lineno) from None
            if not all(math.isfinite(v) for v in vals):
                raise InputError("non-finite value", p, lineno)
            rows.append(vals)
    if not rows:
        raise InputError("no data rows", p)
    return np.array(rows, dtype=float), header


def read_points(path: str | Path) -> np.ndarray:
    return read_points_csv(path)[0]


def _fmt_row(values: Iterable[float]) -> list[str]:
    return [format_float(v) for v in values]


def write_points_csv(path: str | Path, points: np.ndarray, header: Sequence[str] | None = None) -> None:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if header is None:
        header = [f"x_{j}" for j in range(pts.shape[1])]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in pts:
            w.writerow(_fmt_row(row))


def write_table_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """Rows of numbers (``None`` becomes an empty cell)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(["" if v is None else format_float(v) for v in row])


def write_trajectory_csv(
    path: str | Path, times: np.ndarray, states: np.ndarray, columns: Sequence[str] | None = None
) -> None:
    """Long-format trajectories: one row per (time, particle) with columns ``t, particle_id, x_0, ...``.

    ``columns`` overrides the state column names (phase-space runs use ``x_j`` then ``v_j``).
    """
    times = np.asarray(times, dtype=float)
    states = np.asarray(states, dtype=float)
    if states.ndim != 3 or states.shape[0] != times.size:
        raise ValidationError("states must be (frames, particles, dim) matching the time grid")
    d = states.shape[2]
    names = list(columns) if columns is not None else [f"x_{j}" for j in range(d)]
    if len(names) != d:
        raise ValidationError("one column name per state coordinate required")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "particle_id"] + names)
        for f, t in enumerate(times):
            tf = format_float(t)
            for i, row in enumerate(states[f]):
                w.writerow([tf, str(i)] + _fmt_row(row))


def read_trajectory_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`write_trajectory_csv`; returns ``(times, states)``."""
    data, header = read_points_csv(path)
    if header is None or header[:2] != ["t", "particle_id"]:
        raise InputError("missing trajectory header 't,particle_id,...'", path)
    times = np.unique(data[:, 0])
    n = int(data[:, 1].max()) + 1
    if data.shape[0] != times.size * n:
        raise InputError("trajectory rows do not form a full (time, particle) grid", path)
    states = data[:, 2:].reshape(times.size, n, -1)
    return times, states


# ---------------------------------------------------------------------------
# SVG

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")


class _Frame:
    """Maps data coordinates into a plotting box."""

    def __init__(self, xs: np.ndarray, ys: np.ndarray, box: tuple[float, float, float, float]):
        self.x0, self.y0, self.w, self.h = box
        lo_x, hi_x = float(np.min(xs)), float(np.max(xs))
        lo_y, hi_y = float(np.min(ys)), float(np.max(ys))
        pad_x = 0.05 * (hi_x - lo_x) or 1.0
        pad_y = 0.05 * (hi_y - lo_y) or 1.0
        self.lo_x, self.hi_x = lo_x - pad_x, hi_x + pad_x
        self.lo_y, self.hi_y = lo_y - pad_y, hi_y + pad_y

    def px(self, x):
        return self.x0 + (np.asarray(x) - self.lo_x) / (self.hi_x - self.lo_x) * self.w

    def py(self, y):
        return self.y0 + self.h - (np.asarray(y) - self.lo_y) / (self.hi_y - self.lo_y) * self.h

    def axes(self, title: str, xlabel: str, ylabel: str) -> list[str]:
        x0, y0, w, h = self.x0, self.y0, self.w, self.h
        return [
            f'<rect x="{x0:.1f}" y="{y0:.1f}" width="{w:.1f}" height="{h:.1f}" fill="none" stroke="#444"/>',
            f'<text x="{x0 + w / 2:.1f}" y="{y0 - 8:.1f}" text-anchor="middle" font-size="13">{_esc(title)}</text>',
            f'<text x="{x0 + w / 2:.1f}" y="{y0 + h + 32:.1f}" text-anchor="middle" font-size="11">{_esc(xlabel)}</text>',
            f'<text x="{x0 - 40:.1f}" y="{y0 + h / 2:.1f}" text-anchor="middle" font-size="11" '
            f'transform="rotate(-90 {x0 - 40:.1f} {y0 + h / 2:.1f})">{_esc(ylabel)}</text>',
            f'<text x="{x0:.1f}" y="{y0 + h + 15:.1f}" font-size="9">{self.lo_x:.3g}</text>',
            f'<text x="{x0 + w:.1f}" y="{y0 + h + 15:.1f}" text-anchor="end" font-size="9">{self.hi_x:.3g}</text>',
            f'<text x="{x0 - 4:.1f}" y="{y0 + h:.1f}" text-anchor="end" font-size="9">{self.lo_y:.3g}</text>',
            f'<text x="{x0 - 4:.1f}" y="{y0 + 9:.1f}" text-anchor="end" font-size="9">{self.hi_y:.3g}</text>',
        ]


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _document(width: int, height: int, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">')
    return "\n".join([head, '<rect width="100%" height="100%" fill="white"/>', *body, "</svg>"]) + "\n"


def _first_two(points: np.ndarray, what: str) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[-1] > 2:
        warnings.warn(f"{what} has dimension {pts.shape[-1]}; plotting the first two coordinates", stacklevel=3)
    if pts.shape[-1] == 1:
        return np.concatenate([pts, np.zeros_like(pts)], axis=-1)
    return pts[..., :2]


def trajectory_svg(
    path: str | Path,
    states: np.ndarray,
    title: str = "trajectories",
    max_paths: int = 64,
    size: int = 520,
) -> None:
    """Scatter of start and end points with a subset of particle paths.

    ``states`` is ``(frames, particles, dim)``; only the first two coordinates are drawn.
    """
    st = _first_two(np.asarray(states, dtype=float), "trajectory")
    if st.ndim != 3:
        raise ValidationError("states must be (frames, particles, dim)")
    m = 50
    fr = _Frame(st[..., 0].ravel(), st[..., 1].ravel(), (m, m, size - 2 * m, size - 2 * m))
    body = fr.axes(title, "x_0", "x_1")
    step = max(1, st.shape[1] // max_paths)
    for i in range(0, st.shape[1], step):
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(fr.px(st[:, i, 0]), fr.py(st[:, i, 1])))
        body.append(f'<polyline points="{pts}" fill="none" stroke="#999" stroke-width="0.6" opacity="0.6"/>')
    for frame, color in ((0, _PALETTE[0]), (-1, _PALETTE[1])):
        for a, b in zip(fr.px(st[frame, :, 0]), fr.py(st[frame, :, 1])):
            body.append(f'<circle cx="{a:.2f}" cy="{b:.2f}" r="1.6" fill="{color}" opacity="0.7"/>')
    _write_svg(path, _document(size, size, body))


def line_panels_svg(
    path: str | Path,
    panels: Sequence[dict],
    xlabel: str,
    ylabel: str,
    panel_size: int = 360,
) -> None:
    """Side-by-side line plots.

    Each panel is ``{"title": str, "x": array, "series": {label: array-or-None}}``.
    Series containing ``None`` entries skip those points.
    """
    m = 60
    width = m + len(panels) * (panel_size + m)
    height = panel_size + 2 * m
    body: list[str] = []
    for p_idx, panel in enumerate(panels):
        x = np.asarray(panel["x"], dtype=float)
        series = {k: np.array([np.nan if v is None else v for v in vals], dtype=float)
                  for k, vals in panel["series"].items()}
        ys = np.concatenate([v[np.isfinite(v)] for v in series.values()] or [np.zeros(1)])
        fr = _Frame(x, ys if ys.size else np.zeros(1), (m + p_idx * (panel_size + m), m, panel_size, panel_size))
        body += fr.axes(panel["title"], xlabel, ylabel)
        for s_idx, (label, y) in enumerate(series.items()):
            ok = np.isfinite(y)
            if not ok.any():
                continue
            color = _PALETTE[s_idx % len(_PALETTE)]
            pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(fr.px(x[ok]), fr.py(y[ok])))
            dash = ' stroke-dasharray="5,3"' if s_idx % 2 else ""
            body.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.6"{dash}/>')
            lx, ly = fr.x0 + 8, fr.y0 + 16 + 14 * s_idx
            body.append(f'<line x1="{lx:.1f}" y1="{ly - 4:.1f}" x2="{lx + 18:.1f}" y2="{ly - 4:.1f}" '
                        f'stroke="{color}" stroke-width="1.6"{dash}/>')
            body.append(f'<text x="{lx + 22:.1f}" y="{ly:.1f}" font-size="10">{_esc(label)}</text>')
    _write_svg(path, _document(width, height, body))


def _write_svg(path: str | Path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")
