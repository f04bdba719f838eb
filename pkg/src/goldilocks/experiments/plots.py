"""Deterministic SVG line and grid plots from result CSVs.

Outputs contain no timestamps or random ids, and every number is printed at a
fixed precision, so identical inputs give byte-identical files.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .records import read_csv

WIDTH, HEIGHT = 480, 320
MARGIN = dict(left=64, right=120, top=32, bottom=48)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def _f(v: float) -> str:
    return f"{v:.2f}"


def _ticks(lo, hi, log):
    if log:
        a, b = math.floor(math.log10(lo)), math.ceil(math.log10(hi))
        return [10.0 ** k for k in range(a, b + 1) if lo * (1 - 1e-9) <= 10.0 ** k <= hi * (1 + 1e-9)]
    if hi == lo:
        return [lo]
    step = 10 ** math.floor(math.log10((hi - lo) / 4))
    for m in (1, 2, 5, 10):
        if (hi - lo) / (m * step) <= 6:
            step *= m
            break
    first = math.ceil(lo / step) * step
    return [first + i * step for i in range(int((hi - first) / step + 1e-9) + 1)]


def _label(v, log):
    if log:
        return f"1e{int(round(math.log10(v)))}"
    return f"{v:.3g}"


class _Axes:
    def __init__(self, xs, ys, logx, logy):
        self.logx, self.logy = logx, logy
        self.x0, self.x1 = self._range(xs, logx)
        self.y0, self.y1 = self._range(ys, logy)
        self.pw = WIDTH - MARGIN["left"] - MARGIN["right"]
        self.ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    @staticmethod
    def _range(vals, log):
        vals = np.asarray([v for v in vals if np.isfinite(v) and (v > 0 or not log)], dtype=float)
        if vals.size == 0:
            return (1.0, 10.0) if log else (0.0, 1.0)
        lo, hi = float(vals.min()), float(vals.max())
        if lo == hi:
            lo, hi = (lo / 2, hi * 2) if log else (lo - 0.5, hi + 0.5)
        return lo, hi

    def _t(self, v, lo, hi, log):
        if log:
            v, lo, hi = math.log10(v), math.log10(lo), math.log10(hi)
        return (v - lo) / (hi - lo)

    def px(self, x):
        return MARGIN["left"] + self._t(x, self.x0, self.x1, self.logx) * self.pw

    def py(self, y):
        return MARGIN["top"] + (1 - self._t(y, self.y0, self.y1, self.logy)) * self.ph

    def frame(self, xlabel, ylabel):
        L, T = MARGIN["left"], MARGIN["top"]
        out = [f'<rect x="{L}" y="{T}" width="{self.pw}" height="{self.ph}" fill="none" stroke="#000"/>']
        for t in _ticks(self.x0, self.x1, self.logx):
            x = _f(self.px(t))
            out.append(f'<line x1="{x}" y1="{T + self.ph}" x2="{x}" y2="{T + self.ph + 4}" stroke="#000"/>')
            out.append(f'<text x="{x}" y="{T + self.ph + 16}" text-anchor="middle">{_label(t, self.logx)}</text>')
        for t in _ticks(self.y0, self.y1, self.logy):
            y = _f(self.py(t))
            out.append(f'<line x1="{L - 4}" y1="{y}" x2="{L}" y2="{y}" stroke="#000"/>')
            out.append(f'<text x="{L - 6}" y="{y}" text-anchor="end" dominant-baseline="middle">'
                       f'{_label(t, self.logy)}</text>')
        out.append(f'<text x="{_f(L + self.pw / 2)}" y="{HEIGHT - 10}" text-anchor="middle">{escape(xlabel)}</text>')
        out.append(f'<text x="14" y="{_f(T + self.ph / 2)}" text-anchor="middle" '
                   f'transform="rotate(-90 14 {_f(T + self.ph / 2)})">{escape(ylabel)}</text>')
        return out


def _document(body, title):
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">')
    return "\n".join([head, f'<text x="{WIDTH // 2}" y="18" text-anchor="middle" font-size="13">'
                      f'{escape(title)}</text>', *body, "</svg>"]) + "\n"


def line_plot(series: dict, title="", xlabel="", ylabel="", logx=False, logy=False, markers=False) -> str:
    """``series`` maps a legend label to ``(x, y)``; points are drawn in x order."""
    clean = {}
    for name, (x, y) in series.items():
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        keep = np.isfinite(x) & np.isfinite(y)
        if logx:
            keep &= x > 0
        if logy:
            keep &= y > 0
        order = np.argsort(x[keep], kind="stable")
        if keep.any():
            clean[name] = (x[keep][order], y[keep][order])
    allx = np.concatenate([v[0] for v in clean.values()]) if clean else []
    ally = np.concatenate([v[1] for v in clean.values()]) if clean else []
    ax = _Axes(allx, ally, logx, logy)
    body = ax.frame(xlabel, ylabel)
    if not clean:
        body.append(f'<text x="{_f(MARGIN["left"] + ax.pw / 2)}" y="{_f(MARGIN["top"] + ax.ph / 2)}" '
                    f'text-anchor="middle" fill="#777">no data</text>')
    for k, (name, (x, y)) in enumerate(clean.items()):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{_f(ax.px(a))},{_f(ax.py(b))}" for a, b in zip(x, y))
        if markers:
            body += [f'<circle cx="{_f(ax.px(a))}" cy="{_f(ax.py(b))}" r="2.5" fill="{color}"/>' for a, b in zip(x, y)]
        else:
            body.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = MARGIN["top"] + 12 + 16 * k
        lx = WIDTH - MARGIN["right"] + 10
        body.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 16}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        body.append(f'<text x="{lx + 20}" y="{ly}" dominant-baseline="middle">{escape(str(name))}</text>')
    return _document(body, title)


def grid_plot(rows, cols, values, title="", xlabel="", ylabel="", vmin=0.0, vmax=1.0) -> str:
    """Cell map of ``values[i][j]`` (rows along y, columns along x); ``None`` cells are hatched grey."""
    L, T = MARGIN["left"], MARGIN["top"]
    pw = WIDTH - L - MARGIN["right"]
    ph = HEIGHT - T - MARGIN["bottom"]
    body = [f'<rect x="{L}" y="{T}" width="{pw}" height="{ph}" fill="none" stroke="#000"/>']
    if not rows or not cols:
        body.append(f'<text x="{_f(L + pw / 2)}" y="{_f(T + ph / 2)}" text-anchor="middle" fill="#777">no data</text>')
        return _document(body, title)
    cw, ch = pw / len(cols), ph / len(rows)
    for i, r in enumerate(rows):
        y = T + ph - (i + 1) * ch
        body.append(f'<text x="{L - 6}" y="{_f(y + ch / 2)}" text-anchor="end" dominant-baseline="middle">{r:g}</text>')
        for j, _ in enumerate(cols):
            v = values[i][j]
            x = L + j * cw
            if v is None:
                fill, txt = "#ccc", "-"
            else:
                t = min(1.0, max(0.0, (v - vmin) / (vmax - vmin))) if vmax > vmin else 0.5
                shade = int(round(255 * (1 - t)))
                fill, txt = f"rgb({shade},{shade},255)", f"{v:.2f}"
            body.append(f'<rect x="{_f(x)}" y="{_f(y)}" width="{_f(cw)}" height="{_f(ch)}" fill="{fill}" stroke="#fff"/>')
            body.append(f'<text x="{_f(x + cw / 2)}" y="{_f(y + ch / 2)}" text-anchor="middle" '
                        f'dominant-baseline="middle">{txt}</text>')
    for j, c in enumerate(cols):
        body.append(f'<text x="{_f(L + (j + 0.5) * cw)}" y="{T + ph + 16}" text-anchor="middle">{c:g}</text>')
    body.append(f'<text x="{_f(L + pw / 2)}" y="{HEIGHT - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    body.append(f'<text x="14" y="{_f(T + ph / 2)}" text-anchor="middle" '
                f'transform="rotate(-90 14 {_f(T + ph / 2)})">{escape(ylabel)}</text>')
    return _document(body, title)


def _mean_by(records, group, x, y):
    acc: dict = {}
    for r in records:
        v = getattr(r, y)
        if v is None:
            continue
        acc.setdefault(group(r), {}).setdefault(getattr(r, x), []).append(v)
    return {g: (sorted(pts), [float(np.mean(pts[k])) for k in sorted(pts)]) for g, pts in sorted(acc.items())}


def plots_for(records, experiment: str) -> dict[str, str]:
    """SVG documents (name -> text) for one experiment's records."""
    out = {}
    if experiment in ("curvature-sweep", "tr-vs-norm"):
        by = lambda r: f"{r.kind} d={r.d}"
        for col, label in (("ratio", "Tr(H)/|H|"), ("frac_positive", "fraction positive")):
            out[col] = line_plot(_mean_by(records, by, "rho", col), f"{label} vs radius", "rho", label, logx=True)
        if experiment == "tr-vs-norm":
            series = {}
            for g, (x, y) in _mean_by(records, by, "rho", "trace").items():
                series[f"Tr {g}"] = (x, np.asarray(y) / np.asarray(x))
            for g, (x, y) in _mean_by(records, by, "rho", "fro_norm").items():
                series[f"|H| {g}"] = (x, np.asarray(y) / np.asarray(x))
            out["tr_norm_over_rho"] = line_plot(series, "Tr(H)/rho and |H|/rho", "rho", "per rho",
                                                logx=True, logy=True)
    elif experiment == "contours":
        for kind in sorted({r.kind for r in records}) or ["hyperplane"]:
            rs = [r for r in records if r.kind == kind]
            rhos = sorted({r.rho for r in rs})
            ds = sorted({r.d for r in rs})
            cells = _mean_by(rs, lambda r: r.rho, "d", "final_acc")
            vals = [[dict(zip(*cells[rho])).get(d) if rho in cells else None for d in ds] for rho in rhos]
            out[f"accuracy_{kind}"] = grid_plot(rhos, ds, vals, f"accuracy on {kind} charts", "d", "rho")
    elif experiment == "loss-scaling":
        out["loss"] = line_plot(_mean_by(records, lambda r: r.kind, "rho", "init_loss"),
                                "loss at random anchors", "rho", "eval loss", logx=True, logy=True)
    elif experiment == "init-select":
        for col in ("init_loss", "frac_positive", "trace", "ratio"):
            series = {k: ([getattr(r, col) for r in records if r.kind == k and getattr(r, col) is not None
                           and r.final_acc is not None],
                          [r.final_acc for r in records if r.kind == k and getattr(r, col) is not None
                           and r.final_acc is not None])
                      for k in sorted({r.kind for r in records})}
            out[f"final_acc_vs_{col}"] = line_plot(series, f"final accuracy vs {col}", col, "accuracy",
                                                   markers=True)
    elif experiment == "radius-drift":
        series = {f"seed {r.seed}": ([p[0] for p in r.extra.get("trajectory", [])],
                                     [p[4] for p in r.extra.get("trajectory", [])]) for r in records}
        out["rho_trajectory"] = line_plot(series, "normalized radius during training", "step", "rho")
    else:
        out["final_acc"] = line_plot(_mean_by(records, lambda r: r.kind, "rho", "final_acc"),
                                     experiment, "rho", "accuracy", logx=True)
    return out


def emit_plots(csv_path, out_dir=None) -> list[Path]:
    """Read a result CSV (schema-checked) and write SVGs next to it or into ``out_dir``."""
    csv_path = Path(csv_path)
    records = read_csv(csv_path)
    experiment = records[0].experiment if records else csv_path.stem
    side = csv_path.with_suffix(".jsonl")
    if side.exists():
        extras = {}
        for line in side.read_text().splitlines():
            if line.strip():
                item = json.loads(line)
                extras[item["key"]] = item
        for r in records:
            if r.key in extras:
                r.extra = extras[r.key]["extra"]
    out_dir = Path(out_dir) if out_dir else csv_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, svg in plots_for(records, experiment).items():
        path = out_dir / f"{experiment}_{name}.svg"
        path.write_text(svg)
        written.append(path)
    return written

