"""Deterministic SVG figures built from the CSV files of a run directory.

Nothing here touches a model: every figure is drawn from files written by
earlier commands, so a report can be regenerated (byte for byte) at any time.
"""

from __future__ import annotations

import csv
import datetime as dt
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .errors import SchemaError
from .timeframe import class_relevance

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2",
           "#7f7f7f", "#bcbd22", "#17becf", "#393b79", "#ad494a", "#637939")


def _f(v):
    return f"{float(v):.2f}"


class Svg:
    """Minimal SVG writer; elements are kept in insertion order."""

    def __init__(self, width, height):
        self.width, self.height = width, height
        self.items = []

    def add(self, tag, text=None, **attrs):
        parts = [tag] + [f'{k.rstrip("_").replace("_", "-")}="{v}"' for k, v in attrs.items()]
        if text is None:
            self.items.append(f"<{' '.join(parts)}/>")
        else:
            self.items.append(f"<{' '.join(parts)}>{escape(str(text))}</{tag}>")

    def line(self, x1, y1, x2, y2, stroke="#000", width=1.0):
        self.add("line", x1=_f(x1), y1=_f(y1), x2=_f(x2), y2=_f(y2), stroke=stroke,
                 stroke_width=_f(width))

    def rect(self, x, y, w, h, fill, stroke="none", opacity=1.0):
        self.add("rect", x=_f(x), y=_f(y), width=_f(w), height=_f(h), fill=fill, stroke=stroke,
                 fill_opacity=_f(opacity))

    def polyline(self, xs, ys, stroke, width=1.2):
        pts = " ".join(f"{_f(x)},{_f(y)}" for x, y in zip(xs, ys))
        self.add("polyline", points=pts, fill="none", stroke=stroke, stroke_width=_f(width))

    def polygon(self, xs, ys, fill, opacity=0.3):
        pts = " ".join(f"{_f(x)},{_f(y)}" for x, y in zip(xs, ys))
        self.add("polygon", points=pts, fill=fill, fill_opacity=_f(opacity), stroke="none")

    def text(self, x, y, s, size=10, anchor="start"):
        self.add("text", s, x=_f(x), y=_f(y), font_size=size, font_family="sans-serif",
                 text_anchor=anchor)

    def render(self):
        head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" '
                f'height="{self.height}" viewBox="0 0 {self.width} {self.height}">')
        body = [head, f'<rect x="0" y="0" width="{self.width}" height="{self.height}" fill="#fff"/>']
        return "\n".join(body + self.items + ["</svg>"]) + "\n"

    def save(self, path):
        Path(path).write_text(self.render(), encoding="utf-8", newline="\n")


class Panel:
    """Axes box mapping data coordinates into a rectangle of an :class:`Svg`."""

    def __init__(self, svg, x, y, w, h, xlim, ylim, title=None):
        self.svg, self.x, self.y, self.w, self.h = svg, x, y, w, h
        lo, hi = ylim
        if not hi > lo:
            lo, hi = lo - 0.5, hi + 0.5
        self.xlim, self.ylim = xlim, (lo, hi)
        svg.rect(x, y, w, h, "none", stroke="#444")
        if title:
            svg.text(x + 2, y - 4, title, size=10)

    def px(self, v):
        lo, hi = self.xlim
        return self.x + (np.asarray(v, dtype=float) - lo) / ((hi - lo) or 1.0) * self.w

    def py(self, v):
        lo, hi = self.ylim
        return self.y + self.h - (np.asarray(v, dtype=float) - lo) / (hi - lo) * self.h

    def curve(self, xs, ys, color, width=1.2):
        self.svg.polyline(self.px(xs), self.py(ys), color, width)

    def band(self, xs, lo, hi, color):
        xs = np.asarray(xs, dtype=float)
        self.svg.polygon(np.concatenate([self.px(xs), self.px(xs[::-1])]),
                         np.concatenate([self.py(lo), self.py(np.asarray(hi)[::-1])]), color)

    def shade(self, x0, x1, color="#999", opacity=0.15):
        a, b = self.px(x0), self.px(x1)
        self.svg.rect(a, self.y, max(b - a, 1.0), self.h, color, opacity=opacity)

    def hline(self, v, color="#aaa"):
        if self.ylim[0] <= v <= self.ylim[1]:
            y = self.py(v)
            self.svg.line(self.x, y, self.x + self.w, y, color, 0.6)

    def yticks(self, n=3):
        for v in np.linspace(*self.ylim, n):
            self.svg.text(self.x - 3, self.py(v) + 3, f"{v:.3g}", size=8, anchor="end")

    def month_ticks(self, year):
        for m in range(1, 13, 2):
            d = dt.date(year, m, 1).timetuple().tm_yday
            if self.xlim[0] <= d <= self.xlim[1]:
                x = self.px(d)
                self.svg.line(x, self.y + self.h, x, self.y + self.h + 3, "#444", 0.6)
                self.svg.text(x, self.y + self.h + 12, dt.date(year, m, 1).strftime("%b"),
                              size=8, anchor="middle")


def diverging(v, vmax):
    """Blue (negative) to white to red (positive) hex colour."""
    t = 0.0 if vmax <= 0 else max(-1.0, min(1.0, v / vmax))
    if t >= 0:
        c = (255, round(255 * (1 - t)), round(255 * (1 - t)))
    else:
        c = (round(255 * (1 + t)), round(255 * (1 + t)), 255)
    return "#%02x%02x%02x" % c


# ---------------------------------------------------------------------------
# readers for run-directory files
# ---------------------------------------------------------------------------

def _rows(path, header):
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        got = next(reader, None)
        if got != list(header):
            raise SchemaError(f"{path}: header must be {','.join(header)}")
        return [r for r in reader if r]


def read_timestep_relevance(path):
    """``{parcel_id: (target_class, {date: r_t})}`` from an ``r_t`` export."""
    out = {}
    for pid, target, date, r in _rows(path, ("parcel_id", "target_class", "date", "r_t")):
        out.setdefault(pid, (int(target), {}))[1][dt.date.fromisoformat(date)] = float(r)
    return out


def read_band_relevance(path):
    """``{parcel_id: (target_class, {(date, band): relevance})}``, file order kept."""
    out = {}
    for pid, target, date, band, r in _rows(
            path, ("parcel_id", "target_class", "date", "band", "relevance")):
        out.setdefault(pid, (int(target), {}))[1][(dt.date.fromisoformat(date), band)] = float(r)
    return out


def read_timeframes(path):
    return [(int(n), dt.date.fromisoformat(a), dt.date.fromisoformat(b))
            for n, a, b in _rows(path, ("n", "start", "end"))]


def read_curves(path):
    """``{mode: (fraction_removed, mse)}``."""
    curves = {}
    for _, frac, mse, mode in _rows(path, ("n_removed", "fraction_removed", "mse", "mode")):
        curves.setdefault(mode, ([], []))
        curves[mode][0].append(float(frac))
        curves[mode][1].append(float(mse))
    return {k: (np.array(a), np.array(b)) for k, (a, b) in curves.items()}


def read_earliness(path):
    return _rows(path, ("window_n", "start", "end", "train_acc", "test_acc", "delta_vs_full"))


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------

def class_panels(ds, r_t, windows, path, show_bands=("B04", "B08")):
    """Per class: median reflectance of a few bands above the median ``R_t``
    with its inter-quartile band; grey shading marks the windows."""
    doy = ds.axis.doy
    ids = [s.parcel_id for s in ds.samples if s.parcel_id in r_t]
    if not ids:
        raise SchemaError("no parcel of the dataset appears in the relevance file")
    index = {s.parcel_id: i for i, s in enumerate(ds.samples)}
    R = np.array([[r_t[p][1].get(d, 0.0) for d in ds.axis.dates] for p in ids])
    labels = np.array([ds.samples[index[p]].label for p in ids])
    C = ds.n_classes
    stats = class_relevance(R, labels, C)
    bands = [ds.band_names.index(b) for b in show_bands if b in ds.band_names] or [0]

    cols = 2 if C > 1 else 1
    rows = (C + cols - 1) // cols
    pw, ph, gap = 330, 80, 34
    svg = Svg(60 + cols * (pw + 50), 40 + rows * (2 * ph + gap + 28))
    svg.text(10, 18, "median R_t per class (25-75 percentile band) and median inputs", size=12)
    xlim = (float(doy[0]), float(doy[-1]))
    X = np.stack([s.values for s in ds.samples])  # N, B, T
    M = np.stack([s.mask for s in ds.samples])
    for k in range(C):
        ox = 50 + (k % cols) * (pw + 50)
        oy = 40 + (k // cols) * (2 * ph + gap + 28)
        members = np.flatnonzero(ds.labels == k)
        vals = np.where(M[members][:, None, :], X[members], np.nan)
        top = Panel(svg, ox, oy + 12, pw, ph, xlim, (0.0, 0.75),
                    f"{ds.class_names[k]} (n={int(stats.counts[k])})")
        for a, b in [(w[1], w[2]) for w in windows]:
            top.shade(a.timetuple().tm_yday, b.timetuple().tm_yday)
        for j, b in enumerate(bands):
            if len(members):
                with np.errstate(all="ignore"):
                    med = np.nanmedian(vals[:, b, :], axis=0)
                top.curve(doy, np.nan_to_num(med), PALETTE[j % len(PALETTE)])
            svg.text(ox + pw - 4, oy + 24 + 10 * j, ds.band_names[b], size=8, anchor="end")
        top.yticks()
        lo, hi = float(stats.q25.min()), float(stats.q75.max())
        bottom = Panel(svg, ox, oy + 12 + ph + 8, pw, ph, xlim, (min(lo, 0.0), max(hi, 0.0)))
        bottom.hline(0.0)
        bottom.band(doy, stats.q25[k], stats.q75[k], PALETTE[3])
        bottom.curve(doy, stats.median[k], PALETTE[3], 1.5)
        bottom.yticks()
        bottom.month_ticks(ds.axis.year)
    svg.save(path)


def parcel_panel(sample, band_names, relevance, path):
    """Inputs, ``R_t`` and the band-by-timestep relevance heatmap of one parcel."""
    target, cells = relevance
    axis = sample.axis
    B, T = sample.values.shape
    grid = np.array([[cells.get((d, b), 0.0) for d in axis.dates] for b in band_names])
    r_t = grid.sum(axis=0)
    doy = axis.doy
    xlim = (float(doy[0]), float(doy[-1]))
    pw = 560
    svg = Svg(pw + 110, 130 + 110 + 20 + 12 * B + 60)
    svg.text(10, 18, f"parcel {sample.parcel_id} (label {sample.label}, explained class {target})",
             size=12)
    top = Panel(svg, 70, 40, pw, 90, xlim, (0.0, float(max(sample.values.max(), 0.1))), "inputs")
    for b in range(B):
        keep = sample.mask
        top.curve(doy[keep], sample.values[b, keep], PALETTE[b % len(PALETTE)], 0.8)
    top.yticks()
    lo, hi = float(min(r_t.min(), 0.0)), float(max(r_t.max(), 0.0))
    mid = Panel(svg, 70, 150, pw, 90, xlim, (lo, hi), "R_t")
    mid.hline(0.0)
    mid.curve(doy, r_t, "#000", 1.4)
    mid.yticks()
    y0 = 262
    svg.text(72, y0 - 4, "relevance per band and timestep", size=10)
    vmax = float(np.abs(grid).max())
    cw = pw / T
    for b in range(B):
        svg.text(66, y0 + 12 * b + 9, band_names[b], size=8, anchor="end")
        for t in range(T):
            svg.rect(70 + t * cw, y0 + 12 * b, cw + 0.05, 12, diverging(grid[b, t], vmax))
    svg.rect(70, y0, pw, 12 * B, "none", stroke="#444")
    Panel(svg, 70, y0, pw, 12 * B, xlim, (0, 1)).month_ticks(axis.year)
    svg.save(path)


def curve_figure(curves, path):
    """Logit mse against the fraction of removed timesteps, one line per mode."""
    svg = Svg(460, 300)
    svg.text(10, 18, "logit mse after removing timesteps", size=12)
    top = max(float(m.max()) for _, m in curves.values()) if curves else 1.0
    p = Panel(svg, 60, 40, 360, 220, (0.0, 1.0), (0.0, top))
    for j, (mode, (frac, mse)) in enumerate(sorted(curves.items())):
        p.curve(frac, mse, PALETTE[j], 1.5)
        svg.line(68, 53 + 12 * j, 88, 53 + 12 * j, PALETTE[j], 1.5)
        svg.text(94, 56 + 12 * j, mode, size=9)
    p.yticks()
    for v in (0.0, 0.25, 0.5, 0.75, 1.0):
        svg.text(p.px(v), 274, f"{v:.2f}", size=8, anchor="middle")
    svg.save(path)


def earliness_table(rows, path):
    """Window, dates and accuracies as a table."""
    head = ("window", "start", "end", "train acc", "test acc", "vs full")
    widths = (70, 90, 90, 80, 80, 70)
    svg = Svg(sum(widths) + 20, 40 + 20 * (len(rows) + 1))
    svg.text(10, 18, "accuracy when training on shortened windows", size=12)
    x = 10
    for h, w in zip(head, widths):
        svg.text(x, 40, h, size=10)
        x += w
    svg.line(10, 44, 10 + sum(widths), 44, "#444", 0.8)
    for i, r in enumerate(rows):
        label = "full" if r[0] == "full" else f"dt_{r[0]}"
        cells = (label, r[1], r[2], f"{100 * float(r[3]):.2f}%", f"{100 * float(r[4]):.2f}%",
                 f"{100 * float(r[5]):+.2f}")
        x = 10
        for c, w in zip(cells, widths):
            svg.text(x, 60 + 20 * i, c, size=10)
            x += w
    svg.save(path)
