"""Hand-written SVG figures: reward contours with action scatter, learning curves, sweep bars.

Output is plain SVG text built from fixed-precision numbers, so identical
inputs always give identical bytes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import envs_data as E

SCATTER = "scatter"
CURVE = "curve"
BARS = "bars"
PLOT_KINDS = (SCATTER, CURVE, BARS)

GRID = 200
PANEL = 320
MARGIN = 40
# dark (low reward) to light (high reward)
PALETTE = ("#2b0b3f", "#4a1d6b", "#5e3c99", "#3b6fb6", "#2a9d8f", "#68c27c", "#c7e07a", "#fde68a")
SERIES = ("#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")


@dataclass
class PlotSpec:
    kind: str
    inputs: list[str]
    output: str
    title: str = ""
    labels: list[str] = field(default_factory=list)
    env_id: str = E.DANGER
    metric: str = "eval_reward_mean"

    def validate(self) -> None:
        if self.kind not in PLOT_KINDS:
            raise ValueError(f"plot kind {self.kind!r} must be one of {PLOT_KINDS}")
        for path in self.inputs:
            if not Path(path).is_file():
                raise FileNotFoundError(f"plot input {path} does not exist")
        if self.labels and len(self.labels) != len(self.inputs):
            raise ValueError("need one label per input")


def _f(x: float) -> str:
    return f"{x:.2f}"


def _esc(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _svg(width: float, height: float, body: list[str], title: str) -> str:
    head = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_f(width)}" height="{_f(height)}" '
            f'viewBox="0 0 {_f(width)} {_f(height)}">',
            f'<rect x="0" y="0" width="{_f(width)}" height="{_f(height)}" fill="#ffffff"/>']
    if title:
        head.append(f'<text x="{_f(width / 2)}" y="20" text-anchor="middle" font-size="14">{_esc(title)}</text>')
    return "\n".join(head + body + ["</svg>"]) + "\n"


def _read_rows(path: str) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = rows[0]
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ValueError(f"{path}:{i}: expected {len(header)} fields, found {len(row)}")
    return header, rows[1:]


def read_actions(path: str) -> np.ndarray:
    """Action CSV with header ``a0,a1``."""
    header, rows = _read_rows(path)
    if header[:2] != ["a0", "a1"]:
        raise ValueError(f"{path}:1: expected header a0,a1")
    out = np.empty((len(rows), 2))
    for i, row in enumerate(rows):
        try:
            out[i] = [float(row[0]), float(row[1])]
        except ValueError:
            raise ValueError(f"{path}:{i + 2}: malformed action row {row!r}") from None
    return out


def write_actions(actions: np.ndarray, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["a0", "a1"])
        for a in actions:
            wr.writerow([repr(float(a[0])), repr(float(a[1]))])


def reward_grid(env_id: str, n: int = GRID) -> tuple[np.ndarray, tuple[float, float]]:
    lo, hi = E.REWARD_FIELDS[env_id].action_box
    xs = lo + (np.arange(n) + 0.5) * (hi - lo) / n
    gx, gy = np.meshgrid(xs, xs)
    r = E.reward_fn(env_id)(np.stack([gx.ravel(), gy.ravel()], axis=1)).reshape(n, n)
    return r, (lo, hi)


def quantile_bins(values: np.ndarray, n_bins: int = len(PALETTE)) -> np.ndarray:
    """Bin index per value using fixed quantile edges of ``values``."""
    edges = np.quantile(values, np.linspace(0.0, 1.0, n_bins + 1)[1:-1])
    return np.searchsorted(edges, values, side="right")


def _panel(ox: float, oy: float, env_id: str, actions: np.ndarray | None, label: str) -> list[str]:
    r, (lo, hi) = reward_grid(env_id)
    bins = quantile_bins(r.ravel()).reshape(r.shape)
    cell = PANEL / GRID
    out = []
    for j in range(GRID):
        y = oy + PANEL - (j + 1) * cell  # row j is action-y increasing upwards
        start = 0
        for i in range(1, GRID + 1):
            if i == GRID or bins[j, i] != bins[j, start]:
                out.append(f'<rect x="{_f(ox + start * cell)}" y="{_f(y)}" width="{_f((i - start) * cell)}" '
                           f'height="{_f(cell)}" fill="{PALETTE[bins[j, start]]}"/>')
                start = i
    scale = PANEL / (hi - lo)
    if actions is not None:
        for a in actions:
            if lo <= a[0] <= hi and lo <= a[1] <= hi:
                out.append(f'<circle cx="{_f(ox + (a[0] - lo) * scale)}" cy="{_f(oy + PANEL - (a[1] - lo) * scale)}" '
                           f'r="1.5" fill="#ffffff" fill-opacity="0.6" stroke="#000000" stroke-width="0.3"/>')
    sx, sy = ox + (E.OPTIMUM[0] - lo) * scale, oy + PANEL - (E.OPTIMUM[1] - lo) * scale
    out.append(f'<text x="{_f(sx)}" y="{_f(sy + 5)}" text-anchor="middle" font-size="14" fill="#ff0000">*</text>')
    if env_id == E.DANGER:
        cx, cy = ox + (E.DANGER_CENTER[0] - lo) * scale, oy + PANEL - (E.DANGER_CENTER[1] - lo) * scale
        out.append(f'<circle cx="{_f(cx)}" cy="{_f(cy)}" r="{_f(E.DANGER_RADIUS * scale)}" fill="none" '
                   f'stroke="#b000ff" stroke-dasharray="4,3" stroke-width="1.5"/>')
    out.append(f'<rect x="{_f(ox)}" y="{_f(oy)}" width="{_f(PANEL)}" height="{_f(PANEL)}" fill="none" stroke="#000000"/>')
    if label:
        out.append(f'<text x="{_f(ox + PANEL / 2)}" y="{_f(oy + PANEL + 16)}" text-anchor="middle" '
                   f'font-size="12">{_esc(label)}</text>')
    return out


def scatter_svg(env_id: str, action_sets: list[np.ndarray | None], labels: list[str], title: str = "") -> str:
    """Reward field underlay (quantile-binned colours) with one panel per action set."""
    sets = action_sets or [None]
    labels = labels or [""] * len(sets)
    body = []
    for k, (acts, lab) in enumerate(zip(sets, labels)):
        body += _panel(MARGIN + k * (PANEL + MARGIN), MARGIN, env_id, acts, lab)
    return _svg(MARGIN + len(sets) * (PANEL + MARGIN), PANEL + 2 * MARGIN + 10, body, title)


def read_metric(path: str, metric: str) -> tuple[np.ndarray, np.ndarray]:
    """(steps, values) for rows where ``metric`` is present."""
    header, rows = _read_rows(path)
    if "step" not in header or metric not in header:
        raise ValueError(f"{path}:1: header lacks step or {metric}")
    si, mi = header.index("step"), header.index(metric)
    steps, vals = [], []
    for i, row in enumerate(rows, start=2):
        if row[mi] == "":
            continue
        try:
            steps.append(int(row[si]))
            vals.append(float(row[mi]))
        except ValueError:
            raise ValueError(f"{path}:{i}: malformed value in row") from None
    return np.array(steps, dtype=np.int64), np.array(vals)


def mean_sem(curves: list[tuple[np.ndarray, np.ndarray]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean and SEM over runs at the steps all runs share."""
    steps = curves[0][0]
    for s, _ in curves[1:]:
        steps = np.intersect1d(steps, s)
    vals = np.array([v[np.searchsorted(s, steps)] for s, v in curves])
    mean = vals.mean(axis=0)
    sem = vals.std(axis=0, ddof=1) / np.sqrt(len(curves)) if len(curves) > 1 else np.zeros_like(mean)
    return steps, mean, sem


def _axes(x0, y0, w, h, xlim, ylim) -> tuple[list[str], callable, callable]:
    (xa, xb), (ya, yb) = xlim, ylim
    xb = xb if xb > xa else xa + 1.0
    if yb <= ya:
        ya, yb = ya - 1.0, yb + 1.0

    def px(x):
        return x0 + (np.asarray(x, dtype=np.float64) - xa) / (xb - xa) * w

    def py(y):
        return y0 + h - (np.asarray(y, dtype=np.float64) - ya) / (yb - ya) * h

    out = [f'<rect x="{_f(x0)}" y="{_f(y0)}" width="{_f(w)}" height="{_f(h)}" fill="none" stroke="#000000"/>',
           f'<text x="{_f(x0 - 4)}" y="{_f(y0 + 4)}" text-anchor="end" font-size="10">{yb:.4g}</text>',
           f'<text x="{_f(x0 - 4)}" y="{_f(y0 + h)}" text-anchor="end" font-size="10">{ya:.4g}</text>',
           f'<text x="{_f(x0)}" y="{_f(y0 + h + 14)}" font-size="10">{xa:.4g}</text>',
           f'<text x="{_f(x0 + w)}" y="{_f(y0 + h + 14)}" text-anchor="end" font-size="10">{xb:.4g}</text>']
    return out, px, py


def curve_svg(groups: dict[str, list[tuple[np.ndarray, np.ndarray]]], metric: str, title: str = "") -> str:
    """One mean line with a +/- SEM band per group of runs."""
    stats = {k: mean_sem(v) for k, v in groups.items()}
    all_x = np.concatenate([s for s, _, _ in stats.values()])
    all_lo = np.concatenate([m - e for _, m, e in stats.values()])
    all_hi = np.concatenate([m + e for _, m, e in stats.values()])
    if all_x.size == 0:
        raise ValueError(f"no rows carry {metric}")
    w, h = 480, 280
    body, px, py = _axes(70, 40, w, h, (all_x.min(), all_x.max()), (all_lo.min(), all_hi.max()))
    for k, (label, (x, m, e)) in enumerate(stats.items()):
        color = SERIES[k % len(SERIES)]
        upper = " ".join(f"{_f(a)},{_f(b)}" for a, b in zip(px(x), py(m + e)))
        lower = " ".join(f"{_f(a)},{_f(b)}" for a, b in zip(px(x[::-1]), py((m - e)[::-1])))
        body.append(f'<polygon points="{upper} {lower}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        line = " ".join(f"{_f(a)},{_f(b)}" for a, b in zip(px(x), py(m)))
        body.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        body.append(f'<text x="{_f(70 + w + 10)}" y="{_f(50 + 16 * k)}" font-size="11" fill="{color}">{_esc(label)}</text>')
    body.append(f'<text x="{_f(70 + w / 2)}" y="{_f(40 + h + 30)}" text-anchor="middle" font-size="11">step ({_esc(metric)})</text>')
    return _svg(70 + w + 140, h + 90, body, title)


def read_sweep(path: str, metric: str) -> tuple[list[float], np.ndarray, np.ndarray]:
    header, rows = _read_rows(path)
    mk, sk = f"{metric}_mean", f"{metric}_sem"
    if "p" not in header or mk not in header:
        raise ValueError(f"{path}:1: header lacks p or {mk}")
    ps, mean, sem = [], [], []
    for i, row in enumerate(rows, start=2):
        try:
            ps.append(float(row[header.index("p")]))
            mean.append(float(row[header.index(mk)]))
            sem.append(float(row[header.index(sk)]))
        except ValueError:
            raise ValueError(f"{path}:{i}: malformed value in row") from None
    return ps, np.array(mean), np.array(sem)


def bars_svg(ps: list[float], mean: np.ndarray, sem: np.ndarray, metric: str, title: str = "") -> str:
    w, h = 60 * max(len(ps), 1) + 40, 260
    finite = np.isfinite(mean)
    lo = min(0.0, float(np.min((mean - sem)[finite]))) if finite.any() else 0.0
    hi = max(0.0, float(np.max((mean + sem)[finite]))) if finite.any() else 1.0
    body, px, py = _axes(70, 40, w, h, (0.0, float(len(ps))), (lo, hi))
    for k, (p, m, e) in enumerate(zip(ps, mean, sem)):
        x = float(px(k + 0.2))
        bw = float(px(k + 0.8)) - x
        if np.isfinite(m):
            top, base = float(py(max(m, 0.0))), float(py(min(m, 0.0)))
            body.append(f'<rect x="{_f(x)}" y="{_f(top)}" width="{_f(bw)}" height="{_f(base - top)}" fill="{SERIES[1]}"/>')
            cx = x + bw / 2
            body.append(f'<line x1="{_f(cx)}" y1="{_f(float(py(m - e)))}" x2="{_f(cx)}" y2="{_f(float(py(m + e)))}" '
                        f'stroke="#000000"/>')
        body.append(f'<text x="{_f(x + bw / 2)}" y="{_f(40 + h + 14)}" text-anchor="middle" font-size="10">p={p:g}</text>')
    body.append(f'<text x="{_f(70 + w / 2)}" y="{_f(40 + h + 30)}" text-anchor="middle" font-size="11">{_esc(metric)}</text>')
    return _svg(70 + w + 20, h + 90, body, title)


def emit_plot(spec: PlotSpec) -> Path:
    """Render ``spec`` to its output path; inputs are only read."""
    spec.validate()
    labels = spec.labels or [Path(p).parent.name or Path(p).stem for p in spec.inputs]
    if spec.kind == SCATTER:
        svg = scatter_svg(spec.env_id, [read_actions(p) for p in spec.inputs], labels if spec.inputs else [],
                          spec.title)
    elif spec.kind == CURVE:
        if not spec.inputs:
            raise ValueError("learning curve needs at least one metrics file")
        groups: dict[str, list] = {}
        for path, lab in zip(spec.inputs, labels):
            groups.setdefault(lab, []).append(read_metric(path, spec.metric))
        svg = curve_svg(groups, spec.metric, spec.title)
    else:
        if len(spec.inputs) != 1:
            raise ValueError("sweep bars take exactly one sweep CSV")
        svg = bars_svg(*read_sweep(spec.inputs[0], spec.metric), spec.metric, spec.title)
    out = Path(spec.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(svg)
    return out
