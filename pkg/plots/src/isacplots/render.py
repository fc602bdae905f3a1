"""Figure rendering from simulator CSV bundles.

Pure file-in/file-out: every renderer takes CSV paths and writes one image.
Inputs are validated against the expected schema version; a requested
series that is missing from the data produces a warning, never a failure.
Rendering is deterministic: fixed style, fixed dpi, no timestamps in the
output metadata.
"""

from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

SUPPORTED_SCHEMA = "v1"
RD_SCHEMA = "rd_map_v1"
DPI = 150

KINDS = ("throughput-cdf", "latency-bars", "training-curve", "err-vs-speed",
         "latency-vs-arrival", "rd-heatmap")

_STYLE = {
    "figure.figsize": (5.2, 3.6),
    "axes.grid": True,
    "grid.alpha": 0.35,
    "font.size": 9,
    "legend.fontsize": 8,
    "axes.labelsize": 10,
    "lines.linewidth": 1.6,
    "savefig.dpi": DPI,
}

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
           "#17becf", "#7f7f7f")


class SchemaError(ValueError):
    """Input CSV does not carry the expected schema version."""


@dataclass
class FigureSpec:
    kind: str
    inputs: List[str]
    output: str
    title: Optional[str] = None
    series: Optional[List[str]] = None  # expected policy names, for warnings

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown figure kind {self.kind!r}; "
                             f"choose from {', '.join(KINDS)}")


def read_csv(path: str) -> tuple:
    """(meta, columns, float-or-str rows) for the `# key=value` CSV dialect."""
    meta, columns, rows = {}, None, []
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key.strip()] = value.strip()
            elif columns is None:
                columns = line.split(",")
            elif line:
                rows.append(line.split(","))
    return meta, columns or [], rows


def _check_schema(meta: dict, path: str, expected: str = SUPPORTED_SCHEMA) -> None:
    schema = meta.get("schema", "")
    if schema != expected:
        raise SchemaError(f"{path}: schema {schema!r}, expected {expected!r}")


def _series_groups(rows, key_col=0):
    groups = {}
    for row in rows:
        groups.setdefault(row[key_col], []).append(row)
    return groups


def _warn_missing(requested: Optional[Sequence[str]], present) -> None:
    for name in requested or ():
        if name not in present:
            warnings.warn(f"series {name!r} not present in the data; skipped")


def _save(fig, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def render(spec: FigureSpec) -> str:
    """Render one figure; returns the output path."""
    with plt.rc_context(_STYLE):
        if spec.kind == "throughput-cdf":
            _render_throughput_cdf(spec)
        elif spec.kind == "latency-bars":
            _render_latency_bars(spec)
        elif spec.kind == "training-curve":
            _render_training_curve(spec)
        elif spec.kind == "err-vs-speed":
            _render_err_vs_speed(spec)
        elif spec.kind == "latency-vs-arrival":
            _render_latency_vs_arrival(spec)
        elif spec.kind == "rd-heatmap":
            _render_rd_heatmap(spec)
    return spec.output


def _load_grouped(spec: FigureSpec, expected_cols: list) -> dict:
    groups = {}
    for path in spec.inputs:
        meta, cols, rows = read_csv(path)
        _check_schema(meta, path)
        if cols != expected_cols:
            raise SchemaError(f"{path}: columns {cols} != {expected_cols}")
        if not rows:
            raise ValueError(f"{path}: no data rows")
        for name, g in _series_groups(rows).items():
            groups.setdefault(name, []).extend(g)
    _warn_missing(spec.series, groups)
    return groups


def _render_throughput_cdf(spec: FigureSpec) -> None:
    groups = _load_grouped(spec, ["policy", "throughput", "cdf"])
    fig, ax = plt.subplots()
    for i, (name, rows) in enumerate(sorted(groups.items())):
        x = np.array([float(r[1]) for r in rows])
        y = np.array([float(r[2]) for r in rows])
        order = np.argsort(x, kind="stable")
        ax.step(x[order], y[order], where="post", label=name,
                color=_COLORS[i % len(_COLORS)])
    ax.set_xlabel("throughput")
    ax.set_ylabel("CDF")
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.02)
    ax.legend()
    if spec.title:
        ax.set_title(spec.title)
    _save(fig, spec.output)


def _render_latency_bars(spec: FigureSpec) -> None:
    groups = _load_grouped(spec, ["policy", "wait_tti", "probability"])
    fig, ax = plt.subplots()
    names = sorted(groups)
    n = len(names)
    width = 0.8 / max(n, 1)
    for i, name in enumerate(names):
        rows = groups[name]
        waits = np.array([int(r[1]) for r in rows])
        probs = np.array([float(r[2]) for r in rows])
        ax.bar(waits + (i - (n - 1) / 2) * width, probs, width=width,
               label=name, color=_COLORS[i % len(_COLORS)])
    ax.set_xlabel("packet wait before transmission (TTIs)")
    ax.set_ylabel("probability")
    ax.legend()
    if spec.title:
        ax.set_title(spec.title)
    _save(fig, spec.output)


def _render_training_curve(spec: FigureSpec) -> None:
    fig, ax = plt.subplots()
    seen = []
    for i, path in enumerate(spec.inputs):
        meta, cols, rows = read_csv(path)
        _check_schema(meta, path)
        if "step" not in cols or "ma_reward" not in cols:
            raise SchemaError(f"{path}: not a training-curve CSV")
        if not rows:
            raise ValueError(f"{path}: no data rows")
        s_i, r_i = cols.index("step"), cols.index("ma_reward")
        steps = [float(r[s_i]) for r in rows]
        ma = [float(r[r_i]) for r in rows]
        label = meta.get("variant", meta.get("policy",
                                             os.path.basename(path)))
        seen.append(label)
        ax.plot(steps, ma, label=label, color=_COLORS[i % len(_COLORS)])
    _warn_missing(spec.series, seen)
    ax.set_xlabel("environment step (TTI)")
    ax.set_ylabel("moving-average episode reward")
    ax.legend()
    if spec.title:
        ax.set_title(spec.title)
    _save(fig, spec.output)


def _render_err_vs_speed(spec: FigureSpec) -> None:
    groups = _load_grouped(
        spec, ["policy", "speed", "p_eps_d", "ci_d", "p_eps_v", "ci_v"])
    fig, ax = plt.subplots()
    for i, (name, rows) in enumerate(sorted(groups.items())):
        speeds = np.array([float(r[1]) for r in rows])
        order = np.argsort(speeds)
        pd = np.array([float(r[2]) for r in rows])[order]
        ci = np.array([float(r[3]) if r[3] != "nan" else 0.0 for r in rows])[order]
        ax.errorbar(speeds[order], pd, yerr=ci, marker="o", capsize=2.5,
                    label=name, color=_COLORS[i % len(_COLORS)])
    ax.set_xlabel("mean user speed (m/s)")
    ax.set_ylabel("P(normalized range error < 0.2)")
    ax.set_ylim(0.0, 1.0)
    ax.legend()
    if spec.title:
        ax.set_title(spec.title)
    _save(fig, spec.output)


def _render_latency_vs_arrival(spec: FigureSpec) -> None:
    groups = _load_grouped(spec, ["policy", "arrival_scale", "mean_latency", "ci"])
    fig, ax = plt.subplots()
    for i, (name, rows) in enumerate(sorted(groups.items())):
        x = np.array([float(r[1]) for r in rows])
        order = np.argsort(x)
        lat = np.array([float(r[2]) for r in rows])[order]
        ci = np.array([float(r[3]) if r[3] != "nan" else 0.0 for r in rows])[order]
        ax.errorbar(x[order], lat, yerr=ci, marker="s", capsize=2.5,
                    label=name, color=_COLORS[i % len(_COLORS)])
    ax.set_xlabel("packet arrival probability scale")
    ax.set_ylabel("mean delivered-packet wait (TTIs)")
    ax.legend()
    if spec.title:
        ax.set_title(spec.title)
    _save(fig, spec.output)


def _render_rd_heatmap(spec: FigureSpec) -> None:
    if len(spec.inputs) != 1:
        raise ValueError("rd-heatmap renders exactly one map dump")
    meta, cols, rows = read_csv(spec.inputs[0])
    _check_schema(meta, spec.inputs[0], expected=RD_SCHEMA)
    if cols != ["bin", "n_r", "n_v", "magnitude"]:
        raise SchemaError(f"{spec.inputs[0]}: unexpected rd-map columns")
    if not rows:
        raise ValueError(f"{spec.inputs[0]}: no data rows")
    data = {}
    for r in rows:
        data.setdefault(int(r[0]), []).append((int(r[1]), int(r[2]), float(r[3])))
    # strongest angular bin carries the target; render that one
    best_bin = max(data, key=lambda b: max(m for _, _, m in data[b]))
    cells = data[best_bin]
    n_r = max(c[0] for c in cells) + 1
    n_v = max(c[1] for c in cells) + 1
    grid = np.zeros((n_r, n_v))
    for r_i, v_i, m in cells:
        grid[r_i, v_i] = m
    fig, ax = plt.subplots()
    mesh = ax.pcolormesh(np.arange(n_v + 1), np.arange(n_r + 1), grid,
                         shading="flat")
    fig.colorbar(mesh, ax=ax, label="magnitude")
    pk_r, pk_v = np.unravel_index(int(np.argmax(grid)), grid.shape)
    ax.annotate(f"peak ({pk_r}, {pk_v})", xy=(pk_v + 0.5, pk_r + 0.5),
                xytext=(pk_v + 0.5 + n_v * 0.08, pk_r + 0.5 + n_r * 0.08),
                color="white", fontsize=8,
                arrowprops={"arrowstyle": "->", "color": "white"})
    ax.set_xlabel("Doppler bin")
    ax.set_ylabel("range bin")
    ax.set_title(spec.title or f"angular bin {best_bin}")
    _save(fig, spec.output)


_BUNDLE_KINDS = (
    ("throughput_cdf.csv", "throughput-cdf", "throughput_cdf.png"),
    ("latency_hist.csv", "latency-bars", "latency_hist.png"),
    ("err_prob_vs_speed.csv", "err-vs-speed", "err_prob_vs_speed.png"),
    ("latency_vs_arrival.csv", "latency-vs-arrival", "latency_vs_arrival.png"),
    ("train_curve.csv", "training-curve", "train_curve.png"),
)


def render_bundle(in_dir: str, out_dir: str) -> List[str]:
    """Render every recognized CSV in a figdata directory."""
    written = []
    for csv_name, kind, img_name in _BUNDLE_KINDS:
        path = os.path.join(in_dir, csv_name)
        if os.path.exists(path):
            out = os.path.join(out_dir, img_name)
            render(FigureSpec(kind=kind, inputs=[path], output=out))
            written.append(out)
    return written
