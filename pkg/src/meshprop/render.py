"""SVG heatmaps of a topology: nodes shaded white to green by a per-node value."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from meshprop.topology import Topology, betweenness, degree

METRICS = ("acc_ood", "acc_iid", "degree", "betweenness")
GREEN = (0, 128, 0)


class RenderError(ValueError):
    pass


def ring_layout(n: int) -> np.ndarray:
    if n == 1:
        return np.zeros((1, 2))
    theta = 2 * np.pi * np.arange(n) / n
    return np.stack([np.cos(theta), np.sin(theta)], axis=1)


def spring_layout(topology: Topology, seed: int, iterations: int = 200) -> np.ndarray:
    """Fruchterman-Reingold positions in [-1, 1]^2, deterministic per seed."""
    import networkx as nx

    g = nx.Graph()
    g.add_nodes_from(range(topology.n))
    g.add_edges_from(topology.edges)
    pos = nx.spring_layout(g, seed=seed, iterations=iterations)
    return np.array([pos[i] for i in range(topology.n)], dtype=float)


def shade(value: float) -> str:
    v = float(np.clip(value, 0.0, 1.0))
    r, g, b = (round(255 + (c - 255) * v) for c in GREEN)
    return f"#{r:02x}{g:02x}{b:02x}"


def node_values(topology: Topology, metric: str, run_dir=None) -> tuple[np.ndarray, float, float, int | None]:
    """Raw per-node values, the colour-scale range, and the OOD origin (if known)."""
    if metric not in METRICS:
        raise RenderError(f"unknown metric {metric!r}; expected one of {', '.join(METRICS)}")
    ood = None
    if run_dir is not None:
        ood = json.loads((Path(run_dir) / "config.json").read_text())["run"]["ood_device"]
    if metric == "degree":
        vals = degree(topology).astype(float)
        return vals, 0.0, max(vals.max(), 1.0), ood
    if metric == "betweenness":
        vals = betweenness(topology)
        return vals, 0.0, max(vals.max(), 1e-12), ood
    if run_dir is None:
        raise RenderError(f"metric {metric} needs a run directory")
    run = json.loads((Path(run_dir) / "config.json").read_text())["run"]
    key = "final_acc_ood" if metric == "acc_ood" else "final_acc_iid"
    return np.asarray(run[key], dtype=float), 0.0, 1.0, ood


def render_svg(topology: Topology, values: np.ndarray, vmin: float, vmax: float, title: str,
               ood_device: int | None = None, layout: str = "spring", seed: int = 0,
               size: int = 480) -> str:
    pos = ring_layout(topology.n) if layout == "ring" else spring_layout(topology, seed)
    span = np.abs(pos).max() or 1.0
    margin = 40
    inner = size - 2 * margin
    xy = margin + (pos / span + 1) / 2 * inner
    scaled = (np.asarray(values, float) - vmin) / ((vmax - vmin) or 1.0)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 60}" '
           f'viewBox="0 0 {size} {size + 60}">',
           f'<rect width="{size}" height="{size + 60}" fill="#ffffff"/>',
           f'<text x="{size / 2:.1f}" y="20" font-family="sans-serif" font-size="14" '
           f'text-anchor="middle">{title}</text>',
           '<g stroke="#999999" stroke-width="1">']
    for u, v in topology.edges:
        out.append(f'<line x1="{xy[u, 0]:.2f}" y1="{xy[u, 1]:.2f}" x2="{xy[v, 0]:.2f}" y2="{xy[v, 1]:.2f}"/>')
    out.append("</g>")
    out.append('<g font-family="sans-serif" font-size="8" text-anchor="middle">')
    for i in range(topology.n):
        ood = i == ood_device
        stroke = ' stroke="#d62728" stroke-width="3"' if ood else ' stroke="#333333" stroke-width="1"'
        out.append(f'<circle cx="{xy[i, 0]:.2f}" cy="{xy[i, 1]:.2f}" r="9" fill="{shade(scaled[i])}"{stroke}>'
                   f'<title>node {i}: {float(values[i]):.4g}</title></circle>')
        out.append(f'<text x="{xy[i, 0]:.2f}" y="{xy[i, 1] + 3:.2f}">{i}</text>')
    out.append("</g>")
    # legend: gradient bar from vmin to vmax
    y0 = size + 15
    out.append('<defs><linearGradient id="scale">'
               f'<stop offset="0" stop-color="{shade(0)}"/><stop offset="1" stop-color="{shade(1)}"/>'
               '</linearGradient></defs>')
    out.append(f'<rect x="{margin}" y="{y0}" width="{inner}" height="12" fill="url(#scale)" stroke="#333333"/>')
    out.append(f'<text x="{margin}" y="{y0 + 28}" font-family="sans-serif" font-size="11">{vmin:.3g}</text>')
    out.append(f'<text x="{margin + inner}" y="{y0 + 28}" font-family="sans-serif" font-size="11" '
               f'text-anchor="end">{vmax:.3g}</text>')
    if ood_device is not None:
        out.append(f'<text x="{size / 2:.1f}" y="{y0 + 28}" font-family="sans-serif" font-size="11" '
                   f'text-anchor="middle">red outline: OOD origin (node {ood_device})</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
