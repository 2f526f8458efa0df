"""CSV tables, dependency-free SVG line plots, content hashing, and run manifests."""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path


def write_csv(path: Path, header: list[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_json(path: Path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, indent=1, sort_keys=True)
        f.write("\n")
    return path


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def svg_line_plot(
    path: Path,
    series: list[dict],
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    width: int = 720,
    height: int = 400,
) -> Path:
    """Minimal SVG polyline chart. Each series: {x, y, label, color, [dash]}."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    margin = 56
    xs = [v for s in series for v in s["x"]]
    ys = [v for s in series for v in s["y"]]
    if not xs:
        xs, ys = [0.0, 1.0], [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def px(x):
        return margin + (x - x0) / (x1 - x0) * (width - 2 * margin)

    def py(y):
        return height - margin - (y - y0) / (y1 - y0) * (height - 2 * margin)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="monospace" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
    ]
    for k in range(5):
        xv = x0 + k * (x1 - x0) / 4
        yv = y0 + k * (y1 - y0) / 4
        parts.append(f'<text x="{px(xv):.1f}" y="{height - margin + 16}" text-anchor="middle">{xv:.3g}</text>')
        parts.append(f'<text x="{margin - 6}" y="{py(yv):.1f}" text-anchor="end">{yv:.3g}</text>')
    if title:
        parts.append(f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>')
    if xlabel:
        parts.append(f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle">{xlabel}</text>')
    if ylabel:
        parts.append(
            f'<text x="14" y="{height / 2}" text-anchor="middle" transform="rotate(-90 14 {height / 2})">{ylabel}</text>'
        )
    for k, s in enumerate(series):
        color = s.get("color", ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"][k % 5])
        dash = ' stroke-dasharray="6 3"' if s.get("dash") else ""
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(s["x"], s["y"]))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>')
        if s.get("label"):
            yleg = 36 + 16 * k
            parts.append(f'<line x1="{width - margin - 150}" y1="{yleg}" x2="{width - margin - 120}" y2="{yleg}" stroke="{color}"{dash}/>')
            parts.append(f'<text x="{width - margin - 112}" y="{yleg + 4}">{s["label"]}</text>')
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts))
    return path


class RunManifest:
    """Accumulating record of one output directory: config hash, seeds, files + hashes."""

    def __init__(self, out_dir: Path):
        self.out_dir = Path(out_dir)
        self.path = self.out_dir / "manifest.json"
        if self.path.exists():
            with open(self.path) as f:
                self.data = json.load(f)
        else:
            self.data = {"version": None, "config_hash": None, "seeds": {}, "files": {}, "timings": {}}

    def set_run_info(self, version: str, config_hash: str, seed: int):
        self.data["version"] = version
        self.data["config_hash"] = config_hash
        self.data["seeds"]["master"] = seed

    def record_files(self, stage: str, paths: list[Path], elapsed: float):
        for p in paths:
            rel = str(Path(p).relative_to(self.out_dir))
            self.data["files"][rel] = {"sha256": sha256_file(p), "stage": stage}
        self.data["timings"][stage] = round(float(elapsed), 3)

    def file_hashes(self) -> dict:
        return {k: v["sha256"] for k, v in sorted(self.data["files"].items())}

    def save(self):
        write_json(self.path, self.data)
