"""Synthetic generative model (blurry circle imagery) and linear perception maps.

The renderer is a deterministic function from planar position to a 16-bit
grayscale image: a white disc with a Gaussian skirt on a black background.
Intensities are quantized onto the 16-bit grid at render time so that images
round-trip bit-exactly through the PGM files the datasets are stored in.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_QUANT = 65535


@dataclass(frozen=True)
class CircleSceneConfig:
    width: int = 64
    height: int = 64
    world_window: tuple[float, float, float, float] = (-20.0, 20.0, -20.0, 20.0)  # xmin, xmax, ymin, ymax
    radius: float = 8.0       # pixels
    blur_sigma: float = 5.0   # pixels
    background: float = 0.0
    peak: float = 1.0

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise ValueError("image must be at least 8x8")
        if not (self.radius > 0 and self.blur_sigma > 0):
            raise ValueError("radius and blur_sigma must be positive")
        x0, x1, y0, y1 = self.world_window
        if not (x1 > x0 and y1 > y0):
            raise ValueError("world_window is degenerate")

    def to_pixels(self, pos: np.ndarray) -> np.ndarray:
        """World positions (B, 2) to pixel-frame circle centers (B, 2) = (col, row)."""
        x0, x1, y0, y1 = self.world_window
        pos = np.atleast_2d(np.asarray(pos, dtype=float))
        cx = (pos[:, 0] - x0) / (x1 - x0) * self.width
        cy = (y1 - pos[:, 1]) / (y1 - y0) * self.height  # row 0 is the top of the frame
        return np.stack([cx, cy], axis=1)


@dataclass(frozen=True)
class Image:
    """Grayscale frame, row-major, intensities in [0, 1] on the 16-bit grid."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=float)
        if p.ndim != 2:
            raise ValueError("pixels must be a 2-D grid")
        if p.size and (p.min() < 0.0 or p.max() > 1.0):
            raise ValueError("pixel intensities must lie in [0, 1]")
        object.__setattr__(self, "pixels", p)

    def flatten(self) -> np.ndarray:
        return self.pixels.reshape(-1)


def render_batch(positions: np.ndarray, cfg: CircleSceneConfig) -> np.ndarray:
    """Render frames for positions (B, 2); returns (B, height, width)."""
    centers = cfg.to_pixels(positions)
    xs = np.arange(cfg.width) + 0.5
    ys = np.arange(cfg.height) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    dx = gx[None, :, :] - centers[:, 0, None, None]
    dy = gy[None, :, :] - centers[:, 1, None, None]
    d = np.sqrt(dx * dx + dy * dy) - cfg.radius
    np.maximum(d, 0.0, out=d)
    img = cfg.background + (cfg.peak - cfg.background) * np.exp(-(d * d) / (2.0 * cfg.blur_sigma**2))
    np.clip(img, 0.0, 1.0, out=img)
    return np.round(img * _QUANT) / _QUANT


def render_circle(position, cfg: CircleSceneConfig) -> Image:
    """The generative model q: planar position -> image (deterministic, smooth)."""
    return Image(render_batch(np.asarray(position, dtype=float)[None, :], cfg)[0])


@dataclass
class PerceptionDataset:
    """Labeled pairs (state, image) with the positions the images were rendered at."""

    states: np.ndarray     # (N, n) full states
    positions: np.ndarray  # (N, 2) = C @ state
    images: np.ndarray     # (N, height, width)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.states) != len(self.images) or len(self.states) != len(self.positions):
            raise ValueError("one image and one position per state")

    def __len__(self) -> int:
        return len(self.states)


def generate_dataset(states, cfg: CircleSceneConfig, C=None, seed=None, description: str = "") -> PerceptionDataset:
    """Render one image per state; positions are extracted through C (identity on 2-D states)."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if states.size == 0:
        states = states.reshape(0, states.shape[1] if states.ndim == 2 and states.shape[1] else 2)
    if C is None:
        C = np.eye(states.shape[1]) if states.shape[1] == 2 else None
    if C is None:
        raise ValueError("C is required for states with more than two dimensions")
    C = np.asarray(C, dtype=float)
    positions = states @ C.T
    images = render_batch(positions, cfg) if len(states) else np.zeros((0, cfg.height, cfg.width))
    meta = {
        "seed": seed,
        "description": description,
        "scene": scene_to_dict(cfg),
        "C": C.tolist(),
        "count": int(len(states)),
    }
    return PerceptionDataset(states=states, positions=positions, images=images, meta=meta)


@dataclass
class LinearPerceptionMap:
    """Affine map from flattened pixels to the measured position: y = W z + b."""

    weights: np.ndarray  # (l, pixel_count)
    bias: np.ndarray     # (l,)
    ridge: float
    image_shape: tuple[int, int]
    rank_deficient: bool = False

    @property
    def output_dim(self) -> int:
        return self.weights.shape[0]


def fit_linear_map(ds: PerceptionDataset, ridge: float) -> LinearPerceptionMap:
    """Ridge-regularized least squares from raw pixels (plus a constant feature)
    to the rendered positions.

    The dual form is used when samples are fewer than features; it satisfies the
    primal normal equations exactly. ridge = 0 falls back to the minimum-norm
    least-squares solution and flags the map as rank-deficient territory.
    """
    if len(ds) == 0:
        raise ValueError("empty dataset")
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    Z = ds.images.reshape(len(ds), -1)
    F = np.hstack([Z, np.ones((len(ds), 1))])
    Y = ds.positions
    n_samples, n_feat = F.shape
    rank_deficient = False
    if ridge == 0.0:
        beta, _, rank, _ = np.linalg.lstsq(F, Y, rcond=None)
        if rank < min(n_samples, n_feat):
            rank_deficient = True
            warnings.warn("ridge = 0 with rank-deficient features: minimum-norm solution selected")
    elif n_samples < n_feat:
        G = F @ F.T + ridge * np.eye(n_samples)
        beta = F.T @ np.linalg.solve(G, Y)
    else:
        G = F.T @ F + ridge * np.eye(n_feat)
        beta = np.linalg.solve(G, F.T @ Y)
    resid = F.T @ (F @ beta) + ridge * beta - F.T @ Y
    rel = float(np.max(np.abs(resid))) / max(1.0, float(np.max(np.abs(F.T @ Y))))
    if ridge > 0 and rel > 1e-8:
        raise RuntimeError(f"normal-equation residual {rel:.3e} exceeds 1e-8")
    h, w = ds.images.shape[1:]
    return LinearPerceptionMap(
        weights=np.ascontiguousarray(beta[:-1].T),
        bias=beta[-1].copy(),
        ridge=float(ridge),
        image_shape=(h, w),
        rank_deficient=rank_deficient,
    )


def apply_map(p: LinearPerceptionMap, z: Image) -> np.ndarray:
    """Evaluate the virtual sensor on one frame."""
    if z.pixels.shape != p.image_shape:
        raise ValueError(f"image shape {z.pixels.shape} does not match training shape {p.image_shape}")
    return p.weights @ z.flatten() + p.bias


def apply_map_batch(p: LinearPerceptionMap, frames: np.ndarray) -> np.ndarray:
    if frames.shape[1:] != p.image_shape:
        raise ValueError("image shape mismatch")
    return frames.reshape(len(frames), -1) @ p.weights.T + p.bias


def perceived_positions(p: LinearPerceptionMap, positions: np.ndarray, cfg: CircleSceneConfig) -> np.ndarray:
    """p(q(pos)) for a batch of planar positions."""
    return apply_map_batch(p, render_batch(positions, cfg))


def error_function(p: LinearPerceptionMap, cfg: CircleSceneConfig, C, x) -> np.ndarray:
    """Perception error e(x) = p(q(Cx)) - Cx at one full state."""
    C = np.asarray(C, dtype=float)
    pos = C @ np.asarray(x, dtype=float)
    return apply_map(p, render_circle(pos, cfg)) - pos


def error_function_positions(p: LinearPerceptionMap, cfg: CircleSceneConfig, positions: np.ndarray) -> np.ndarray:
    """Batched error over planar positions: e(pos) = p(q(pos)) - pos."""
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    return perceived_positions(p, positions, cfg) - positions


# ---------------------------------------------------------------------------
# serialization


def scene_to_dict(cfg: CircleSceneConfig) -> dict:
    return {
        "width": cfg.width,
        "height": cfg.height,
        "world_window": list(cfg.world_window),
        "radius": cfg.radius,
        "blur_sigma": cfg.blur_sigma,
        "background": cfg.background,
        "peak": cfg.peak,
    }


def scene_from_dict(d: dict) -> CircleSceneConfig:
    return CircleSceneConfig(
        width=int(d["width"]),
        height=int(d["height"]),
        world_window=tuple(d["world_window"]),
        radius=float(d["radius"]),
        blur_sigma=float(d["blur_sigma"]),
        background=float(d.get("background", 0.0)),
        peak=float(d.get("peak", 1.0)),
    )


def write_pgm(path: Path, pixels: np.ndarray):
    """16-bit binary PGM (big-endian), lossless for render_batch output."""
    arr = np.round(np.asarray(pixels) * _QUANT).astype(">u2")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{_QUANT}\n".encode())
        f.write(arr.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    parts = data.split(b"\n", 3)
    if parts[0].strip() != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    maxval = int(parts[2])
    arr = np.frombuffer(parts[3], dtype=">u2" if maxval > 255 else "u1", count=w * h)
    return arr.reshape(h, w).astype(float) / maxval


def save_dataset(ds: PerceptionDataset, directory: Path):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = dict(ds.meta)
    meta["count"] = len(ds)
    with open(directory / "meta.json", "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
    for i in range(len(ds)):
        stem = f"{i + 1:06d}"
        write_pgm(directory / f"{stem}.pgm", ds.images[i])
        with open(directory / f"{stem}.json", "w") as f:
            json.dump({"state": ds.states[i].tolist(), "position": ds.positions[i].tolist()}, f)


def load_dataset(directory: Path) -> PerceptionDataset:
    directory = Path(directory)
    with open(directory / "meta.json") as f:
        meta = json.load(f)
    count = int(meta["count"])
    states, positions, images = [], [], []
    for i in range(count):
        stem = f"{i + 1:06d}"
        with open(directory / f"{stem}.json") as f:
            side = json.load(f)
        states.append(side["state"])
        positions.append(side["position"])
        images.append(read_pgm(directory / f"{stem}.pgm"))
    scene = scene_from_dict(meta["scene"])
    return PerceptionDataset(
        states=np.array(states, dtype=float).reshape(count, -1),
        positions=np.array(positions, dtype=float).reshape(count, -1),
        images=np.array(images, dtype=float).reshape(count, scene.height, scene.width),
        meta=meta,
    )


def map_to_dict(p: LinearPerceptionMap) -> dict:
    return {
        "weights": p.weights.tolist(),
        "bias": p.bias.tolist(),
        "ridge": p.ridge,
        "image_shape": list(p.image_shape),
        "rank_deficient": p.rank_deficient,
    }


def map_from_dict(d: dict) -> LinearPerceptionMap:
    return LinearPerceptionMap(
        weights=np.array(d["weights"], dtype=float),
        bias=np.array(d["bias"], dtype=float),
        ridge=float(d["ridge"]),
        image_shape=tuple(d["image_shape"]),
        rank_deficient=bool(d.get("rank_deficient", False)),
    )
