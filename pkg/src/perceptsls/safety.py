"""Data-dependent perception-error bounds and the safe set.

All distances here are measured in the output coordinates the perception map
predicts (planar position, the image of C): the error function factors through
Cx, so slope bounds estimated on the position subspace bound the full-state
quotient as well, and the safe set is a union of position-space l-inf balls
around the training points.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .perception import (
    CircleSceneConfig,
    LinearPerceptionMap,
    PerceptionDataset,
    apply_map_batch,
    error_function_positions,
)


@dataclass
class SafeSetParams:
    r: float        # validity radius of the slope bound (l-inf, position units)
    S: float        # corrected slope bound (error units per position unit)
    R0: float       # training-error bound
    gamma: float    # certified error budget
    epsilon: float  # cover pitch used for slope estimation
    tau: float      # assumed minimum distance at which the max slope is attained
    L: float        # assumed local Lipschitz constant of the error function

    def __post_init__(self):
        if not (0 < self.tau <= self.r):
            raise ValueError("require 0 < tau <= r")
        if not (0 < self.epsilon <= self.r):
            raise ValueError("require 0 < epsilon <= r")
        if min(self.S, self.R0, self.gamma, self.L) < 0:
            raise ValueError("S, R0, gamma, L must be nonnegative")

    def to_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in ("r", "S", "R0", "gamma", "epsilon", "tau", "L")}

    @classmethod
    def from_dict(cls, d: dict) -> "SafeSetParams":
        return cls(**{k: float(d[k]) for k in ("r", "S", "R0", "gamma", "epsilon", "tau", "L")})


@dataclass
class SlopeEstimate:
    """Per-training-point maxima of the slope quotient plus the inflation inputs."""

    per_point: dict[int, float]
    epsilon: float
    tau: float
    L: float
    attained_distance: dict[int, float] = field(default_factory=dict)

    @property
    def s_hat(self) -> float:
        return max(self.per_point.values())

    @property
    def corrected(self) -> float:
        return self.s_hat * (1.0 + self.epsilon / self.tau) + self.L * self.epsilon / self.tau

    def to_dict(self) -> dict:
        return {
            "per_point": {str(k): v for k, v in self.per_point.items()},
            "epsilon": self.epsilon,
            "tau": self.tau,
            "L": self.L,
            "attained_distance": {str(k): v for k, v in self.attained_distance.items()},
            "s_hat": self.s_hat,
            "corrected": self.corrected,
        }


def training_error(ds: PerceptionDataset, p: LinearPerceptionMap) -> float:
    """R0 = max over the training pairs of |p(z_d) - C x_d| (l-inf)."""
    if len(ds) == 0:
        raise ValueError("empty dataset")
    pred = apply_map_batch(p, ds.images)
    return float(np.max(np.abs(pred - ds.positions)))


def cover_grid(r: float, epsilon: float, dim: int = 2) -> np.ndarray:
    """Deterministic axis-aligned epsilon-cover of the l-inf ball B_r(0), center excluded.

    Per axis: offsets {i epsilon : |i| <= ceil(r/epsilon)} with the outermost
    point clamped to +-r, so each orthant holds ceil(r/epsilon)^dim points and
    the cover radius stays below epsilon.
    """
    if not (0 < epsilon <= r):
        raise ValueError("require 0 < epsilon <= r")
    K = int(np.ceil(r / epsilon - 1e-12))
    pos = np.minimum(np.arange(1, K + 1) * epsilon, r)
    pos = np.unique(pos)
    axis = np.concatenate([-pos[::-1], [0.0], pos])
    grids = np.meshgrid(*([axis] * dim), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    keep = np.any(pts != 0.0, axis=1)
    return pts[keep]


def estimate_slope_fn(err_fn, pos_d: np.ndarray, r: float, epsilon: float) -> tuple[float, float]:
    """Max slope quotient |e(x) - e(x_d)| / |x - x_d| over the epsilon-cover of B_r(pos_d).

    err_fn maps positions (B, 2) to errors (B, l). Returns (max, distance at
    which the max was attained).
    """
    pos_d = np.asarray(pos_d, dtype=float)
    offs = cover_grid(r, epsilon, dim=pos_d.shape[0])
    ed = err_fn(pos_d[None, :])[0]
    E = err_fn(pos_d[None, :] + offs)
    dist = np.max(np.abs(offs), axis=1)
    s = np.max(np.abs(E - ed[None, :]), axis=1) / dist
    k = int(np.argmax(s))
    return float(s[k]), float(dist[k])


def estimate_slope(
    p: LinearPerceptionMap,
    cfg: CircleSceneConfig,
    C,
    x_d,
    r: float,
    epsilon: float,
    seed=None,
) -> float:
    """Observed slope bound around one training state over a deterministic grid.

    The cover is deterministic; `seed` is accepted for interface stability and
    unused. The grid lives in the position subspace because the error function
    factors through Cx.
    """
    del seed
    C = np.asarray(C, dtype=float)
    pos_d = C @ np.asarray(x_d, dtype=float)
    s, _ = estimate_slope_fn(lambda P: error_function_positions(p, cfg, P), pos_d, r, epsilon)
    return s


def estimate_slopes_dataset(
    p: LinearPerceptionMap,
    cfg: CircleSceneConfig,
    ds: PerceptionDataset,
    r: float,
    epsilon: float,
    tau: float,
    L: float,
    subsample: int | None = None,
) -> SlopeEstimate:
    """Slope estimates around every training point (optionally an evenly spaced subset)."""
    idxs = range(len(ds)) if subsample is None else range(0, len(ds), max(1, len(ds) // subsample))
    err_fn = lambda P: error_function_positions(p, cfg, P)  # noqa: E731
    per_point: dict[int, float] = {}
    attained: dict[int, float] = {}
    for i in idxs:
        s, d = estimate_slope_fn(err_fn, ds.positions[i], r, epsilon)
        per_point[int(i)] = s
        attained[int(i)] = d
    return SlopeEstimate(per_point=per_point, epsilon=epsilon, tau=tau, L=L, attained_distance=attained)


def corrected_slope(estimate: SlopeEstimate) -> float:
    """Prop-style inflation S <= S_hat (1 + eps/tau) + L eps/tau of the observed maximum."""
    if estimate.tau <= 0:
        raise ValueError("tau must be positive")
    return estimate.corrected


def safe_set_contains(
    params: SafeSetParams,
    ds: PerceptionDataset,
    p: LinearPerceptionMap,
    x,
) -> tuple[bool, int | None]:
    """Membership test for the safe set: true iff some training pair (x_d, z_d) has
    |C x - C x_d| <= r and |p(z_d) - C x_d| + S |C x - C x_d| <= gamma.

    Distances are position-space l-inf; ties in the witness break to the lowest
    training index. `x` may be a full state (projected through the dataset's C)
    or a bare position.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[0] == ds.positions.shape[1]:
        pos = x
    else:
        C = np.asarray(ds.meta["C"], dtype=float)
        pos = C @ x
    dists = np.max(np.abs(ds.positions - pos[None, :]), axis=1)
    residuals = np.max(np.abs(apply_map_batch(p, ds.images) - ds.positions), axis=1)
    ok = (dists <= params.r) & (residuals + params.S * dists <= params.gamma)
    if not np.any(ok):
        return False, None
    return True, int(np.argmax(ok))


def nearest_training_distance(ds: PerceptionDataset, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-probe (min l-inf distance to the training positions, argmin index)."""
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    out_d = np.empty(len(positions))
    out_i = np.empty(len(positions), dtype=int)
    train = ds.positions
    chunk = max(1, int(2e6 // max(len(train), 1)))
    for a in range(0, len(positions), chunk):
        block = positions[a : a + chunk]
        d = np.max(np.abs(block[:, None, :] - train[None, :, :]), axis=2)
        out_i[a : a + len(block)] = np.argmin(d, axis=1)
        out_d[a : a + len(block)] = d[np.arange(len(block)), out_i[a : a + len(block)]]
    return out_d, out_i
