"""End-to-end experiments: perception-in-the-loop tracking rollouts, error-vs-distance
profiles, and the necessity-of-robustness demonstration on the double integrator.

Tracking runs in waypoint-error coordinates: the plant state is xi - r with the
waypoint steps acting as process disturbance, the controller measures
p(image) - r_position, and the rendered circle sits at the true plant position.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lti import (
    FirController,
    LtiSystem,
    Signal,
    StateSpaceController,
    closed_loop_matrices,
    convolve,
    double_integrator,
    fir_control_output,
    impulse_response_norm,
    lqg_controller,
)
from .perception import (
    CircleSceneConfig,
    LinearPerceptionMap,
    PerceptionDataset,
    apply_map_batch,
    error_function_positions,
    render_batch,
)
from .safety import SafeSetParams, nearest_training_distance
from .synthesis import SynthesisSpec, synthesize_h2_robust, realize_controller


@dataclass
class ReferenceConfig:
    """Periodic circular waypoint orbit in position space; zero velocity targets."""

    center: tuple[float, float] = (0.0, 0.0)
    radius: float = 12.0
    period: int = 1200
    phase: float = 0.0

    def positions(self, n_steps: int, phase: float | None = None) -> np.ndarray:
        ph = self.phase if phase is None else phase
        k = np.arange(n_steps)
        ang = 2.0 * np.pi * k / self.period + ph
        return np.stack(
            [self.center[0] + self.radius * np.cos(ang), self.center[1] + self.radius * np.sin(ang)],
            axis=1,
        )


@dataclass
class ExperimentConfig:
    rollouts: int = 200
    horizon: int = 400
    v_bound: float = 0.1
    seed: int = 0
    controllers: tuple[str, ...] = ("lqg", "nominal-l1", "robust-l1", "robust-h2")

    def __post_init__(self):
        if self.v_bound < 0:
            raise ValueError("perturbation bound must be nonnegative")
        if self.rollouts < 1:
            raise ValueError("rollout count must be >= 1")


@dataclass
class TrackingWorld:
    """Everything a rollout needs: plant, scene, trained map, data, and safe set."""

    esys: LtiSystem                 # tracking-error coordinates, H = -E_position
    scene: CircleSceneConfig
    pmap: LinearPerceptionMap
    dataset: PerceptionDataset
    safety: SafeSetParams
    reference: ReferenceConfig

    def __post_init__(self):
        self._train_residuals = np.max(
            np.abs(apply_map_batch(self.pmap, self.dataset.images) - self.dataset.positions), axis=1
        )

    def safe_mask(self, positions: np.ndarray) -> np.ndarray:
        """Vectorized safe-set membership for a batch of plant positions."""
        d = np.max(np.abs(positions[:, None, :] - self.dataset.positions[None, :, :]), axis=2)
        ok = (d <= self.safety.r) & (self._train_residuals[None, :] + self.safety.S * d <= self.safety.gamma)
        return np.any(ok, axis=1)


@dataclass
class ControllerEntry:
    name: str
    controller: object                       # FirController | StateSpaceController
    quartet: object | None = None            # ResponseQuartet when synthesized
    gamma: float | None = None               # certified error bound when robust
    phi_xe_sel_norm: float | None = None     # |C Phi_xe| for the Lemma-style check
    margin: float | None = None              # robustness margin of the synthesis


@dataclass
class RolloutReport:
    controller: str
    tracking_err: np.ndarray      # (R, N)
    dist_train: np.ndarray        # (R, N)
    perception_err: np.ndarray    # (R, N)
    safe_violation: np.ndarray    # (R, N) bool
    diverged_at: list
    aggregates: dict              # k, q1, median, q3 arrays for the tracking error
    checks: dict = field(default_factory=dict)

    @property
    def n_rollouts(self) -> int:
        return self.tracking_err.shape[0]


def _perturbed_waypoints(ref: ReferenceConfig, horizon: int, v_bound: float, rng, phase: float) -> np.ndarray:
    pos = ref.positions(horizon + 1, phase=phase)
    if v_bound > 0:
        pos = pos + rng.uniform(-v_bound, v_bound, size=pos.shape)
    return pos


def _run_single_rollout(world: TrackingWorld, entry: ControllerEntry, waypoints: np.ndarray, horizon: int):
    """Perception-in-the-loop rollout in error coordinates; divergence is data."""
    esys = world.esys
    n, ny = esys.nx, esys.ny
    C = esys.C
    ctrl = entry.controller
    if isinstance(ctrl, StateSpaceController):
        ctrl.reset()
    w_steps = waypoints[1:] - waypoints[:-1]
    err = np.zeros(n)  # start on the first waypoint
    ys = np.zeros((horizon, ny))
    pos_hist = np.full((horizon, 2), np.nan)
    e_hist = np.full((horizon, ny), np.nan)
    err_hist = np.full((horizon, n), np.nan)
    diverged_at = None
    for k in range(horizon):
        if not np.all(np.isfinite(err)):
            diverged_at = k
            break
        true_pos = C @ err + waypoints[k]
        frame = render_batch(true_pos[None, :], world.scene)[0]
        y = world.pmap.weights @ frame.reshape(-1) + world.pmap.bias - waypoints[k]
        ys[k] = y
        if isinstance(ctrl, FirController):
            u = fir_control_output(ctrl.taps, ys, k)
        else:
            u = ctrl.output()
            ctrl.update(y)
        pos_hist[k] = true_pos
        err_hist[k] = err
        e_hist[k] = y - C @ err
        err = esys.A @ err + esys.B @ u + esys.H @ w_steps[k]
    return pos_hist, err_hist, e_hist, diverged_at


def run_tracking_experiment(
    world: TrackingWorld,
    entry: ControllerEntry,
    cfg: ExperimentConfig,
) -> RolloutReport:
    """Perturbed-reference rollouts for one controller, with the closeness and
    error-bound checks evaluated from the recorded signals."""
    R, N = cfg.rollouts, cfg.horizon
    tracking = np.full((R, N), np.nan)
    dist = np.full((R, N), np.nan)
    perr = np.full((R, N), np.nan)
    viol = np.zeros((R, N), dtype=bool)
    diverged = []
    lemma_checks = []
    phases = 2.0 * np.pi * np.arange(R) / R + world.reference.phase
    master = np.random.SeedSequence([cfg.seed, 101])
    seeds = master.spawn(R)
    for i in range(R):
        rng = np.random.default_rng(seeds[i])
        waypoints = _perturbed_waypoints(world.reference, N, cfg.v_bound, rng, phases[i])
        pos, err_hist, e_hist, div = _run_single_rollout(world, entry, waypoints, N)
        diverged.append(div)
        good = np.all(np.isfinite(pos), axis=1)
        tracking[i, good] = np.max(np.abs(pos[good] - waypoints[:N][good]), axis=1)
        if np.any(good):
            d, _ = nearest_training_distance(world.dataset, pos[good])
            dist[i, good] = d
            perr[i, good] = np.max(np.abs(e_hist[good]), axis=1)
            viol[i, good] = ~world.safe_mask(pos[good])
        viol[i, ~good] = True
        if entry.quartet is not None and entry.phi_xe_sel_norm is not None and div is None:
            lemma_checks.append(_closeness_check(world, entry, pos, e_hist, waypoints[:N]))
    q1, med, q3 = np.nanpercentile(tracking, [25, 50, 75], axis=0)
    checks: dict = {
        "max_perception_err": float(np.nanmax(perr)) if np.any(np.isfinite(perr)) else float("nan"),
        "max_dist_train": float(np.nanmax(dist)) if np.any(np.isfinite(dist)) else float("nan"),
        "violations": int(viol.sum()),
        "diverged_rollouts": int(sum(d is not None for d in diverged)),
    }
    if entry.gamma is not None:
        checks["gamma"] = entry.gamma
        checks["error_bound_ok"] = bool(checks["max_perception_err"] <= entry.gamma)
    if lemma_checks:
        checks["closeness_check_margin"] = float(min(lemma_checks))
        checks["closeness_check_ok"] = bool(min(lemma_checks) >= -1e-6)
    return RolloutReport(
        controller=entry.name,
        tracking_err=tracking,
        dist_train=dist,
        perception_err=perr,
        safe_violation=viol,
        diverged_at=diverged,
        aggregates={"k": np.arange(N), "q1": q1, "median": med, "q3": q3},
        checks=checks,
    )


def _closeness_check(world, entry, pos, e_hist, ref_pos):
    """Slack of |x - x_d| <= |x_hat - x_d| + |C Phi_xe| |e| with recorded signals,
    x_d the nearest training point per step (position coordinates)."""
    C = world.esys.C
    xe = entry.quartet.phi_xe
    con = convolve(xe, Signal(e_hist)).samples @ C.T  # C * (Phi_xe e)
    pos_hat = pos - con
    d_act, idx = nearest_training_distance(world.dataset, pos)
    train_pos = world.dataset.positions[idx]
    lhs = float(np.max(np.max(np.abs(pos - train_pos), axis=1)))
    nominal = float(np.max(np.max(np.abs(pos_hat - train_pos), axis=1)))
    e_norm = float(np.max(np.abs(e_hist)))
    rhs = nominal + entry.phi_xe_sel_norm * e_norm
    return rhs - lhs


def perception_error_profile(
    pmap: LinearPerceptionMap,
    cfg: CircleSceneConfig,
    ds: PerceptionDataset,
    probe_states,
) -> list[tuple[float, float, int]]:
    """Rows (dist_to_nearest_train, error_inf, train_index) for each probe state."""
    probes = np.atleast_2d(np.asarray(probe_states, dtype=float))
    if probes.size == 0:
        return []
    if probes.shape[1] != ds.positions.shape[1]:
        C = np.asarray(ds.meta["C"], dtype=float)
        probes = probes @ C.T
    d, idx = nearest_training_distance(ds, probes)
    errs = np.max(np.abs(error_function_positions(pmap, cfg, probes)), axis=1)
    return [(float(d[i]), float(errs[i]), int(idx[i])) for i in range(len(probes))]


# ---------------------------------------------------------------------------
# necessity of robustness


@dataclass
class NecessityReport:
    phi_xe_norm: float          # l1 norm of the unconstrained-optimal error response
    S: float                    # 1 / phi_xe_norm
    J: np.ndarray               # adversarial error derivative
    dc_condition_error: float   # | |Phi_xe|_l1 - |Phi_xe(z=1)|_{inf->inf} |
    applicable: bool
    rows: list = field(default_factory=list)  # (alpha, spectral_radius, verdict)

    def verdict_of(self, alpha: float) -> str:
        for a, _, v in self.rows:
            if a == alpha:
                return v
        raise KeyError(alpha)


def necessity_verdict(rho: float) -> str:
    if rho > 1.0 + 1e-9:
        return "unstable"
    if rho < 1.0 - 1e-6:
        return "stable"
    return "marginal"


def necessity_demo(
    dt: float,
    alphas,
    T: int = 60,
    T_K: int | None = None,
    dc_tol: float = 1e-6,
) -> NecessityReport:
    """Reproduce the regulation example where the error-response cap is tight.

    Steps: (i) unconstrained H2-optimal (LQG) loop and its l1 error-response
    norm; (ii) S = 1/norm and the rank-one worst-case derivative J built from
    the DC-gain witness; (iii) numerical check that the l1 norm is attained at
    DC; (iv) for each cap alpha, synthesize, realize, and report the spectral
    radius of the loop linearized with e(x) = J x.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    base = double_integrator(dt, axes=1)
    sysC = LtiSystem(base.A, base.B, np.eye(2), np.eye(2), dt=dt)  # y = x + e
    ctrl = lqg_controller(sysC, np.eye(2), np.eye(1), np.eye(2), np.eye(2))
    Acl, Bcl, Ccl = closed_loop_matrices(sysC, ctrl)
    norm, dc = impulse_response_norm(Acl, Bcl, Ccl)
    dc_err = abs(norm - float(np.max(np.sum(np.abs(dc), axis=1))))
    S = 1.0 / norm
    i_star = int(np.argmax(np.sum(np.abs(dc), axis=1)))
    w = np.sign(dc[i_star])
    w[w == 0] = 1.0
    v = np.zeros(2)
    v[i_star] = 1.0
    J = S * np.outer(w, v)
    report = NecessityReport(
        phi_xe_norm=norm, S=S, J=J, dc_condition_error=dc_err, applicable=dc_err <= dc_tol
    )
    if not report.applicable:
        return report
    if T_K is None:
        T_K = T + 60
    for alpha in alphas:
        spec = SynthesisSpec(T=T, Q=np.ones(2), R=np.ones(1), mode="robust_h2", alpha=float(alpha))
        res = synthesize_h2_robust(sysC, spec)
        if res.quartet is None:
            report.rows.append((float(alpha), float("nan"), f"synthesis_{res.status}"))
            continue
        K = realize_controller(res.quartet, T_K)
        AclK, BclK, CclK = closed_loop_matrices(sysC, K)
        AclJ = AclK + BclK @ J @ CclK
        rho = float(np.max(np.abs(np.linalg.eigvals(AclJ))))
        report.rows.append((float(alpha), rho, necessity_verdict(rho)))
    return report


# ---------------------------------------------------------------------------
# training-data generation


def lqr_tracking_trajectory(
    esys: LtiSystem,
    K_lqr: np.ndarray,
    waypoints: np.ndarray,
    horizon: int,
) -> np.ndarray:
    """Full-information state-feedback tracking; returns plant states (N, n).

    The controller sees the true error state (measurement y = x), matching the
    protocol used to generate training data.
    """
    n = esys.nx
    err = np.zeros(n)
    states = np.zeros((horizon, n))
    w_steps = waypoints[1:] - waypoints[:-1]
    lift = esys.C.T  # positions into position slots, zero velocity targets
    for k in range(horizon):
        states[k] = err + lift @ waypoints[k]
        u = -K_lqr @ err
        err = esys.A @ err + esys.B @ u + esys.H @ w_steps[k]
    return states
