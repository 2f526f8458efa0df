"""Discrete-time LTI plants, FIR transfer operators, norms, and closed-loop simulation.

Conventions used throughout the package:

* signals are real vector sequences indexed from k = 0,
* FIR operators are strictly proper: tap t multiplies the input from t steps
  ago, taps run t = 1..T,
* the norm triple is (elementwise max, sup over time, l-inf induced), so the
  operator norm of an FIR map is the max over output rows of the summed
  absolute tap entries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DareError(RuntimeError):
    """Riccati fixed-point iteration failed to converge; carries the last residual."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


def _as_matrix(M, name: str) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise ValueError(f"{name} must be a 2-D matrix, got shape {M.shape}")
    return M


@dataclass(frozen=True)
class LtiSystem:
    """Plant x_{k+1} = A x_k + B u_k + H w_k with measurement matrix C.

    dt is metadata (sample period in seconds); dynamics are discrete-time.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    H: np.ndarray
    dt: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "A", _as_matrix(self.A, "A"))
        object.__setattr__(self, "B", _as_matrix(self.B, "B"))
        object.__setattr__(self, "C", _as_matrix(self.C, "C"))
        object.__setattr__(self, "H", _as_matrix(self.H, "H"))
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ValueError("A must be square")
        if self.B.shape[0] != n:
            raise ValueError("B row count must match A")
        if self.C.shape[1] != n:
            raise ValueError("C column count must match A")
        if self.H.shape[0] != n:
            raise ValueError("H row count must match A")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def nx(self) -> int:
        return self.A.shape[0]

    @property
    def nu(self) -> int:
        return self.B.shape[1]

    @property
    def ny(self) -> int:
        return self.C.shape[0]

    @property
    def nw(self) -> int:
        return self.H.shape[1]


@dataclass(frozen=True)
class Signal:
    """Finite sequence of real vectors with one shared dimension, indexed from 0."""

    samples: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        if s.ndim != 2:
            raise ValueError("samples must be (N, d)")
        object.__setattr__(self, "samples", s)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class FirOperator:
    """Strictly proper FIR convolution operator given by taps F(1), ..., F(T)."""

    taps: np.ndarray  # (T, p, q)

    def __post_init__(self):
        t = np.asarray(self.taps, dtype=float)
        if t.ndim != 3 or t.shape[0] < 1:
            raise ValueError("taps must be (T, p, q) with T >= 1")
        object.__setattr__(self, "taps", t)

    @property
    def horizon(self) -> int:
        return self.taps.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.taps.shape[1], self.taps.shape[2]


@dataclass(frozen=True)
class ResponseQuartet:
    """Closed-loop FIR responses {Phi_xw, Phi_xe, Phi_uw, Phi_ue} over one horizon.

    Phi_xw multiplies the state-injected disturbance Hw, Phi_xe the measurement
    error e; first taps satisfy Phi_xw(1) = I, Phi_xe(1) = 0, Phi_uw(1) = 0.
    """

    phi_xw: FirOperator
    phi_xe: FirOperator
    phi_uw: FirOperator
    phi_ue: FirOperator

    def __post_init__(self):
        T = self.phi_xw.horizon
        if not (self.phi_xe.horizon == self.phi_uw.horizon == self.phi_ue.horizon == T):
            raise ValueError("all four responses must share one horizon")
        n = self.phi_xw.shape[0]
        if self.phi_xw.shape[1] != n:
            raise ValueError("phi_xw must be square")
        if np.max(np.abs(self.phi_xw.taps[0] - np.eye(n))) > 1e-10:
            raise ValueError("phi_xw tap 1 must equal the identity")

    @property
    def T(self) -> int:
        return self.phi_xw.horizon

    def blocks(self, t: int) -> np.ndarray:
        """Stacked tap [[Phi_xw, Phi_xe], [Phi_uw, Phi_ue]] at 1-based time t."""
        return np.block(
            [
                [self.phi_xw.taps[t - 1], self.phi_xe.taps[t - 1]],
                [self.phi_uw.taps[t - 1], self.phi_ue.taps[t - 1]],
            ]
        )


@dataclass
class StateSpaceController:
    """Feedback law u_k = Ck z_k, z_{k+1} = Ak z_k + Bk y_k (strictly proper)."""

    Ak: np.ndarray
    Bk: np.ndarray
    Ck: np.ndarray
    state: np.ndarray = field(default=None)  # type: ignore[assignment]
    strictly_proper: bool = True

    def __post_init__(self):
        self.Ak = _as_matrix(self.Ak, "Ak")
        self.Bk = _as_matrix(self.Bk, "Bk")
        self.Ck = _as_matrix(self.Ck, "Ck")
        nz = self.Ak.shape[0]
        if self.Ak.shape != (nz, nz) or self.Bk.shape[0] != nz or self.Ck.shape[1] != nz:
            raise ValueError("controller realization dimensions are inconsistent")
        if self.state is None:
            self.state = np.zeros(nz)

    def reset(self):
        self.state = np.zeros(self.Ak.shape[0])

    def output(self) -> np.ndarray:
        return self.Ck @ self.state

    def update(self, y: np.ndarray):
        self.state = self.Ak @ self.state + self.Bk @ y


@dataclass
class FirController:
    """u_k = sum_t K(t) y_{k-t}; strictly proper by construction (no K(0) term)."""

    taps: np.ndarray  # (T_K, m, l)
    truncation_diagnostic: float | None = None

    def __post_init__(self):
        t = np.asarray(self.taps, dtype=float)
        if t.ndim != 3 or t.shape[0] < 1:
            raise ValueError("taps must be (T_K, m, l)")
        self.taps = t

    @property
    def horizon(self) -> int:
        return self.taps.shape[0]


def linf_signal_norm(s: Signal) -> float:
    """sup over k of the max-absolute-entry norm of s_k."""
    if len(s) == 0:
        raise ValueError("empty signal")
    return float(np.max(np.abs(s.samples)))


def l1_operator_norm(F: FirOperator) -> float:
    """l-inf -> l-inf induced norm: max over output rows of sum_t sum_j |F(t)_ij|."""
    return float(np.max(np.sum(np.abs(F.taps), axis=(0, 2))))


def frobenius_cost(F: FirOperator) -> float:
    """Squared H2 cost sum_t trace(F(t)^T F(t))."""
    return float(np.sum(F.taps**2))


def convolve(F: FirOperator, s: Signal) -> Signal:
    """Apply the strictly proper convolution: out_k = sum_{t=1}^{min(k,T)} F(t) s_{k-t}."""
    if F.shape[1] != s.dim:
        raise ValueError(f"tap input dimension {F.shape[1]} != sample dimension {s.dim}")
    N = len(s)
    out = np.zeros((N, F.shape[0]))
    for t in range(1, min(F.horizon, N - 1) + 1):
        out[t:] += s.samples[: N - t] @ F.taps[t - 1].T
    return Signal(out)


def fir_compose(F: FirOperator, G: FirOperator, horizon: int | None = None) -> FirOperator:
    """Tap-wise convolution (F G)(t) = sum_{a+b=t} F(a) G(b), truncated to `horizon`."""
    if F.shape[1] != G.shape[0]:
        raise ValueError("inner dimensions do not match")
    T = horizon if horizon is not None else F.horizon + G.horizon
    taps = np.zeros((T, F.shape[0], G.shape[1]))
    for a in range(1, F.horizon + 1):
        bmax = min(G.horizon, T - a)
        for b in range(1, bmax + 1):
            taps[a + b - 1] += F.taps[a - 1] @ G.taps[b - 1]
    return FirOperator(taps)


def double_integrator(dt: float, axes: int = 1, h_matrix: np.ndarray | None = None) -> LtiSystem:
    """Per-axis blocks A = [[1, dt], [0, 1]], B = [0; 1]; C extracts positions.

    State ordering is axis-major: [p1, v1, p2, v2, ...]. H defaults to the
    identity (disturbance on every state); pass h_matrix to override.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if axes not in (1, 2):
        raise ValueError("axes must be 1 or 2")
    Ab = np.array([[1.0, dt], [0.0, 1.0]])
    Bb = np.array([[0.0], [1.0]])
    A = np.kron(np.eye(axes), Ab)
    B = np.kron(np.eye(axes), Bb)
    C = np.zeros((axes, 2 * axes))
    for i in range(axes):
        C[i, 2 * i] = 1.0
    H = np.eye(2 * axes) if h_matrix is None else np.asarray(h_matrix, dtype=float)
    return LtiSystem(A, B, C, H, dt=dt)


def dare_solve(A, B, Q, R, tol: float = 1e-10, max_iter: int = 10000) -> np.ndarray:
    """Solve P = A'PA - A'PB (B'PB + R)^{-1} B'PA + Q by fixed-point iteration from P = Q.

    Returns P with max-entry DARE residual <= tol, or raises DareError carrying
    the last residual.
    """
    A = _as_matrix(A, "A")
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    Q = _as_matrix(Q, "Q")
    R = np.atleast_2d(np.asarray(R, dtype=float))

    def step(P):
        G = B.T @ P @ B + R
        return A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(G, B.T @ P @ A) + Q

    P = Q.copy()
    residual = np.inf
    for _ in range(max_iter):
        Pn = step(P)
        residual = float(np.max(np.abs(Pn - P)))
        P = Pn
        if residual <= tol:
            # one more application so the reported residual is of the fixed point
            final = float(np.max(np.abs(step(P) - P)))
            if final <= tol:
                return P
    raise DareError(f"DARE iteration did not converge below {tol}", residual)


def lqr_gain(A, B, Q, R) -> np.ndarray:
    """Static gain K with u = -K x optimal for the (A, B, Q, R) regulator."""
    P = dare_solve(A, B, Q, R)
    B = np.asarray(B, dtype=float).reshape(np.asarray(A).shape[0], -1)
    return np.linalg.solve(B.T @ P @ B + np.atleast_2d(np.asarray(R, dtype=float)), B.T @ P @ A)


def lqg_controller(sys: LtiSystem, Q, R, W, V) -> StateSpaceController:
    """Certainty-equivalent controller u_k = -K_lqr x̂_{k|k-1} with the steady-state
    one-step predictor x̂_{k+1} = A x̂ + B u + L (y_k - C x̂), L = A P C'(C P C' + V)^{-1}.

    The one-step-predictor arrangement keeps the closed loop strictly proper.
    W and V are the process/measurement covariance weights of the filter design.
    """
    A, B, C = sys.A, sys.B, sys.C
    K = lqr_gain(A, B, Q, R)
    W = np.atleast_2d(np.asarray(W, dtype=float))
    V = np.atleast_2d(np.asarray(V, dtype=float))
    P = dare_solve(A.T, C.T, W, V)
    L = A @ P @ C.T @ np.linalg.inv(C @ P @ C.T + V)
    Ak = A - B @ K - L @ C
    ctrl = StateSpaceController(Ak=Ak, Bk=L, Ck=-K)
    Acl = np.block([[A, -B @ K], [L @ C, Ak]])
    rho = float(np.max(np.abs(np.linalg.eigvals(Acl))))
    if rho >= 1.0:
        raise ValueError(f"LQG closed loop is not stable (spectral radius {rho:.6f})")
    return ctrl


@dataclass
class SimulationResult:
    """Closed-loop trajectory record; all arrays have `horizon` rows."""

    x: np.ndarray  # states
    u: np.ndarray  # inputs
    y: np.ndarray  # measurements fed to the controller
    e: np.ndarray  # y - C x


def fir_control_output(taps: np.ndarray, y_hist: np.ndarray, k: int) -> np.ndarray:
    """u_k = sum_t K(t) y_{k-t} given the measurement history rows y_0..y_{k-1}."""
    kk = min(k, taps.shape[0])
    if kk == 0:
        return np.zeros(taps.shape[1])
    window = y_hist[k - kk : k][::-1]
    return np.einsum("tml,tl->m", taps[:kk], window)


def simulate_closed_loop(
    sys: LtiSystem,
    controller,
    sensor,
    w: Signal | None,
    horizon: int,
    x0: np.ndarray | None = None,
) -> SimulationResult:
    """Run the loop x_{k+1} = A x_k + B u_k + H w_k with u_k computed from y_{0:k-1}.

    `sensor` maps (x_k, k) to the measurement vector of dimension ny; it may be
    the exact linear measurement plus a noise signal, or a perception pipeline.
    Aborts with the offending time index if the state or measurement becomes
    non-finite.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    n, nu, ny = sys.nx, sys.nu, sys.ny
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    if x.shape != (n,):
        raise ValueError("x0 has the wrong dimension")
    wsamp = None
    if w is not None:
        if w.dim != sys.nw:
            raise ValueError("disturbance dimension does not match H")
        wsamp = w.samples
    if isinstance(controller, StateSpaceController):
        controller.reset()

    xs = np.zeros((horizon, n))
    us = np.zeros((horizon, nu))
    ys = np.zeros((horizon, ny))
    es = np.zeros((horizon, ny))
    for k in range(horizon):
        y = np.asarray(sensor(x, k), dtype=float)
        if y.shape != (ny,):
            raise ValueError(f"sensor returned dimension {y.shape}, expected ({ny},)")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise FloatingPointError(f"non-finite state or measurement at step {k}")
        ys[k] = y
        if isinstance(controller, FirController):
            u = fir_control_output(controller.taps, ys, k)
        else:
            u = controller.output()
            controller.update(y)
        xs[k], us[k] = x, u
        es[k] = y - sys.C @ x
        wk = wsamp[k] if (wsamp is not None and k < len(wsamp)) else np.zeros(sys.nw)
        x = sys.A @ x + sys.B @ u + sys.H @ wk
    return SimulationResult(x=xs, u=us, y=ys, e=es)


def closed_loop_matrices(sys: LtiSystem, controller) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(A_cl, B_cl, C_cl) of the loop with e injected into y = Cx + e; C_cl picks x.

    For an FIR controller the realization state is [x; y_{k-1}; ...; y_{k-T_K}].
    """
    A, B, C = sys.A, sys.B, sys.C
    n, ny = sys.nx, sys.ny
    if isinstance(controller, StateSpaceController):
        Ak, Bk, Ck = controller.Ak, controller.Bk, controller.Ck
        Acl = np.block([[A, B @ Ck], [Bk @ C, Ak]])
        Bcl = np.vstack([np.zeros((n, ny)), Bk])
    elif isinstance(controller, FirController):
        TK = controller.horizon
        Krow = controller.taps.transpose(1, 0, 2).reshape(sys.nu, TK * ny)
        shift = np.zeros((TK * ny, TK * ny))
        if TK > 1:
            shift[ny:, :-ny] = np.eye((TK - 1) * ny)
        Acl = np.block([[A, B @ Krow], [np.zeros((TK * ny, n)), shift]])
        Acl[n : n + ny, :n] = C
        Bcl = np.zeros((n + TK * ny, ny))
        Bcl[n : n + ny] = np.eye(ny)
    else:
        raise TypeError(f"unsupported controller type {type(controller)!r}")
    Ccl = np.hstack([np.eye(n), np.zeros((n, Acl.shape[0] - n))])
    return Acl, Bcl, Ccl


def impulse_response_norm(Acl, Bcl, Ccl, tol: float = 1e-14, max_taps: int = 100000) -> tuple[float, np.ndarray]:
    """L1 (l-inf induced) norm of the map e -> C_cl state, summed to numerical convergence.

    Returns (norm, dc_gain); requires a stable A_cl so the tap series converges.
    """
    rho = float(np.max(np.abs(np.linalg.eigvals(Acl))))
    if rho >= 1.0:
        raise ValueError(f"closed loop unstable (spectral radius {rho:.6f}); norm diverges")
    rowsums = np.zeros(Ccl.shape[0])
    M = np.eye(Acl.shape[0])
    t = 0
    while t < max_taps:
        tap = Ccl @ M @ Bcl
        rowsums += np.sum(np.abs(tap), axis=1)
        M = Acl @ M
        t += 1
        if t > Acl.shape[0] and np.max(np.abs(tap)) < tol * max(1.0, float(np.max(rowsums))):
            break
    dc = Ccl @ np.linalg.solve(np.eye(Acl.shape[0]) - Acl, Bcl)
    return float(np.max(rowsums)), dc


def extract_quartet(sys: LtiSystem, controller, T: int) -> ResponseQuartet:
    """Measure the four closed-loop response tap sequences by state-space impulses.

    Exact linear algebra on the closed-loop realization, no rollouts; used as an
    oracle against synthesized quartets and to build LQG reference responses.
    """
    Acl, Bcl, _ = closed_loop_matrices(sys, controller)
    n, m, ny = sys.nx, sys.nu, sys.ny
    nz = Acl.shape[0]
    # state-injection enters the x block directly; e-injection uses Bcl
    Bx = np.zeros((nz, n))
    Bx[:n] = np.eye(n)
    Cx = np.hstack([np.eye(n), np.zeros((n, nz - n))])
    if isinstance(controller, StateSpaceController):
        Cu = np.hstack([np.zeros((m, n)), controller.Ck])
    else:
        TK = controller.horizon
        Krow = controller.taps.transpose(1, 0, 2).reshape(m, TK * ny)
        Cu = np.hstack([np.zeros((m, n)), Krow])
    xw = np.zeros((T, n, n))
    xe = np.zeros((T, n, ny))
    uw = np.zeros((T, m, n))
    ue = np.zeros((T, m, ny))
    Mw, Me = Bx.copy(), Bcl.copy()
    for t in range(T):
        xw[t], xe[t] = Cx @ Mw, Cx @ Me
        uw[t], ue[t] = Cu @ Mw, Cu @ Me
        Mw, Me = Acl @ Mw, Acl @ Me
    return ResponseQuartet(FirOperator(xw), FirOperator(xe), FirOperator(uw), FirOperator(ue))
