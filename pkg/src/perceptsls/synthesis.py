"""Finite-horizon system level synthesis: realizability constraints, L1/H2 programs,
and controller realization from closed-loop responses.

The decision variables are the FIR taps of the four closed-loop responses
{Phi_xw, Phi_xe, Phi_uw, Phi_ue}. Realizability is the affine system

    Phi_xw(1) = I,  Phi_xe(1) = 0,  Phi_uw(1) = 0,
    Phi_xw(k+1) = A Phi_xw(k) + B Phi_uw(k),   Phi_xe(k+1) = A Phi_xe(k) + B Phi_ue(k),
    Phi_xw(k+1) = Phi_xw(k) A + Phi_xe(k) C,   Phi_uw(k+1) = Phi_uw(k) A + Phi_ue(k) C,

for k = 1..T-1 together with zero terminal taps at T.  (The time-domain
recursions here are the coefficient-wise form of [zI-A, -B] Phi = [I, 0] and
Phi [zI-A; -C] = [I; 0]; note the C-terms carry index k.)

Two robustness devices are exposed and can be combined: an explicit cap
``alpha`` on the l1 norm of Phi_xe, and the pair of safe-set inequalities

    (S + R0/r) |Phi_xe| + (delta_ref/r) |Phi_xw H| + r_ref/r <= 1
    delta_ref |Phi_xw H| + r_ref + R0 <= gamma (1 - S |Phi_xe|)

whose norms may be restricted to a row selection (the coordinates in which
safe-set distances are measured) via ``SynthesisSpec.sel_rows``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .lti import FirOperator, LtiSystem, ResponseQuartet, FirController, fir_compose
from .qp import solve_qp

RESPONSES = ("xw", "xe", "uw", "ue")

_HIGHS_OPTIONS = {
    "primal_feasibility_tolerance": 1e-9,
    "dual_feasibility_tolerance": 1e-9,
}


# ---------------------------------------------------------------------------
# variable layout and structure detection


def component_partition(sys: LtiSystem) -> np.ndarray:
    """Connected components of the state/input/output/disturbance coupling graph.

    Returns integer labels for the nodes [states | inputs | outputs | w-channels].
    Responses may be restricted to entries whose row and column nodes share a
    component without loss of optimality: the constraint recursions decouple
    per component pair and zeroing cross entries never increases a row sum.
    """
    n, m, l, w = sys.nx, sys.nu, sys.ny, sys.nw
    N = n + m + l + w
    parent = np.arange(N)

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[rb] = ra

    for i, j in zip(*np.nonzero(sys.A)):
        union(i, j)
    for i, j in zip(*np.nonzero(sys.B)):
        union(i, n + j)
    for i, j in zip(*np.nonzero(sys.C)):
        union(n + m + i, j)
    for i, j in zip(*np.nonzero(sys.H)):
        union(i, n + m + l + j)
    return np.array([find(i) for i in range(N)])


def support_masks(sys: LtiSystem) -> dict[str, np.ndarray]:
    """Boolean keep-masks for the four response shapes under the component partition."""
    n, m, l = sys.nx, sys.nu, sys.ny
    lab = component_partition(sys)
    st, inp, out = lab[:n], lab[n : n + m], lab[n + m : n + m + l]
    return {
        "xw": st[:, None] == st[None, :],
        "xe": st[:, None] == out[None, :],
        "uw": inp[:, None] == st[None, :],
        "ue": inp[:, None] == out[None, :],
    }


class VariableLayout:
    """Column indices for the stacked response taps, optionally restricted to a support mask."""

    def __init__(self, sys: LtiSystem, T: int, masks: dict[str, np.ndarray] | None = None):
        n, m, l = sys.nx, sys.nu, sys.ny
        self.T = T
        self.shapes = {"xw": (n, n), "xe": (n, l), "uw": (m, n), "ue": (m, l)}
        self.entry_index: dict[str, np.ndarray] = {}
        self.counts: dict[str, int] = {}
        self.base: dict[str, int] = {}
        offset = 0
        for resp in RESPONSES:
            p, q = self.shapes[resp]
            keep = np.ones((p, q), dtype=bool) if masks is None else masks[resp]
            idx = -np.ones((p, q), dtype=np.int64)
            idx[keep] = np.arange(int(keep.sum()))
            self.entry_index[resp] = idx
            self.counts[resp] = int(keep.sum())
            self.base[resp] = offset
            offset += self.counts[resp] * T
        self.ncols = offset

    def col(self, resp: str, t: int, i: int, j: int) -> int:
        """Column of tap t (1-based) entry (i, j); -1 if outside the support."""
        e = self.entry_index[resp][i, j]
        if e < 0:
            return -1
        return self.base[resp] + (t - 1) * self.counts[resp] + int(e)

    def scatter(self, x: np.ndarray) -> ResponseQuartet:
        """Rebuild the quartet tap arrays from a solution vector."""
        ops = {}
        for resp in RESPONSES:
            p, q = self.shapes[resp]
            taps = np.zeros((self.T, p, q))
            idx = self.entry_index[resp]
            cnt = self.counts[resp]
            keep = idx >= 0
            order = idx[keep]
            block = x[self.base[resp] : self.base[resp] + cnt * self.T].reshape(self.T, cnt)
            taps[:, keep] = block[:, order]
            ops[resp] = FirOperator(taps)
        return ResponseQuartet(ops["xw"], ops["xe"], ops["uw"], ops["ue"])


# ---------------------------------------------------------------------------
# realizability constraints


class ConstraintSystem:
    """Sparse affine system M vec(Phi) = b with every row traceable to a named family."""

    FAMILIES = (
        "phi_xw_initial",
        "phi_xe_initial",
        "phi_uw_initial",
        "dynamics_recursion_x",
        "dynamics_recursion_e",
        "measurement_recursion_x",
        "measurement_recursion_u",
        "terminal",
    )

    def __init__(self, M: sp.csr_matrix, b: np.ndarray, layout: VariableLayout, labels: np.ndarray):
        self.M = M
        self.b = b
        self.layout = layout
        # labels: structured rows (family_code, response_code, t, i, j)
        self.labels = labels

    @property
    def nrows(self) -> int:
        return self.M.shape[0]

    @property
    def ncols(self) -> int:
        return self.M.shape[1]

    def row_label(self, r: int) -> str:
        fam, resp, t, i, j = self.labels[r]
        return f"{self.FAMILIES[fam]}[{RESPONSES[resp]}](t={t}, i={i}, j={j})"

    def residual_vector(self, quartet: ResponseQuartet) -> np.ndarray:
        return self.M @ self._vec(quartet) - self.b

    def residual(self, quartet: ResponseQuartet) -> float:
        return float(np.max(np.abs(self.residual_vector(quartet))))

    def worst_row(self, quartet: ResponseQuartet) -> tuple[float, str]:
        r = np.abs(self.residual_vector(quartet))
        k = int(np.argmax(r))
        return float(r[k]), self.row_label(k)

    def _vec(self, quartet: ResponseQuartet) -> np.ndarray:
        x = np.zeros(self.layout.ncols)
        taps = {
            "xw": quartet.phi_xw.taps,
            "xe": quartet.phi_xe.taps,
            "uw": quartet.phi_uw.taps,
            "ue": quartet.phi_ue.taps,
        }
        for resp in RESPONSES:
            idx = self.layout.entry_index[resp]
            keep = idx >= 0
            cnt = self.layout.counts[resp]
            base = self.layout.base[resp]
            block = taps[resp][:, keep][:, idx[keep]]
            x[base : base + cnt * self.layout.T] = block.reshape(-1)
        return x


class _RowBuilder:
    def __init__(self):
        self.rows: list[int] = []
        self.cols: list[int] = []
        self.data: list[float] = []
        self.b: list[float] = []
        self.labels: list[tuple[int, int, int, int, int]] = []
        self.r = 0

    def add(self, entries, rhs: float, label):
        for c, v in entries:
            self.rows.append(self.r)
            self.cols.append(c)
            self.data.append(v)
        self.b.append(rhs)
        self.labels.append(label)
        self.r += 1


def assemble_constraints(sys: LtiSystem, T: int, masks: dict[str, np.ndarray] | None = None) -> ConstraintSystem:
    """Build the realizability equality system over taps 1..T with zero terminal taps."""
    if T < 2:
        raise ValueError("T must be >= 2")
    A, B, C = sys.A, sys.B, sys.C
    n, m, l = sys.nx, sys.nu, sys.ny
    layout = VariableLayout(sys, T, masks)
    rb = _RowBuilder()
    col = layout.col
    fam = {name: k for k, name in enumerate(ConstraintSystem.FAMILIES)}
    rcode = {name: k for k, name in enumerate(RESPONSES)}

    def initial(resp, shape, famname, identity):
        p, q = shape
        for i in range(p):
            for j in range(q):
                c = col(resp, 1, i, j)
                rhs = 1.0 if (identity and i == j) else 0.0
                if c < 0:
                    continue  # dropped entries are identically zero
                rb.add([(c, 1.0)], rhs, (fam[famname], rcode[resp], 1, i, j))

    initial("xw", (n, n), "phi_xw_initial", True)
    initial("xe", (n, l), "phi_xe_initial", False)
    initial("uw", (m, n), "phi_uw_initial", False)

    Annz = [np.nonzero(A[i])[0] for i in range(n)]
    Bnnz = [np.nonzero(B[i])[0] for i in range(n)]
    AcolT = [np.nonzero(A[:, j])[0] for j in range(n)]
    CcolT = [np.nonzero(C[:, j])[0] for j in range(n)]

    for k in range(1, T):
        # [Phi_xw(k+1)  Phi_xe(k+1)] = A [Phi_xw(k)  Phi_xe(k)] + B [Phi_uw(k)  Phi_ue(k)]
        for i in range(n):
            for j in range(n):
                c0 = col("xw", k + 1, i, j)
                if c0 < 0:
                    continue
                ent = [(c0, 1.0)]
                ent += [(col("xw", k, q, j), -A[i, q]) for q in Annz[i]]
                ent += [(col("uw", k, q, j), -B[i, q]) for q in Bnnz[i]]
                rb.add(ent, 0.0, (fam["dynamics_recursion_x"], rcode["xw"], k, i, j))
            for j in range(l):
                c0 = col("xe", k + 1, i, j)
                if c0 < 0:
                    continue
                ent = [(c0, 1.0)]
                ent += [(col("xe", k, q, j), -A[i, q]) for q in Annz[i]]
                ent += [(col("ue", k, q, j), -B[i, q]) for q in Bnnz[i]]
                rb.add(ent, 0.0, (fam["dynamics_recursion_e"], rcode["xe"], k, i, j))
        # [Phi_xw(k+1); Phi_uw(k+1)] = [Phi_xw(k); Phi_uw(k)] A + [Phi_xe(k); Phi_ue(k)] C
        for i in range(n):
            for j in range(n):
                c0 = col("xw", k + 1, i, j)
                if c0 < 0:
                    continue
                ent = [(c0, 1.0)]
                ent += [(col("xw", k, i, q), -A[q, j]) for q in AcolT[j]]
                ent += [(col("xe", k, i, q), -C[q, j]) for q in CcolT[j]]
                rb.add(ent, 0.0, (fam["measurement_recursion_x"], rcode["xw"], k, i, j))
        for i in range(m):
            for j in range(n):
                c0 = col("uw", k + 1, i, j)
                if c0 < 0:
                    continue
                ent = [(c0, 1.0)]
                ent += [(col("uw", k, i, q), -A[q, j]) for q in AcolT[j]]
                ent += [(col("ue", k, i, q), -C[q, j]) for q in CcolT[j]]
                rb.add(ent, 0.0, (fam["measurement_recursion_u"], rcode["uw"], k, i, j))

    for resp in RESPONSES:
        p, q = layout.shapes[resp]
        for i in range(p):
            for j in range(q):
                c = col(resp, T, i, j)
                if c < 0:
                    continue
                rb.add([(c, 1.0)], 0.0, (fam["terminal"], rcode[resp], T, i, j))

    M = sp.csr_matrix(
        sp.coo_matrix((rb.data, (rb.rows, rb.cols)), shape=(rb.r, layout.ncols))
    )
    labels = np.array(rb.labels, dtype=np.int32)
    return ConstraintSystem(M, np.array(rb.b), layout, labels)


def expected_row_count(sys: LtiSystem, T: int) -> int:
    """Row count of the full (unmasked) constraint system, from the family formulas."""
    n, m, l = sys.nx, sys.nu, sys.ny
    boundary = n * n + n * l + m * n
    recursion = (T - 1) * (n * (n + l) + (n + m) * n)
    terminal = n * n + n * l + m * n + m * l
    return boundary + recursion + terminal


# ---------------------------------------------------------------------------
# LP solving


@dataclass
class LpSolution:
    status: str  # optimal | infeasible | unbounded | error
    x: np.ndarray | None
    objective: float | None
    eq_residual: float
    ineq_violation: float
    message: str = ""


def lp_solve(
    cs: ConstraintSystem | None,
    inequalities: tuple[sp.spmatrix, np.ndarray] | None = None,
    objective: np.ndarray | None = None,
    n_vars: int | None = None,
) -> LpSolution:
    """Minimize objective over {M x = b} from `cs` plus inequality rows G x <= h.

    Variables are free (no sign constraints); epigraph variables for l-inf
    induced norms are expected to be encoded in the inequality rows. The
    backing solver is deterministic for a fixed problem.
    """
    widths = []
    if cs is not None:
        widths.append(cs.ncols)
    if inequalities is not None:
        widths.append(inequalities[0].shape[1])
    if objective is not None:
        widths.append(len(objective))
    if n_vars is None:
        n_vars = max(widths)
    A_eq = b_eq = None
    if cs is not None and cs.nrows:
        A_eq = cs.M
        if cs.ncols < n_vars:
            A_eq = sp.hstack([A_eq, sp.csr_matrix((cs.nrows, n_vars - cs.ncols))], format="csr")
        b_eq = cs.b
    A_ub = b_ub = None
    if inequalities is not None and inequalities[0].shape[0]:
        A_ub, b_ub = inequalities
        if A_ub.shape[1] < n_vars:
            A_ub = sp.hstack([A_ub, sp.csr_matrix((A_ub.shape[0], n_vars - A_ub.shape[1]))])
        A_ub = sp.csc_matrix(A_ub)
    c = np.zeros(n_vars) if objective is None else np.asarray(objective, dtype=float)
    res = linprog(
        c,
        A_ub=A_ub,
        b_ub=b_ub,
        A_eq=sp.csc_matrix(A_eq) if A_eq is not None else None,
        b_eq=b_eq,
        bounds=(None, None),
        method="highs",
        options=dict(_HIGHS_OPTIONS),
    )
    if res.status == 2:
        return LpSolution("infeasible", None, None, np.inf, np.inf, res.message)
    if res.status == 3:
        return LpSolution("unbounded", None, None, np.inf, np.inf, res.message)
    if res.status != 0:
        return LpSolution("error", None, None, np.inf, np.inf, res.message)
    x = res.x
    eq_res = float(np.max(np.abs(A_eq @ x - b_eq))) if A_eq is not None else 0.0
    vio = float(np.max(np.maximum(A_ub @ x - b_ub, 0.0))) if A_ub is not None else 0.0
    return LpSolution("optimal", x, float(c @ x), eq_res, vio, res.message)


# ---------------------------------------------------------------------------
# synthesis programs


@dataclass
class SynthesisSpec:
    """Problem data for one synthesis run.

    Q and R are the diagonal entries of the squared cost weights (Example-style
    1/q_i^2, 1/r_i^2); Q may contain zeros for unweighted states. sel_rows
    restricts the safe-set norms |Phi_xe|, |Phi_xw H| to those state rows
    (the coordinates in which safe-set distances are measured); None keeps all.
    """

    T: int
    Q: np.ndarray
    R: np.ndarray
    mode: str = "nominal_l1"  # nominal_l1 | robust_l1 | robust_h2 | lqg
    eps_w: float = 1.0
    eps_e: float = 1.0
    delta_ref: float = 0.0
    r_ref: float = 0.0
    r: float = 0.0
    S: float = 0.0
    R0: float = 0.0
    alpha: float | None = None
    sel_rows: tuple[int, ...] | None = None
    gamma_rel_width: float = 1e-3
    gamma_hi_factor: float = 1e3
    gamma_expansions: int = 3

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if np.any(self.Q < 0) or np.any(self.R <= 0):
            raise ValueError("Q must be nonnegative and R positive (diagonal entries)")
        for name in ("delta_ref", "r_ref", "r", "S", "R0"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.mode in ("robust_l1",) and not self.r > 0:
            raise ValueError("robust mode requires r > 0")


@dataclass
class SynthesisResult:
    quartet: ResponseQuartet | None
    gamma: float | None
    cost: float | None
    status: str  # optimal | infeasible | tolerance_reached
    margins: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


class _NormEpigraph:
    """Absolute-value split of a set of linear forms plus per-row sum bounds."""

    def __init__(self, prog: "_Program"):
        self.prog = prog
        self.row_absvars: dict[int, list[int]] = {}

    def add_entry(self, row_key: int, terms: list[tuple[int, float]]):
        if not terms:
            return
        a = self.prog.new_var()
        self.prog.add_ineq(terms + [(a, -1.0)], 0.0)
        self.prog.add_ineq([(c, -v) for c, v in terms] + [(a, -1.0)], 0.0)
        self.row_absvars.setdefault(row_key, []).append(a)

    def bound_by(self, bound_var: int):
        for cols in self.row_absvars.values():
            self.prog.add_ineq([(c, 1.0) for c in cols] + [(bound_var, -1.0)], 0.0)


class _Program:
    """Incremental sparse LP pieces on top of the equality system's variables."""

    def __init__(self, base_cols: int):
        self.n = base_cols
        self.rows: list[int] = []
        self.cols: list[int] = []
        self.data: list[float] = []
        self.h: list[float] = []
        self.r = 0

    def new_var(self) -> int:
        self.n += 1
        return self.n - 1

    def add_ineq(self, entries, rhs: float):
        for c, v in entries:
            self.rows.append(self.r)
            self.cols.append(c)
            self.data.append(v)
        self.h.append(rhs)
        self.r += 1

    def matrices(self) -> tuple[sp.spmatrix, np.ndarray]:
        G = sp.coo_matrix((self.data, (self.rows, self.cols)), shape=(self.r, self.n))
        return G, np.array(self.h)


def _weighted_entry_terms(sys, layout, t, i, j, w_out, w_in_w, w_in_e):
    """Terms of Z(t)_{ij} = (W_out [Phi] W_in)(t)_{ij} over the tap variables."""
    n, w = sys.nx, sys.nw
    if i < n:
        blk_w, blk_e, ii = "xw", "xe", i
    else:
        blk_w, blk_e, ii = "uw", "ue", i - n
    terms = []
    if j < w:
        for q in np.nonzero(sys.H[:, j])[0]:
            c = layout.col(blk_w, t, ii, q)
            if c >= 0:
                terms.append((c, w_out * w_in_w * sys.H[q, j]))
    else:
        c = layout.col(blk_e, t, ii, j - w)
        if c >= 0:
            terms.append((c, w_out * w_in_e))
    return terms


def _phixwh_terms(sys, layout, t, i):
    """Per-column terms of row i of (Phi_xw H)(t)."""
    out = []
    for j in range(sys.nw):
        terms = []
        for q in np.nonzero(sys.H[:, j])[0]:
            c = layout.col("xw", t, i, q)
            if c >= 0:
                terms.append((c, sys.H[q, j]))
        out.append(terms)
    return out


def _sel(spec: SynthesisSpec, sys: LtiSystem) -> list[int]:
    return list(range(sys.nx)) if spec.sel_rows is None else list(spec.sel_rows)


def _build_l1_program(sys, spec, cs, gamma=None):
    """LP for one L1 solve; gamma=None means the nominal problem."""
    layout = cs.layout
    robust = gamma is not None
    w_in_w = spec.delta_ref if robust else spec.eps_w
    w_in_e = gamma if robust else spec.eps_e
    wout = np.concatenate([np.sqrt(spec.Q), np.sqrt(spec.R)])
    prog = _Program(layout.ncols)
    cost_var = prog.new_var()

    cost_epi = _NormEpigraph(prog)
    for t in range(1, spec.T + 1):
        for i in range(sys.nx + sys.nu):
            if wout[i] == 0.0:
                continue
            for j in range(sys.nw + sys.ny):
                cost_epi.add_entry(i, _weighted_entry_terms(sys, layout, t, i, j, wout[i], w_in_w, w_in_e))
    cost_epi.bound_by(cost_var)

    norm_e_var = norm_x_var = None
    if robust:
        norm_e_var, norm_x_var = prog.new_var(), prog.new_var()
        sel = _sel(spec, sys)
        epi_e, epi_x = _NormEpigraph(prog), _NormEpigraph(prog)
        for t in range(1, spec.T + 1):
            for i in sel:
                for j in range(sys.ny):
                    c = layout.col("xe", t, i, j)
                    if c >= 0:
                        epi_e.add_entry(i, [(c, 1.0)])
                for terms in _phixwh_terms(sys, layout, t, i):
                    epi_x.add_entry(i, terms)
        epi_e.bound_by(norm_e_var)
        epi_x.bound_by(norm_x_var)
        # (S + R0/r) |Phi_xe| + (delta_ref/r) |Phi_xw H| <= 1 - r_ref/r
        prog.add_ineq(
            [(norm_e_var, spec.S + spec.R0 / spec.r), (norm_x_var, spec.delta_ref / spec.r)],
            1.0 - spec.r_ref / spec.r,
        )
        # delta_ref |Phi_xw H| + gamma S |Phi_xe| <= gamma - r_ref - R0
        prog.add_ineq(
            [(norm_x_var, spec.delta_ref), (norm_e_var, gamma * spec.S)],
            gamma - spec.r_ref - spec.R0,
        )

    if spec.alpha is not None and math.isfinite(spec.alpha):
        cap_var = prog.new_var()
        epi_a = _NormEpigraph(prog)
        for t in range(1, spec.T + 1):
            for i in range(sys.nx):
                for j in range(sys.ny):
                    c = layout.col("xe", t, i, j)
                    if c >= 0:
                        epi_a.add_entry(i, [(c, 1.0)])
        epi_a.bound_by(cap_var)
        prog.add_ineq([(cap_var, 1.0)], spec.alpha)

    G, h = prog.matrices()
    obj = np.zeros(prog.n)
    obj[cost_var] = 1.0
    return G, h, obj, (cost_var, norm_e_var, norm_x_var)


def _masks_for(sys: LtiSystem, structure: str):
    if structure == "dense":
        return None
    return support_masks(sys)


def _result_margins(sys, spec, quartet, cs_full, extra=None):
    sel = _sel(spec, sys)
    sel_xe = FirOperator(quartet.phi_xe.taps[:, sel, :])
    xwh = np.einsum("tij,jk->tik", quartet.phi_xw.taps[:, sel, :], sys.H)
    norm_e = float(np.max(np.sum(np.abs(sel_xe.taps), axis=(0, 2))))
    norm_x = float(np.max(np.sum(np.abs(xwh), axis=(0, 2))))
    margins = {
        "realizability_residual": cs_full.residual(quartet),
        "norm_phi_xe_sel": norm_e,
        "norm_phi_xw_h_sel": norm_x,
        "norm_phi_xe_full": float(np.max(np.sum(np.abs(quartet.phi_xe.taps), axis=(0, 2)))),
        "sel_rows": sel,
    }
    if spec.r > 0:
        margin = (spec.S + spec.R0 / spec.r) * norm_e + (spec.delta_ref / spec.r) * norm_x + spec.r_ref / spec.r
        margins["robustness_margin"] = margin
        margins["robustness_slack"] = 1.0 - margin
    if extra:
        margins.update(extra)
    return margins


def synthesize_l1(sys: LtiSystem, spec: SynthesisSpec, structure: str = "auto") -> SynthesisResult:
    """Nominal or robustness-constrained L1 synthesis over the FIR responses.

    Nominal mode minimizes |diag(Q^1/2, R^1/2) [Phi] diag(eps_w H, eps_e I)|
    in the l-inf induced norm over the realizability constraints. Robust mode
    weights the noise by (delta_ref, gamma), adds the two safe-set inequalities,
    and minimizes over gamma with a golden-section search on log gamma.
    """
    if spec.mode not in ("nominal_l1", "robust_l1"):
        raise ValueError(f"synthesize_l1 expects an l1 mode, got {spec.mode!r}")
    masks = _masks_for(sys, structure)
    cs = assemble_constraints(sys, spec.T, masks)
    cs_full = assemble_constraints(sys, spec.T) if masks is not None else cs

    if spec.mode == "nominal_l1":
        G, h, obj, _ = _build_l1_program(sys, spec, cs)
        sol = lp_solve(cs, (G, h), obj)
        if sol.status != "optimal":
            return SynthesisResult(None, None, None, "infeasible" if sol.status == "infeasible" else sol.status,
                                   {"lp_message": sol.message})
        quartet = cs.layout.scatter(sol.x[: cs.ncols])
        margins = _result_margins(sys, spec, quartet, cs_full, {"lp_eq_residual": sol.eq_residual})
        status = "optimal" if margins["realizability_residual"] <= 1e-8 else "tolerance_reached"
        return SynthesisResult(quartet, None, sol.objective, status, margins)

    # robust mode
    if spec.r_ref > spec.r:
        return SynthesisResult(
            None, None, None, "infeasible",
            {"violated": "r_ref/r", "detail": f"r_ref/r = {spec.r_ref / spec.r:.6g} > 1 makes "
             f"(S + R0/r)|Phi_xe| + (delta_ref/r)|Phi_xw H| + r_ref/r <= 1 unsatisfiable"},
        )

    def probe(gamma: float):
        G, h, obj, _ = _build_l1_program(sys, spec, cs, gamma=gamma)
        return lp_solve(cs, (G, h), obj)

    glo = max(spec.R0, 1e-8)
    ghi = glo * spec.gamma_hi_factor
    trace: list[tuple[float, float | None]] = []

    def cost_at(gamma: float) -> float:
        sol = probe(gamma)
        trace.append((gamma, sol.objective))
        cost_at.cache[gamma] = sol
        return sol.objective if sol.status == "optimal" else math.inf

    cost_at.cache = {}

    expansions = 0
    f_hi = cost_at(ghi)
    while not math.isfinite(f_hi) and expansions < spec.gamma_expansions:
        ghi *= 10.0
        expansions += 1
        f_hi = cost_at(ghi)
    if not math.isfinite(f_hi):
        return SynthesisResult(None, None, None, "infeasible",
                               {"violated": "robustness inequalities",
                                "detail": "inner LP infeasible for every gamma in the expanded bracket",
                                "gamma_trace": trace})

    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = math.log(glo), math.log(ghi)
    fa = cost_at(glo)
    x1 = b - invphi * (b - a)
    x2 = a + invphi * (b - a)
    f1, f2 = cost_at(math.exp(x1)), cost_at(math.exp(x2))
    while (b - a) > math.log1p(spec.gamma_rel_width):
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - invphi * (b - a)
            f1 = cost_at(math.exp(x1))
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + invphi * (b - a)
            f2 = cost_at(math.exp(x2))
    candidates = [(f, g) for g, f in ((math.exp(x1), f1), (math.exp(x2), f2), (ghi, f_hi), (glo, fa)) if f is not None and math.isfinite(f)]
    best_cost, best_gamma = min(candidates)
    status = "optimal"
    if best_gamma == ghi and expansions >= spec.gamma_expansions:
        status = "tolerance_reached"
    sol = cost_at.cache.get(best_gamma) or probe(best_gamma)
    quartet = cs.layout.scatter(sol.x[: cs.ncols])
    margins = _result_margins(sys, spec, quartet, cs_full, {
        "lp_eq_residual": sol.eq_residual,
        "gamma_search": best_gamma,
        "gamma_bracket": (glo, ghi),
        "gamma_trace": trace,
    })
    gb = gamma_bound_from_margins(spec, margins)
    margins["gamma_ineq_slack"] = best_gamma * (1.0 - spec.S * margins["norm_phi_xe_sel"]) - (
        spec.delta_ref * margins["norm_phi_xw_h_sel"] + spec.r_ref + spec.R0
    )
    if status == "optimal" and (margins["realizability_residual"] > 1e-8
                                or margins["robustness_slack"] < -1e-8
                                or margins["gamma_ineq_slack"] < -1e-8):
        status = "tolerance_reached"
    return SynthesisResult(quartet, gb, best_cost, status, margins)


def gamma_bound_from_margins(spec: SynthesisSpec, margins: dict) -> float:
    nc = spec.delta_ref * margins["norm_phi_xw_h_sel"] + spec.r_ref
    return (nc + spec.R0) / (1.0 - spec.S * margins["norm_phi_xe_sel"])


def synthesize_h2_robust(sys: LtiSystem, spec: SynthesisSpec, structure: str = "auto",
                         qp_kwargs: dict | None = None) -> SynthesisResult:
    """Minimize the squared Frobenius (H2) cost subject to realizability and the
    l1-norm cap |Phi_xe| <= alpha (plus the safe-set margin inequality when r > 0).

    Solved by an operator-splitting QP with an active-set polish; feasibility is
    pre-checked with an LP so infeasible caps are reported exactly.
    """
    if spec.mode != "robust_h2":
        raise ValueError(f"synthesize_h2_robust expects mode robust_h2, got {spec.mode!r}")
    masks = _masks_for(sys, structure)
    cs = assemble_constraints(sys, spec.T, masks)
    cs_full = assemble_constraints(sys, spec.T) if masks is not None else cs
    layout = cs.layout
    n, m, l, w = sys.nx, sys.nu, sys.ny, sys.nw
    wout = np.concatenate([np.sqrt(spec.Q), np.sqrt(spec.R)])

    prog = _Program(layout.ncols)
    cap_var = None
    with_cap = spec.alpha is not None and math.isfinite(spec.alpha)
    if with_cap:
        cap = _NormEpigraph(prog)
        for t in range(1, spec.T + 1):
            for i in range(n):
                for j in range(l):
                    c = layout.col("xe", t, i, j)
                    if c >= 0:
                        cap.add_entry(i, [(c, 1.0)])
        cap_var = prog.new_var()
        cap.bound_by(cap_var)
        prog.add_ineq([(cap_var, 1.0)], spec.alpha)
    if spec.r > 0:
        sel = _sel(spec, sys)
        ne, nx_ = prog.new_var(), prog.new_var()
        epi_e, epi_x = _NormEpigraph(prog), _NormEpigraph(prog)
        for t in range(1, spec.T + 1):
            for i in sel:
                for j in range(l):
                    c = layout.col("xe", t, i, j)
                    if c >= 0:
                        epi_e.add_entry(i, [(c, 1.0)])
                for terms in _phixwh_terms(sys, layout, t, i):
                    epi_x.add_entry(i, terms)
        epi_e.bound_by(ne)
        epi_x.bound_by(nx_)
        prog.add_ineq([(ne, spec.S + spec.R0 / spec.r), (nx_, spec.delta_ref / spec.r)],
                      1.0 - spec.r_ref / spec.r)
    G, h = prog.matrices()

    if prog.r:
        feas = lp_solve(cs, (G, h), np.zeros(prog.n))
        if feas.status == "infeasible":
            return SynthesisResult(None, None, None, "infeasible",
                                   {"violated": "alpha cap" if with_cap else "robustness margin",
                                    "detail": feas.message})

    # quadratic cost sum_t |W_out Phi(t) W_in|_F^2, W_in = diag(eps_w H, eps_e I)
    Gw = spec.eps_w**2 * (sys.H @ sys.H.T)
    prows, pcols, pvals = [], [], []
    for t in range(1, spec.T + 1):
        for i in range(n + m):
            d2 = wout[i] ** 2
            if d2 == 0.0:
                continue
            blk_w, blk_e, ii = ("xw", "xe", i) if i < n else ("uw", "ue", i - n)
            for a, bcol in zip(*np.nonzero(Gw)):
                ca, cb = layout.col(blk_w, t, ii, a), layout.col(blk_w, t, ii, bcol)
                if ca >= 0 and cb >= 0:
                    prows.append(ca)
                    pcols.append(cb)
                    pvals.append(2.0 * d2 * Gw[a, bcol])
            for j in range(l):
                c = layout.col(blk_e, t, ii, j)
                if c >= 0:
                    prows.append(c)
                    pcols.append(c)
                    pvals.append(2.0 * d2 * spec.eps_e**2)
    P = sp.coo_matrix((pvals, (prows, pcols)), shape=(prog.n, prog.n)).tocsc()

    A_rows = [sp.hstack([cs.M, sp.csr_matrix((cs.nrows, prog.n - cs.ncols))])]
    lb = [cs.b]
    ub = [cs.b]
    if prog.r:
        A_rows.append(sp.csr_matrix(sp.coo_matrix((prog.data, (prog.rows, prog.cols)), shape=(prog.r, prog.n))))
        lb.append(np.full(prog.r, -np.inf))
        ub.append(np.array(prog.h))
    A = sp.vstack(A_rows, format="csc")
    lo = np.concatenate(lb)
    hi = np.concatenate(ub)
    kw = dict(eps_abs=1e-8, eps_rel=1e-8)
    if qp_kwargs:
        kw.update(qp_kwargs)
    qres = solve_qp(P, np.zeros(prog.n), A, lo, hi, **kw)
    quartet = layout.scatter(qres.x[: layout.ncols])
    cost = _h2_cost(sys, spec, quartet)
    extra = {
        "qp_status": qres.status,
        "qp_iterations": qres.iterations,
        "qp_primal_residual": qres.primal_residual,
        "qp_dual_residual": qres.dual_residual,
        "qp_polished": qres.polished,
    }
    if with_cap:
        norm_full = float(np.max(np.sum(np.abs(quartet.phi_xe.taps), axis=(0, 2))))
        extra["alpha"] = spec.alpha
        extra["alpha_slack"] = spec.alpha - norm_full
    margins = _result_margins(sys, spec, quartet, cs_full, extra)
    status = "optimal"
    if qres.status != "solved" or margins["realizability_residual"] > 1e-8:
        status = "tolerance_reached"
    if with_cap and extra["alpha_slack"] < -1e-8:
        status = "tolerance_reached"
    if spec.r > 0 and margins.get("robustness_slack", 0.0) < -1e-8:
        status = "tolerance_reached"
    return SynthesisResult(quartet, None, cost, status, margins)


def _h2_cost(sys: LtiSystem, spec: SynthesisSpec, quartet: ResponseQuartet) -> float:
    wout = np.concatenate([np.sqrt(spec.Q), np.sqrt(spec.R)])
    total = 0.0
    for t in range(1, spec.T + 1):
        blk = quartet.blocks(t)
        win = np.block([
            [spec.eps_w * sys.H, np.zeros((sys.nx, sys.ny))],
            [np.zeros((sys.ny, sys.nw)), spec.eps_e * np.eye(sys.ny)],
        ])
        Z = (wout[:, None] * blk) @ win
        total += float(np.sum(Z * Z))
    return total


# ---------------------------------------------------------------------------
# safe-set bounds on quartets


def _sel_norms(q: ResponseQuartet, H, sel_rows=None) -> tuple[float, float]:
    sel = list(range(q.phi_xe.shape[0])) if sel_rows is None else list(sel_rows)
    xe = q.phi_xe.taps[:, sel, :]
    xwh = np.einsum("tij,jk->tik", q.phi_xw.taps[:, sel, :], np.asarray(H, dtype=float))
    return (
        float(np.max(np.sum(np.abs(xe), axis=(0, 2)))),
        float(np.max(np.sum(np.abs(xwh), axis=(0, 2)))),
    )


def robustness_margin(q: ResponseQuartet, S, R0, r, delta_ref, r_ref, H, sel_rows=None) -> float:
    """(S + R0/r) |Phi_xe| + (delta_ref/r) |Phi_xw H| + r_ref/r; values <= 1 certify
    that the closed loop stays within the safe radius."""
    if not r > 0:
        raise ValueError("r must be positive")
    ne, nx = _sel_norms(q, H, sel_rows)
    return (S + R0 / r) * ne + (delta_ref / r) * nx + r_ref / r


def nominal_closeness_bound(q: ResponseQuartet, delta_ref, r_ref, H, sel_rows=None) -> float:
    """delta_ref |Phi_xw H| + r_ref: worst-case nominal deviation from training data."""
    _, nx = _sel_norms(q, H, sel_rows)
    return delta_ref * nx + r_ref


def gamma_bound(q: ResponseQuartet, S, R0, nominal_closeness, sel_rows=None) -> float:
    """(nominal_closeness + R0) / (1 - S |Phi_xe|): certified perception-error bound."""
    sel = list(range(q.phi_xe.shape[0])) if sel_rows is None else list(sel_rows)
    ne = float(np.max(np.sum(np.abs(q.phi_xe.taps[:, sel, :]), axis=(0, 2))))
    if S * ne > 1.0 - 1e-9:
        raise ValueError("contraction condition violated: S * |Phi_xe| >= 1")
    return (nominal_closeness + R0) / (1.0 - S * ne)


# ---------------------------------------------------------------------------
# tracking reformulations


def augment_for_tracking(sys: LtiSystem) -> LtiSystem:
    """Waypoint-tracking state extension [xi - r; r] with disturbance w_k = r_{k+1} - r_k.

    Exact bookkeeping for waypoint sequences satisfying A r = r (position
    setpoints with zero velocity targets on integrator chains): the error block
    receives -w and the reference block integrates +w.
    """
    n, m = sys.nx, sys.nu
    Abar = np.block([[sys.A, np.zeros((n, n))], [np.zeros((n, n)), np.eye(n)]])
    Bbar = np.vstack([sys.B, np.zeros((n, m))])
    Cbar = np.hstack([sys.C, np.zeros((sys.ny, n))])
    Hbar = np.vstack([-np.eye(n), np.eye(n)])
    return LtiSystem(Abar, Bbar, Cbar, Hbar, dt=sys.dt)


def tracking_error_system(sys: LtiSystem, step_channels: np.ndarray | None = None) -> LtiSystem:
    """Tracking in error coordinates: e_{k+1} = A e_k + B u_k - E w_k, y = C e + noise.

    Equivalent to the [xi - r; r] extension for every synthesized quantity, but
    finitely realizable (the reference integrator block of the extension is
    uncontrollable and admits no FIR closure). E defaults to C^T: waypoint
    steps enter through the measured coordinates.
    """
    E = sys.C.T.copy() if step_channels is None else np.asarray(step_channels, dtype=float)
    return LtiSystem(sys.A, sys.B, sys.C, -E, dt=sys.dt)


# ---------------------------------------------------------------------------
# controller realization


def _long_division(q: ResponseQuartet, length: int) -> np.ndarray:
    """Taps G(1..length) of G = Phi_xw^{-1} Phi_xe: G(k) solves
    Phi_xe(k) = sum_{j=1}^{min(k,T)} Phi_xw(j) G(k-j+1) using Phi_xw(1) = I."""
    T = q.T
    n, l = q.phi_xe.shape
    xw, xe = q.phi_xw.taps, q.phi_xe.taps
    Gs = np.zeros((length, n, l))  # Gs[i] = G(i+1); G(1) = Phi_xe(1) = 0
    for k in range(2, length + 1):
        acc = xe[k - 1].copy() if k <= T else np.zeros((n, l))
        jmax = min(k, T)
        if jmax >= 2:
            idx = [k - j for j in range(2, jmax + 1)]  # storage slots of G(k-j+1)
            acc -= np.einsum("jab,jbc->ac", xw[1:jmax], Gs[idx])
        Gs[k - 1] = acc
    return Gs


def realize_controller(q: ResponseQuartet, T_K: int) -> FirController:
    """Realize u = (Phi_ue - Phi_uw Phi_xw^{-1} Phi_xe) y as an FIR law with T_K taps.

    G = Phi_xw^{-1} Phi_xe is computed by tap-recursive long division using
    Phi_xw(1) = I; the controller taps are exact for any simulation horizon
    <= T_K, and the max-entry magnitude of the first truncated tap K(T_K + 1)
    is reported as ``truncation_diagnostic``.
    """
    T = q.T
    if T_K < T:
        raise ValueError("T_K must be at least the quartet horizon")
    m = q.phi_uw.shape[0]
    l = q.phi_xe.shape[1]
    uw, ue = q.phi_uw.taps, q.phi_ue.taps
    Gs = _long_division(q, T_K + 1)  # need G up to T_K + 1 for the diagnostic
    K = np.zeros((T_K + 1, m, l))
    for k in range(1, T_K + 2):
        acc = ue[k - 1].copy() if k <= T else np.zeros((m, l))
        jmax = min(k, T)
        idx = [k - j for j in range(1, jmax + 1)]  # storage slots of G(k-j+1)
        acc -= np.einsum("jab,jbc->ac", uw[:jmax], Gs[idx])
        K[k - 1] = acc
    return FirController(taps=K[:T_K], truncation_diagnostic=float(np.max(np.abs(K[T_K]))))


def division_residual(q: ResponseQuartet, Gs: np.ndarray) -> float:
    """Max error of the long-division identity over the first T taps (test hook)."""
    T = q.T
    xw, xe = q.phi_xw.taps, q.phi_xe.taps
    worst = 0.0
    for k in range(1, T + 1):
        jmax = min(k, T)
        idx = [k - j for j in range(1, jmax + 1)]
        recon = np.einsum("jab,jbc->ac", xw[:jmax], Gs[idx])
        worst = max(worst, float(np.max(np.abs(recon - xe[k - 1]))))
    return worst
