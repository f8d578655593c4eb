"""Reactive-dispatch problem assembly and conic solution.

Decision variable: per PV inverter and hour, the signed fraction
``alpha_q`` of reactive headroom to deploy.  Squared-voltage limits are
imposed on affine rows in the uncertainty vector

    xi = [p_L | q_L | p_g | Q_cap]

(load multipliers, available PV active power, reactive headroom), one
upper and one lower row per monitored bus/phase.  Three hardening modes
share the row structure:

``deterministic``
    rows hold at the mean uncertainty vector only.
``robust``
    rows hold for every xi in an elementwise box around the mean.
``drcc``
    rows hold for every distribution sharing the given first two moments
    except an epsilon mass: a second-order-cone constraint with radius
    ``sqrt((1 - eps) / eps)``.

Each hour decouples, so the horizon solves as independent small conic
programs.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np

from .feeder import build_incidence, build_sensitivities
from .loads import pv_reactive_capability, zip_offset, zip_slope

P_LOAD, Q_LOAD, P_PV, QCAP_PV = "p_L", "q_L", "p_g", "Q_cap"

DEFAULT_V_MIN = 0.95 ** 2
DEFAULT_V_MAX = 1.05 ** 2

_MODE_ALIASES = {
    "det": "deterministic", "deterministic": "deterministic",
    "ro": "robust", "robust": "robust",
    "drcc": "drcc",
}


class ParameterError(ValueError):
    """Invalid dispatch parameter (mode, risk level, bounds, ...)."""


class ModelValidityError(RuntimeError):
    """Affine voltage model is not trustworthy on the requested uncertainty set."""


class MomentCoverageError(ValueError):
    """Moment set does not cover every uncertainty entry for the horizon."""


def soc_radius(epsilon):
    """Cone radius ``sqrt((1 - eps)/eps)`` hardening a mean-plus-deviation row
    against all distributions with matching first two moments."""
    if not 0.0 < epsilon < 1.0:
        raise ParameterError(f"risk level must lie strictly in (0, 1), got {epsilon}")
    return float(np.sqrt((1.0 - epsilon) / epsilon))


# ---------------------------------------------------------------------------
# Uncertainty vector layout


@dataclass
class UncertaintyVectorLayout:
    """Fixed ordering of the stacked uncertainty vector.

    Blocks: active load multipliers, reactive load multipliers (one entry
    per non-root bus/phase, in sensitivity-row order), then PV available
    active power and reactive headroom (one entry per inverter phase).
    """

    load_entries: tuple  # (bus_id, phase), sensitivity-row order
    pv_entries: tuple    # (bus_id, phase)
    pv_positions: np.ndarray = field(init=False)  # pv entry -> load-entry row

    def __post_init__(self):
        idx = {lab: i for i, lab in enumerate(self.load_entries)}
        self.pv_positions = np.array([idx[e] for e in self.pv_entries], dtype=int)

    @property
    def n_load(self):
        return len(self.load_entries)

    @property
    def n_pv(self):
        return len(self.pv_entries)

    @property
    def n_xi(self):
        return 2 * self.n_load + 2 * self.n_pv

    @property
    def sl_pl(self):
        return slice(0, self.n_load)

    @property
    def sl_ql(self):
        return slice(self.n_load, 2 * self.n_load)

    @property
    def sl_pg(self):
        return slice(2 * self.n_load, 2 * self.n_load + self.n_pv)

    @property
    def sl_qcap(self):
        return slice(2 * self.n_load + self.n_pv, self.n_xi)

    def entries(self):
        out = [(P_LOAD, b, p) for b, p in self.load_entries]
        out += [(Q_LOAD, b, p) for b, p in self.load_entries]
        out += [(P_PV, b, p) for b, p in self.pv_entries]
        out += [(QCAP_PV, b, p) for b, p in self.pv_entries]
        return tuple(out)

    def expand_pv(self, vec):
        """Scatter a PV-indexed vector into load-entry (bus/phase) space."""
        out = np.zeros(self.n_load)
        out[self.pv_positions] = vec
        return out


def build_layout(feeder, incidence=None):
    if incidence is None:
        incidence = build_incidence(feeder)
    return UncertaintyVectorLayout(tuple(incidence.col_labels), tuple(feeder.pv_entries()))


# ---------------------------------------------------------------------------
# Affine voltage model with voltage-dependent loads


@dataclass
class AffineVoltageModel:
    """Squared voltages as an affine map of the uncertainty vector.

    Voltage-dependent loads couple v to itself; collecting the linear
    terms gives ``M(xi) v = rhs(xi, alpha)`` with

        M(xi)  = I + R diag(p_L * slope_p) + X diag(q_L * slope_q)
        rhs    = v_tilde + R (p_g - p_L * offset_p) + X (alpha * Q_cap - q_L * offset_q)

    where slope/offset are the linearized ZIP coefficients per bus/phase.
    Wherever ``M`` is row-diagonally dominant the map is well defined and
    the implied chance rows below are exact restatements of the voltage
    limits at the mean model.
    """

    sens: object
    layout: UncertaintyVectorLayout
    slope_p: np.ndarray
    offset_p: np.ndarray
    slope_q: np.ndarray
    offset_q: np.ndarray
    pv_caps: np.ndarray

    def m_matrix(self, p_l, q_l):
        r, x = self.sens.r_sens, self.sens.x_sens
        n = self.layout.n_load
        return (np.eye(n)
                + r * (p_l * self.slope_p)[None, :]
                + x * (q_l * self.slope_q)[None, :])

    def _rhs(self, p_l, q_l, p_g, q_g):
        r, x = self.sens.r_sens, self.sens.x_sens
        lay = self.layout
        return (self.sens.v_tilde
                + r @ (lay.expand_pv(p_g) - p_l * self.offset_p)
                + x @ (lay.expand_pv(q_g) - q_l * self.offset_q))

    def split(self, xi):
        lay = self.layout
        return xi[lay.sl_pl], xi[lay.sl_ql], xi[lay.sl_pg], xi[lay.sl_qcap]

    def voltages(self, xi, alpha):
        """Solve the self-consistent linearized power flow at uncertainty
        realization ``xi`` and dispatch ``alpha``."""
        p_l, q_l, p_g, qcap = self.split(np.asarray(xi, dtype=float))
        alpha = np.zeros(self.layout.n_pv) if alpha is None else np.asarray(alpha, dtype=float)
        m = self.m_matrix(p_l, q_l)
        try:
            return np.linalg.solve(m, self._rhs(p_l, q_l, p_g, alpha * qcap))
        except np.linalg.LinAlgError as exc:
            raise ModelValidityError("voltage model matrix is singular") from exc

    def mean_response(self, mu):
        """Mean-model pair ``(v_base, v_alpha)``: squared voltages at the
        mean uncertainty are ``v_base + v_alpha @ alpha``."""
        p_l, q_l, p_g, qcap = self.split(np.asarray(mu, dtype=float))
        m = self.m_matrix(p_l, q_l)
        lay = self.layout
        rhs0 = self._rhs(p_l, q_l, p_g, np.zeros(lay.n_pv))
        cols = self.sens.x_sens[:, lay.pv_positions] * qcap[None, :]
        try:
            v_base = np.linalg.solve(m, rhs0)
            v_alpha = np.linalg.solve(m, cols) if lay.n_pv else np.zeros((lay.n_load, 0))
        except np.linalg.LinAlgError as exc:
            raise ModelValidityError("voltage model matrix is singular at the mean") from exc
        return v_base, v_alpha


def assemble_voltage_affine(feeder, sens, layout):
    slope_p = np.array([zip_slope(feeder.bus(b).zip_coeffs.kp) for b, _ in layout.load_entries])
    offset_p = np.array([zip_offset(feeder.bus(b).zip_coeffs.kp) for b, _ in layout.load_entries])
    slope_q = np.array([zip_slope(feeder.bus(b).zip_coeffs.kq) for b, _ in layout.load_entries])
    offset_q = np.array([zip_offset(feeder.bus(b).zip_coeffs.kq) for b, _ in layout.load_entries])
    pv_caps = np.array([feeder.bus(b).pv.s_cap for b, _ in layout.pv_entries])
    return AffineVoltageModel(sens, layout, slope_p, offset_p, slope_q, offset_q, pv_caps)


# ---------------------------------------------------------------------------
# Denominator positivity on a box


@dataclass
class UncertaintyBox:
    """Elementwise bounds on the load-multiplier blocks of xi."""

    p_lo: np.ndarray
    p_hi: np.ndarray
    q_lo: np.ndarray
    q_hi: np.ndarray


@dataclass
class PositivityReport:
    ok: bool
    margins: np.ndarray
    worst_margin: float
    worst_label: tuple

    def __str__(self):
        state = "holds" if self.ok else "FAILS"
        return (f"diagonal dominance of the voltage model {state}: worst margin "
                f"{self.worst_margin:.3e} at bus {self.worst_label[0]} phase {self.worst_label[1]}")


def _interval_product(coeff, lo, hi):
    """Elementwise interval [min, max] of coeff * t for t in [lo, hi]."""
    a, b = coeff * lo, coeff * hi
    return np.minimum(a, b), np.maximum(a, b)


def check_denominator_positivity(model, box):
    """Verify the voltage-model matrix stays row-diagonally dominant for
    every load multiplier in ``box`` (hence invertible with positive
    diagonal).  Exact on the box: diagonal minima and off-diagonal maxima
    are taken over box corners independently, which is conservative."""
    r, x = model.sens.r_sens, model.sens.x_sens
    n = model.layout.n_load
    cp_lo, cp_hi = _interval_product(model.slope_p, box.p_lo, box.p_hi)
    cq_lo, cq_hi = _interval_product(model.slope_q, box.q_lo, box.q_hi)

    corners = []
    for cpv in (cp_lo, cp_hi):
        for cqv in (cq_lo, cq_hi):
            corners.append(r * cpv[None, :] + x * cqv[None, :])
    stack = np.stack(corners)
    diag_terms = stack[:, np.arange(n), np.arange(n)]
    diag_min = 1.0 + diag_terms.min(axis=0)
    off_max = np.abs(stack).max(axis=0)
    off_max[np.arange(n), np.arange(n)] = 0.0
    margins = diag_min - off_max.sum(axis=1)
    worst = int(np.argmin(margins))
    return PositivityReport(bool(np.all(margins > 0.0)), margins,
                            float(margins[worst]), model.layout.load_entries[worst])


# ---------------------------------------------------------------------------
# Chance rows


@dataclass
class ChanceRow:
    """Single affine voltage-limit row ``a(alpha) @ xi + b <= 0``."""

    side: str
    bus: str
    phase: str
    a_const: np.ndarray
    alpha_coef: np.ndarray
    b: float
    layout: UncertaintyVectorLayout

    def a(self, alpha):
        out = self.a_const.copy()
        out[self.layout.sl_qcap] = self.alpha_coef * alpha
        return out


@dataclass
class ChanceRowSet:
    """All rows of one side, in matrix form.

    ``a_const`` holds the decision-free coefficient blocks (its reactive
    headroom block is zero); each row's headroom coefficients are
    ``alpha_coef * alpha`` elementwise.
    """

    side: str
    a_const: np.ndarray    # (n_rows, n_xi)
    alpha_coef: np.ndarray  # (n_rows, n_pv)
    b: np.ndarray
    labels: tuple
    layout: UncertaintyVectorLayout

    @property
    def n_rows(self):
        return len(self.b)

    def a_matrix(self, alpha):
        out = self.a_const.copy()
        out[:, self.layout.sl_qcap] = self.alpha_coef * np.asarray(alpha, dtype=float)[None, :]
        return out

    def rows(self):
        return [ChanceRow(self.side, b_, p_, self.a_const[i], self.alpha_coef[i],
                          float(self.b[i]), self.layout)
                for i, (b_, p_) in enumerate(self.labels)]


def _monitor_mask(layout, monitored):
    if monitored is None:
        return np.ones(layout.n_load, dtype=bool)
    wanted = set()
    for item in monitored:
        if isinstance(item, str):
            wanted.update(lab for lab in layout.load_entries if lab[0] == item)
        else:
            wanted.add(tuple(item))
    mask = np.array([lab in wanted for lab in layout.load_entries])
    if not mask.any():
        raise ParameterError("monitored subset matches no bus/phase")
    return mask


def assemble_chance_rows(model, v_min, v_max, positivity, monitored=None):
    """Build upper/lower voltage-limit rows, affine in xi and in alpha.

    Substituting the bound profile into the self-consistent voltage
    equation turns ``v <= v_max`` into rows whose load coefficients carry
    the voltage-dependence evaluated at the bound:
    ``d_pmax = slope_p * v_max + offset_p`` (and likewise for q and for
    the lower bound).  Requires a passing positivity report so the
    substitution direction is valid.
    """
    if positivity is None or not positivity.ok:
        raise ModelValidityError(
            "refusing row assembly without diagonal dominance: "
            + ("no positivity report" if positivity is None else str(positivity)))

    lay = model.layout
    r, x = model.sens.r_sens, model.sens.x_sens
    n = lay.n_load
    v_min = np.broadcast_to(np.asarray(v_min, dtype=float), (n,))
    v_max = np.broadcast_to(np.asarray(v_max, dtype=float), (n,))
    if np.any(v_min >= v_max):
        raise ParameterError("voltage limits must satisfy v_min < v_max elementwise")
    mask = _monitor_mask(lay, monitored)
    labels = tuple(lab for lab, m in zip(lay.load_entries, mask) if m)

    d_pmax = model.slope_p * v_max + model.offset_p
    d_qmax = model.slope_q * v_max + model.offset_q
    d_pmin = model.slope_p * v_min + model.offset_p
    d_qmin = model.slope_q * v_min + model.offset_q

    r_pv = r[:, lay.pv_positions] if lay.n_pv else np.zeros((n, 0))
    x_pv = x[:, lay.pv_positions] if lay.n_pv else np.zeros((n, 0))

    def rowset(side, dp, dq, sign, bound):
        a = np.zeros((n, lay.n_xi))
        a[:, lay.sl_pl] = sign * (-r) * dp[None, :]
        a[:, lay.sl_ql] = sign * (-x) * dq[None, :]
        a[:, lay.sl_pg] = sign * r_pv
        coef = sign * x_pv
        b = sign * (model.sens.v_tilde - bound)
        return ChanceRowSet(side, a[mask], coef[mask], b[mask], labels, lay)

    upper = rowset("upper", d_pmax, d_qmax, +1.0, v_max)
    lower = rowset("lower", d_pmin, d_qmin, -1.0, v_min)
    return upper, lower


# ---------------------------------------------------------------------------
# Problem assembly over a horizon


def _psd_sqrt(cov):
    """Symmetric PSD square root; tiny negative eigenvalues are clipped."""
    cov = np.asarray(cov, dtype=float)
    offdiag = cov - np.diag(np.diag(cov))
    if not offdiag.any():
        return np.diag(np.sqrt(np.maximum(np.diag(cov), 0.0)))
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    w = np.maximum(w, 0.0)
    return (v * np.sqrt(w)[None, :]) @ v.T


@dataclass
class ProblemBlock:
    """Everything needed to solve one hour."""

    hour: int
    mu: np.ndarray
    cov_sqrt: np.ndarray
    upper: ChanceRowSet
    lower: ChanceRowSet
    v_base: np.ndarray
    v_alpha: np.ndarray
    obj_const: float
    obj_alpha: np.ndarray
    robust_half: np.ndarray | None = None

    @property
    def zero_cov(self):
        return not self.cov_sqrt.any()


@dataclass
class DispatchProblem:
    mode: str
    epsilon: float | None
    hours: tuple
    layout: UncertaintyVectorLayout
    pv_caps: np.ndarray
    base_power_kva: float
    v_min: np.ndarray
    v_max: np.ndarray
    blocks: list

    @property
    def radius(self):
        return soc_radius(self.epsilon) if self.mode == "drcc" else None

    @property
    def pv_labels(self):
        return self.layout.pv_entries


def normalize_mode(mode):
    try:
        return _MODE_ALIASES[mode]
    except KeyError:
        raise ParameterError(
            f"unknown mode '{mode}' (choose det, ro or drcc)") from None


def build_problem(feeder, moments, mode, horizon=None, epsilon=None,
                  v_min=DEFAULT_V_MIN, v_max=DEFAULT_V_MAX, monitored=None,
                  robust_half_width=0.10, robust_sigmas=None,
                  positivity_sigmas=4.0, hours=None):
    """Assemble per-hour voltage-limited dispatch blocks for one mode.

    ``moments`` must expose ``slice_hour(hour, entries) -> (mu, cov)``
    covering every uncertainty entry at every requested hour.  The robust
    box half-width defaults to 0.10 of the mean per entry; pass
    ``robust_sigmas`` to use a multiple of the per-entry standard
    deviation instead.
    """
    mode = normalize_mode(mode)
    if mode == "drcc":
        if epsilon is None:
            raise ParameterError("drcc mode requires a risk level epsilon")
        soc_radius(epsilon)  # validates range
    if robust_half_width < 0.0:
        raise ParameterError("robust half-width must be nonnegative")

    if hours is None:
        if horizon is None:
            raise ParameterError("pass either a horizon length or explicit hours")
        hours = tuple(range(int(horizon)))
    else:
        hours = tuple(int(h) for h in hours)
        if horizon is not None and len(hours) != int(horizon):
            raise ParameterError("horizon length disagrees with explicit hours")

    incidence = build_incidence(feeder)
    sens = build_sensitivities(feeder, incidence)
    layout = build_layout(feeder, incidence)
    model = assemble_voltage_affine(feeder, sens, layout)
    entries = layout.entries()
    n = layout.n_load

    v_min_vec = np.broadcast_to(np.asarray(v_min, dtype=float), (n,)).copy()
    v_max_vec = np.broadcast_to(np.asarray(v_max, dtype=float), (n,)).copy()

    blocks = []
    for h in hours:
        mu, cov = moments.slice_hour(h, entries)
        sigma = np.sqrt(np.maximum(np.diag(cov), 0.0))
        k = positivity_sigmas
        box = UncertaintyBox(
            p_lo=np.clip(mu[layout.sl_pl] - k * sigma[layout.sl_pl], 0.0, 1.0),
            p_hi=np.clip(mu[layout.sl_pl] + k * sigma[layout.sl_pl], 0.0, 1.0),
            q_lo=np.clip(mu[layout.sl_ql] - k * sigma[layout.sl_ql], 0.0, 1.0),
            q_hi=np.clip(mu[layout.sl_ql] + k * sigma[layout.sl_ql], 0.0, 1.0),
        )
        positivity = check_denominator_positivity(model, box)
        if not positivity.ok:
            raise ModelValidityError(f"hour {h}: {positivity}")

        upper, lower = assemble_chance_rows(model, v_min_vec, v_max_vec,
                                            positivity, monitored)
        v_base, v_alpha = model.mean_response(mu)
        mu_pl = mu[layout.sl_pl]
        grad = mu_pl * model.slope_p
        obj_const = float(grad @ v_base + (mu_pl * model.offset_p).sum()
                          - mu[layout.sl_pg].sum())
        obj_alpha = v_alpha.T @ grad

        robust_half = None
        if mode == "robust":
            if robust_sigmas is not None:
                robust_half = float(robust_sigmas) * sigma
            else:
                robust_half = robust_half_width * np.abs(mu)

        blocks.append(ProblemBlock(h, mu, _psd_sqrt(cov), upper, lower,
                                   v_base, v_alpha, obj_const, obj_alpha,
                                   robust_half))

    return DispatchProblem(mode, epsilon, hours, layout, model.pv_caps,
                           feeder.base_power_kva, v_min_vec, v_max_vec, blocks)


# ---------------------------------------------------------------------------
# Solving


@dataclass
class SolverConfig:
    solver: str = "CLARABEL"
    tolerance: float = 1e-8
    max_iter: int = 200
    verbose: bool = False

    def options(self):
        if self.solver.upper() == "CLARABEL":
            return {"tol_gap_abs": self.tolerance, "tol_gap_rel": self.tolerance,
                    "tol_feas": self.tolerance, "max_iter": self.max_iter,
                    "verbose": self.verbose}
        return {"verbose": self.verbose}


@dataclass
class HourResult:
    hour: int
    status: str
    alpha: np.ndarray
    objective_pu: float
    min_margin: float
    hint: str | None = None


@dataclass
class DispatchSolution:
    mode: str
    epsilon: float | None
    hours: tuple
    pv_labels: tuple
    alpha: np.ndarray  # (n_hours, n_pv)
    objective_kwh: float | None
    status: str
    hour_results: list
    solve_ms: float

    @property
    def min_margin(self):
        return min((hr.min_margin for hr in self.hour_results), default=float("nan"))

    def to_dict(self):
        entries = []
        for t, h in enumerate(self.hours):
            for j, (bus, phase) in enumerate(self.pv_labels):
                entries.append({"bus": bus, "phase": phase, "hour": int(h),
                                "value": float(self.alpha[t, j])})
        out = {
            "mode": self.mode,
            "epsilon": self.epsilon,
            "horizon": len(self.hours),
            "objective_kwh": None if self.objective_kwh is None else float(self.objective_kwh),
            "alpha_q": entries,
            "status": self.status,
            "solve_ms": float(self.solve_ms),
        }
        hints = [hr.hint for hr in self.hour_results if hr.hint]
        if hints:
            out["hint"] = hints[0]
        return out


def _row_lhs_terms(block, rows, alpha, mode, kappa):
    """cvxpy expression for one side's hardened row left-hand sides."""
    lay = rows.layout
    qcap = lay.sl_qcap
    left = rows.a_const[:, :qcap.start]
    coupled = cp.multiply(rows.alpha_coef, cp.reshape(alpha, (1, lay.n_pv), order="C"))
    a_expr = cp.hstack([cp.Constant(left), coupled])
    lhs = a_expr @ block.mu + rows.b
    if mode == "robust":
        lhs = lhs + cp.abs(a_expr) @ block.robust_half
    elif mode == "drcc" and not block.zero_cov:
        lhs = lhs + kappa * cp.norm(a_expr @ block.cov_sqrt.T, 2, axis=1)
    return lhs


def evaluate_row_margins(block, rows, alpha, mode, kappa, robust_half=None):
    """Numeric margins (-lhs) of one side's rows at a fixed dispatch."""
    a = rows.a_matrix(alpha)
    lhs = a @ block.mu + rows.b
    if mode == "robust":
        lhs = lhs + np.abs(a) @ (block.robust_half if robust_half is None else robust_half)
    elif mode == "drcc" and not block.zero_cov:
        lhs = lhs + kappa * np.linalg.norm(a @ block.cov_sqrt.T, axis=1)
    return -lhs


def _block_margins(problem, block, alpha):
    kappa = problem.radius
    margins = [evaluate_row_margins(block, block.upper, alpha, problem.mode, kappa),
               evaluate_row_margins(block, block.lower, alpha, problem.mode, kappa)]
    v_mean = block.v_base + block.v_alpha @ alpha
    margins.append(problem.v_max - v_mean)
    margins.append(v_mean - problem.v_min)
    return float(min(m.min() for m in margins if m.size))


def _diagnose_infeasible(problem, block, config):
    """Re-solve with elastic rows; report the row needing the most slack."""
    lay = problem.layout
    kappa = problem.radius
    alpha = cp.Variable(lay.n_pv)
    tagged = []
    cons = [alpha >= -1.0, alpha <= 1.0]
    elastic = []
    for rows in (block.upper, block.lower):
        s = cp.Variable(rows.n_rows, nonneg=True)
        cons.append(_row_lhs_terms(block, rows, alpha, problem.mode, kappa) <= s)
        elastic.append(s)
        tagged.extend((rows.side, bus, ph) for bus, ph in rows.labels)
    v_mean = block.v_base + block.v_alpha @ alpha
    s_box = cp.Variable(2 * lay.n_load, nonneg=True)
    cons.append(v_mean - problem.v_max <= s_box[:lay.n_load])
    cons.append(problem.v_min - v_mean <= s_box[lay.n_load:])
    elastic.append(s_box)
    tagged.extend(("mean-upper", b, p) for b, p in lay.load_entries)
    tagged.extend(("mean-lower", b, p) for b, p in lay.load_entries)

    prob = cp.Problem(cp.Minimize(sum(cp.sum(s) for s in elastic)), cons)
    try:
        prob.solve(solver=getattr(cp, config.solver.upper()), **config.options())
        slack = np.concatenate([np.asarray(s.value).ravel() for s in elastic])
    except Exception:
        return "infeasible (relaxation diagnostics unavailable)"
    worst = int(np.argmax(slack))
    side, bus, ph = tagged[worst]
    return (f"hour {block.hour}: {side} voltage row at bus {bus} phase {ph} "
            f"needs slack {slack[worst]:.3e} even with every inverter free")


def _solve_block(problem, block, config):
    lay = problem.layout
    kappa = problem.radius
    if lay.n_pv == 0:
        alpha = np.zeros(0)
        margin = _block_margins(problem, block, alpha)
        status = "optimal" if margin >= -1e-9 else "infeasible"
        hint = None if status == "optimal" else (
            f"hour {block.hour}: no inverter available and fixed rows are violated")
        return HourResult(block.hour, status, alpha, block.obj_const, margin, hint)

    alpha = cp.Variable(lay.n_pv)
    cons = [alpha >= -1.0, alpha <= 1.0]
    v_mean = block.v_base + block.v_alpha @ alpha
    cons += [v_mean <= problem.v_max, v_mean >= problem.v_min]
    for rows in (block.upper, block.lower):
        if rows.n_rows:
            cons.append(_row_lhs_terms(block, rows, alpha, problem.mode, kappa) <= 0)
    prob = cp.Problem(cp.Minimize(block.obj_const + block.obj_alpha @ alpha), cons)
    try:
        prob.solve(solver=getattr(cp, config.solver.upper()), **config.options())
    except cp.error.SolverError:
        prob = None

    status_raw = prob.status if prob is not None else "solver_error"
    if status_raw == cp.OPTIMAL:
        status = "optimal"
    elif status_raw in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        status = "infeasible"
    else:
        status = "numerical-limit"

    if status == "optimal":
        a_val = np.asarray(alpha.value, dtype=float).ravel()
        obj = float(block.obj_const + block.obj_alpha @ a_val)
        return HourResult(block.hour, status, a_val,
                          obj, _block_margins(problem, block, a_val))
    hint = _diagnose_infeasible(problem, block, config) if status == "infeasible" else (
        f"hour {block.hour}: solver stopped with status '{status_raw}'")
    return HourResult(block.hour, status, np.zeros(lay.n_pv), float("nan"),
                      float("-inf"), hint)


def solve_dispatch(problem, config=None):
    """Solve every hour of a :class:`DispatchProblem` independently."""
    config = config or SolverConfig()
    t0 = time.perf_counter()
    results = [_solve_block(problem, block, config) for block in problem.blocks]
    ms = (time.perf_counter() - t0) * 1e3

    statuses = {hr.status for hr in results}
    if statuses == {"optimal"}:
        status = "optimal"
    elif "infeasible" in statuses:
        status = "infeasible"
    else:
        status = "numerical-limit"

    alpha = np.vstack([hr.alpha for hr in results]) if results else np.zeros((0, problem.layout.n_pv))
    if status == "optimal":
        objective_kwh = float(sum(hr.objective_pu for hr in results) * problem.base_power_kva)
    else:
        objective_kwh = None
    return DispatchSolution(problem.mode, problem.epsilon, problem.hours,
                            problem.pv_labels, alpha, objective_kwh, status,
                            results, ms)


# ---------------------------------------------------------------------------
# Solution files


def save_dispatch(solution, path):
    with open(path, "w") as fh:
        json.dump(solution.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dispatch(path):
    with open(path) as fh:
        return json.load(fh)


def alpha_from_dispatch(data, problem):
    """Rebuild the (n_hours, n_pv) dispatch array from a dispatch dict,
    validating coverage against the problem's PV layout and hours."""
    table = {(e["bus"], e["phase"], int(e["hour"])): float(e["value"])
             for e in data.get("alpha_q", [])}
    out = np.zeros((len(problem.hours), problem.layout.n_pv))
    missing = []
    for t, h in enumerate(problem.hours):
        for j, (bus, ph) in enumerate(problem.pv_labels):
            key = (bus, ph, int(h))
            if key in table:
                out[t, j] = table[key]
            else:
                missing.append(key)
    if missing:
        raise MomentCoverageError(f"dispatch file lacks alpha values for {missing[:5]}"
                                  + ("..." if len(missing) > 5 else ""))
    return out
