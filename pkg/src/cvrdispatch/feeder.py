"""Unbalanced three-phase radial feeder model and linearized power-flow
sensitivities.

The feeder is a rooted tree.  Each line carries the phases of its
downstream (to) bus, which must be a subset of the upstream bus's phases,
so phase sets only shrink moving away from the substation.  Squared
voltage magnitudes at every non-root bus/phase respond affinely to net
injections through

    v = v_tilde + R p + X q

where ``R = 2 A^{-1} D_r A^{-T}`` and ``X = 2 A^{-1} D_x A^{-T}`` are built
from the phase-wise line incidence ``[A0 | A]`` and block-diagonal
effective line impedances, and ``v_tilde = -A^{-1} A0 v0`` propagates the
substation voltage.  Effective impedances fold the 120-degree phase
rotation into the self/mutual terms so that mutual coupling acts on
squared magnitudes.

All impedances, powers and squared voltages are per-unit; unit conversion
happens only when reading feeder files.
"""

from __future__ import annotations

import cmath
import json
from dataclasses import dataclass, field

import numpy as np

from .loads import PvInverter, ZipCoefficients

PHASES = ("a", "b", "c")
_PHASE_POS = {"a": 0, "b": 1, "c": 2}

# Rotation between phase quantities: successive phases lag by 120 degrees.
_ALPHA = cmath.exp(-2j * cmath.pi / 3.0)


class FeederError(ValueError):
    """Feeder description violates the radial-model requirements."""


@dataclass(frozen=True)
class Bus:
    id: str
    phases: tuple
    zip_coeffs: ZipCoefficients = field(default_factory=ZipCoefficients)
    pv: PvInverter | None = None


@dataclass(frozen=True)
class Line:
    """Series element between two buses with 3x3 per-unit r/x matrices.

    Rows/columns follow phase order (a, b, c); entries on phases the line
    does not carry are zero.
    """

    from_id: str
    to_id: str
    r: np.ndarray
    x: np.ndarray


@dataclass
class Feeder:
    buses: list
    lines: list
    root_id: str
    v0: np.ndarray  # squared voltage magnitude per phase at the feeder head
    base_voltage_kv: float = 13.8
    base_power_kva: float = 100.0

    def __post_init__(self):
        self.v0 = np.broadcast_to(np.asarray(self.v0, dtype=float), (3,)).copy()
        self._bus_map = {b.id: b for b in self.buses}

    def bus(self, bus_id):
        return self._bus_map[bus_id]

    @property
    def root(self):
        return self._bus_map[self.root_id]

    def non_root_buses(self):
        return [b for b in self.buses if b.id != self.root_id]

    def pv_entries(self):
        """PV (bus_id, phase) pairs in bus order, phases in (a, b, c) order."""
        out = []
        for bus in self.buses:
            if bus.pv is None or bus.id == self.root_id:
                continue
            for ph in PHASES:
                if ph in bus.pv.phases and ph in bus.phases:
                    out.append((bus.id, ph))
        return out


@dataclass
class ValidationReport:
    ok: bool
    violations: list

    def __str__(self):
        if self.ok:
            return "feeder valid"
        return "feeder invalid:\n  " + "\n  ".join(self.violations)


def line_phases(line, feeder):
    """Phases carried by a line: the phase set of its downstream bus."""
    to_bus = feeder.bus(line.to_id)
    return tuple(ph for ph in PHASES if ph in to_bus.phases)


def validate_radial(feeder):
    """Check tree structure, orientation, phase consistency and impedance
    sanity.  Returns a :class:`ValidationReport` listing every violation
    found instead of stopping at the first."""
    v = []
    ids = [b.id for b in feeder.buses]
    seen = set()
    for bid in ids:
        if bid in seen:
            v.append(f"duplicate bus id '{bid}'")
        seen.add(bid)
    if feeder.root_id not in seen:
        v.append(f"root bus '{feeder.root_id}' not present")
        return ValidationReport(False, v)

    for bus in feeder.buses:
        if not bus.phases:
            v.append(f"bus '{bus.id}' has an empty phase set")
        for ph in bus.phases:
            if ph not in PHASES:
                v.append(f"bus '{bus.id}' lists unknown phase '{ph}'")

    dangling = False
    for k, line in enumerate(feeder.lines):
        for end in (line.from_id, line.to_id):
            if end not in seen:
                v.append(f"line {k} ({line.from_id}->{line.to_id}): dangling endpoint '{end}'")
                dangling = True

    if len(feeder.lines) != len(feeder.buses) - 1:
        v.append(
            f"not radial: {len(feeder.lines)} lines for {len(feeder.buses)} buses "
            "(need |lines| = |buses| - 1)"
        )
    if dangling:
        return ValidationReport(False, v)

    incoming = {b.id: 0 for b in feeder.buses}
    adjacency = {b.id: [] for b in feeder.buses}
    for line in feeder.lines:
        incoming[line.to_id] += 1
        adjacency[line.from_id].append(line.to_id)
        adjacency[line.to_id].append(line.from_id)
    if incoming[feeder.root_id] != 0:
        v.append("root bus has an incoming line")
    for bus in feeder.non_root_buses():
        if incoming[bus.id] != 1:
            v.append(
                f"bus '{bus.id}' has {incoming[bus.id]} incoming lines "
                "(each non-root bus needs exactly one; lines are oriented away from the root)"
            )

    reached = {feeder.root_id}
    frontier = [feeder.root_id]
    while frontier:
        nxt = []
        for bid in frontier:
            for other in adjacency[bid]:
                if other not in reached:
                    reached.add(other)
                    nxt.append(other)
        frontier = nxt
    for bus in feeder.buses:
        if bus.id not in reached:
            v.append(f"bus '{bus.id}' is disconnected from the root")

    for k, line in enumerate(feeder.lines):
        fb, tb = feeder.bus(line.from_id), feeder.bus(line.to_id)
        missing = [ph for ph in tb.phases if ph not in fb.phases]
        if missing:
            v.append(
                f"line {k} ({line.from_id}->{line.to_id}): downstream phases "
                f"{missing} absent at the upstream bus"
            )
        for name, mat in (("r", line.r), ("x", line.x)):
            m = np.asarray(mat, dtype=float)
            if m.shape != (3, 3):
                v.append(f"line {k}: {name} must be 3x3")
                continue
            if not np.allclose(m, m.T, atol=1e-9):
                v.append(f"line {k}: {name} matrix is not symmetric")
            if name == "r" and np.any(np.diag(m) < -1e-12):
                v.append(f"line {k}: negative series resistance")
            carried = line_phases(line, feeder)
            for ph in PHASES:
                if ph in carried:
                    continue
                i = _PHASE_POS[ph]
                if np.any(m[i, :] != 0.0) or np.any(m[:, i] != 0.0):
                    v.append(
                        f"line {k}: nonzero {name} entries on phase '{ph}' "
                        "which the line does not carry"
                    )

    return ValidationReport(not v, v)


@dataclass
class IncidencePair:
    """Phase-wise line-bus incidence split into root and interior columns.

    Rows follow line order, phases (a, b, c) within a line; columns follow
    non-root bus order, phases within a bus.  ``a0`` holds the +1 entries
    for lines leaving the root (one column per root phase), ``a`` the
    +1/-1 entries on interior buses.
    """

    a0: np.ndarray
    a: np.ndarray
    row_labels: tuple  # (line_index, phase)
    col_labels: tuple  # (bus_id, phase)
    col_index: dict = field(init=False)

    def __post_init__(self):
        self.col_index = {lab: i for i, lab in enumerate(self.col_labels)}


def build_incidence(feeder):
    report = validate_radial(feeder)
    if not report.ok:
        raise FeederError(str(report))

    col_labels = []
    for bus in feeder.non_root_buses():
        for ph in PHASES:
            if ph in bus.phases:
                col_labels.append((bus.id, ph))
    col_index = {lab: i for i, lab in enumerate(col_labels)}

    row_labels = []
    for k, line in enumerate(feeder.lines):
        for ph in line_phases(line, feeder):
            row_labels.append((k, ph))

    n = len(col_labels)
    a0 = np.zeros((len(row_labels), 3))
    a = np.zeros((len(row_labels), n))
    for r, (k, ph) in enumerate(row_labels):
        line = feeder.lines[k]
        if line.from_id == feeder.root_id:
            a0[r, _PHASE_POS[ph]] = 1.0
        else:
            a[r, col_index[(line.from_id, ph)]] = 1.0
        a[r, col_index[(line.to_id, ph)]] = -1.0
    return IncidencePair(a0, a, tuple(row_labels), tuple(col_labels))


def phase_rotation_matrix():
    """3x3 matrix of inter-phase rotation factors alpha^(i-j)."""
    g = np.empty((3, 3), dtype=complex)
    for i in range(3):
        for j in range(3):
            g[i, j] = _ALPHA ** (i - j)
    return g


_GAMMA = phase_rotation_matrix()


def three_phase_effective_impedance(line):
    """Effective (r_eff, x_eff) coupling line power flows to squared-voltage
    drops across the line.

    The phase rotation mixes resistance and reactance off the diagonal:
    ``r_eff = Re(G) * r + Im(G) * x`` and ``x_eff = Re(G) * x - Im(G) * r``
    elementwise, with ``G`` the rotation-factor matrix.  Diagonals are
    untouched (``G_ii = 1``); with mutual coupling the result is generally
    not symmetric.
    """
    r = np.asarray(line.r, dtype=float)
    x = np.asarray(line.x, dtype=float)
    r_eff = _GAMMA.real * r + _GAMMA.imag * x
    x_eff = _GAMMA.real * x - _GAMMA.imag * r
    return r_eff, x_eff


@dataclass
class SensitivityModel:
    """Affine squared-voltage response ``v = v_tilde + R p + X q``.

    Rows/columns of ``r_sens``/``x_sens`` and entries of ``v_tilde`` are
    aligned with ``labels`` (non-root bus/phase pairs); injections are net
    per-unit powers into each bus/phase.
    """

    r_sens: np.ndarray
    x_sens: np.ndarray
    v_tilde: np.ndarray
    labels: tuple

    def voltages(self, p_inj, q_inj):
        return self.v_tilde + self.r_sens @ p_inj + self.x_sens @ q_inj


def build_sensitivities(feeder, incidence=None):
    if incidence is None:
        incidence = build_incidence(feeder)
    n = len(incidence.col_labels)
    d_r = np.zeros((n, n))
    d_x = np.zeros((n, n))
    row = 0
    for k, line in enumerate(feeder.lines):
        phs = line_phases(line, feeder)
        idx = [_PHASE_POS[ph] for ph in phs]
        r_eff, x_eff = three_phase_effective_impedance(line)
        m = len(idx)
        sel = np.ix_(idx, idx)
        d_r[row:row + m, row:row + m] = r_eff[sel]
        d_x[row:row + m, row:row + m] = x_eff[sel]
        row += m

    try:
        a_inv = np.linalg.inv(incidence.a)
    except np.linalg.LinAlgError as exc:
        raise FeederError("incidence matrix is singular; feeder is not radial") from exc

    r_sens = 2.0 * a_inv @ d_r @ a_inv.T
    x_sens = 2.0 * a_inv @ d_x @ a_inv.T
    v_tilde = -a_inv @ (incidence.a0 @ feeder.v0)
    return SensitivityModel(r_sens, x_sens, v_tilde, incidence.col_labels)


# ---------------------------------------------------------------------------
# File format


def _require(d, key, where):
    if key not in d:
        raise FeederError(f"{where}: missing required field '{key}'")
    return d[key]


def feeder_from_dict(data):
    base_kva = float(_require(data, "base_power_kva", "feeder"))
    base_kv = float(_require(data, "base_voltage_kv", "feeder"))
    root = _require(data, "root", "feeder")
    v0_raw = _require(data, "v0", "feeder")
    v0 = np.asarray(v0_raw, dtype=float)
    if v0.ndim == 0:
        v0 = np.full(3, float(v0))
    elif v0.shape != (3,):
        raise FeederError("feeder: v0 must be a scalar or a 3-vector of squared magnitudes")

    buses = []
    for i, entry in enumerate(_require(data, "buses", "feeder")):
        where = f"buses[{i}]"
        bid = str(_require(entry, "id", where))
        phases = tuple(_require(entry, "phases", where))
        zd = entry.get("zip")
        if zd is None:
            zc = ZipCoefficients()
        else:
            default = ZipCoefficients()
            zc = ZipCoefficients(
                kp=tuple(zd.get("kp", default.kp)),
                kq=tuple(zd.get("kq", default.kq)),
            )
        pv = None
        pd_ = entry.get("pv")
        if pd_ is not None:
            s_kva = float(_require(pd_, "s_cap_kva", where + ".pv"))
            pv_phases = tuple(pd_.get("phases", phases))
            pv = PvInverter(s_cap=s_kva / base_kva, phases=pv_phases)
        buses.append(Bus(bid, phases, zc, pv))

    lines = []
    for i, entry in enumerate(_require(data, "lines", "feeder")):
        where = f"lines[{i}]"
        try:
            r = np.asarray(_require(entry, "r", where), dtype=float)
            x = np.asarray(_require(entry, "x", where), dtype=float)
        except (TypeError, ValueError) as exc:
            raise FeederError(f"{where}: r/x must be numeric 3x3 matrices") from exc
        if r.shape != (3, 3) or x.shape != (3, 3):
            raise FeederError(f"{where}: r/x must be 3x3 (row-major, per-unit)")
        lines.append(Line(str(_require(entry, "from", where)),
                          str(_require(entry, "to", where)), r, x))

    return Feeder(buses, lines, str(root), v0, base_kv, base_kva)


def feeder_to_dict(feeder):
    data = {
        "root": feeder.root_id,
        "v0": [float(v) for v in feeder.v0],
        "base_voltage_kv": feeder.base_voltage_kv,
        "base_power_kva": feeder.base_power_kva,
        "buses": [],
        "lines": [],
    }
    for bus in feeder.buses:
        entry = {
            "id": bus.id,
            "phases": list(bus.phases),
            "zip": {"kp": list(bus.zip_coeffs.kp), "kq": list(bus.zip_coeffs.kq)},
        }
        if bus.pv is not None:
            entry["pv"] = {
                "s_cap_kva": bus.pv.s_cap * feeder.base_power_kva,
                "phases": list(bus.pv.phases),
            }
        data["buses"].append(entry)
    for line in feeder.lines:
        data["lines"].append({
            "from": line.from_id,
            "to": line.to_id,
            "r": np.asarray(line.r).tolist(),
            "x": np.asarray(line.x).tolist(),
        })
    return data


def load_feeder(path):
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FeederError(f"{path}: not valid JSON ({exc})") from exc
    return feeder_from_dict(data)


def save_feeder(feeder, path):
    with open(path, "w") as fh:
        json.dump(feeder_to_dict(feeder), fh, indent=2, sort_keys=True)
        fh.write("\n")
