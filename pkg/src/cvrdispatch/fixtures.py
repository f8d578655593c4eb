"""Deterministic synthetic fixtures: study feeders, daily profiles, moment
tables and a mixed-resolution measurement fleet.

Everything here is reproducible from explicit constants and seeds; no
fixture depends on external data files.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .dispatch import P_LOAD, P_PV, Q_LOAD, QCAP_PV, build_layout
from .enrichment import HighResSeries, MomentAmbiguitySet, _transformer_seed_word
from .feeder import Bus, Feeder, Line, PHASES, build_incidence, save_feeder
from .loads import PvInverter, ZipCoefficients

# Hour-of-day shapes (fraction of the per-entry base level).
LOAD_SHAPE = np.array([
    0.58, 0.55, 0.53, 0.52, 0.53, 0.56, 0.62, 0.70, 0.76, 0.79, 0.80, 0.81,
    0.80, 0.78, 0.76, 0.77, 0.82, 0.90, 0.97, 1.00, 0.98, 0.90, 0.76, 0.64,
])
PV_SHAPE = np.array([
    0.00, 0.00, 0.00, 0.00, 0.00, 0.00, 0.05, 0.20, 0.42, 0.62, 0.80, 0.93,
    1.00, 0.97, 0.88, 0.72, 0.52, 0.30, 0.10, 0.00, 0.00, 0.00, 0.00, 0.00,
])
Q_FRACTION = 0.35  # reactive-to-active load ratio (pf ~ 0.94)

# Per-unit line impedance per unit length; tuned so the 13-bus feeder sags
# enough under peak load that the lower voltage limit binds once the
# inverters absorb, without leaving the linear model's comfort zone.
_R_SELF, _X_SELF = 0.0030, 0.0066
_R_MUT, _X_MUT = 0.0007, 0.0028


def _line(from_id, to_id, length, phases=("a", "b", "c")):
    mask = np.zeros((3, 3))
    idx = [PHASES.index(p) for p in phases]
    mask[np.ix_(idx, idx)] = 1.0
    eye = np.eye(3)
    r = length * (_R_SELF * eye + _R_MUT * (1.0 - eye)) * mask
    x = length * (_X_SELF * eye + _X_MUT * (1.0 - eye)) * mask
    return Line(from_id, to_id, r, x)


def three_bus_feeder():
    """Single-phase two-line feeder with PV at both load buses."""
    zc = ZipCoefficients()
    buses = [
        Bus("b0", ("a",), zc),
        Bus("b1", ("a",), zc, PvInverter(0.40, ("a",))),
        Bus("b2", ("a",), zc, PvInverter(0.40, ("a",))),
    ]
    r1 = np.zeros((3, 3)); r1[0, 0] = 0.015
    x1 = np.zeros((3, 3)); x1[0, 0] = 0.030
    r2 = np.zeros((3, 3)); r2[0, 0] = 0.020
    x2 = np.zeros((3, 3)); x2[0, 0] = 0.040
    lines = [Line("b0", "b1", r1, x1), Line("b1", "b2", r2, x2)]
    return Feeder(buses, lines, "b0", np.ones(3))


THREE_BUS_WEIGHTS = {"b1": {"a": 0.35}, "b2": {"a": 0.45}}

# Per-phase base load multipliers for the 13-bus feeder (peak = base * 1.0).
THIRTEEN_BUS_WEIGHTS = {
    "b1": {"a": 0.30, "b": 0.28, "c": 0.32},
    "b2": {"a": 0.25, "b": 0.27, "c": 0.24},
    "b3": {"a": 0.33, "b": 0.30, "c": 0.35},
    "b4": {"a": 0.38, "b": 0.36, "c": 0.40},
    "b5": {"a": 0.28, "b": 0.30, "c": 0.26},
    "b6": {"a": 0.36, "b": 0.33, "c": 0.38},
    "b7": {"a": 0.30, "b": 0.34},
    "b8": {"a": 0.42, "b": 0.38},
    "b9": {"a": 0.30, "b": 0.32, "c": 0.31},
    "b10": {"a": 0.40, "b": 0.42, "c": 0.38},
    "b11": {"c": 0.44},
    "b12": {"a": 0.36, "b": 0.34, "c": 0.37},
}


def thirteen_bus_feeder():
    """Unbalanced 13-bus feeder: three-phase trunk, a two-phase lateral
    (b7-b8), a single-phase spur (b11) and PV at b4, b6 and b10."""
    zc = ZipCoefficients()
    pv = PvInverter(0.45)
    buses = [
        Bus("b0", ("a", "b", "c"), zc),
        Bus("b1", ("a", "b", "c"), zc),
        Bus("b2", ("a", "b", "c"), zc),
        Bus("b3", ("a", "b", "c"), zc),
        Bus("b4", ("a", "b", "c"), zc, pv),
        Bus("b5", ("a", "b", "c"), zc),
        Bus("b6", ("a", "b", "c"), zc, pv),
        Bus("b7", ("a", "b"), zc),
        Bus("b8", ("a", "b"), zc),
        Bus("b9", ("a", "b", "c"), zc),
        Bus("b10", ("a", "b", "c"), zc, pv),
        Bus("b11", ("c",), zc),
        Bus("b12", ("a", "b", "c"), zc),
    ]
    lines = [
        _line("b0", "b1", 1.0),
        _line("b1", "b2", 0.8),
        _line("b2", "b3", 0.7),
        _line("b3", "b4", 0.9),
        _line("b2", "b5", 0.6),
        _line("b5", "b6", 0.8),
        _line("b3", "b7", 0.5, ("a", "b")),
        _line("b7", "b8", 0.6, ("a", "b")),
        _line("b4", "b9", 0.7),
        _line("b9", "b10", 0.8),
        _line("b6", "b11", 0.5, ("c",)),
        _line("b9", "b12", 0.6),
    ]
    return Feeder(buses, lines, "b0", np.ones(3))


def load_profile(feeder, weights, hour, scale=1.0):
    """Mean (p, q) load multipliers per non-root bus/phase at one hour."""
    labels = build_incidence(feeder).col_labels
    shape = LOAD_SHAPE[hour % 24] * scale
    p = np.array([weights.get(b, {}).get(ph, 0.0) * shape for b, ph in labels])
    return p, Q_FRACTION * p


def build_moments(feeder, weights, hours, rel_load=0.03, rel_pv=0.06,
                  load_scale=1.0, pv_level=0.8, load_floor_sigma=0.0):
    """Deterministic moment table from the fixture profiles.

    Per-entry standard deviations are relative to the mean (``rel_load``,
    ``rel_pv``); reactive-headroom moments follow from the PV active
    moments by the delta method.  ``rel_load=0`` gives a zero-variance
    table, useful for degenerate-uncertainty checks.
    """
    layout = build_layout(feeder)
    out = MomentAmbiguitySet()
    for h in hours:
        p_mu, q_mu = load_profile(feeder, weights, h, load_scale)
        for (bus, ph), pm, qm in zip(layout.load_entries, p_mu, q_mu):
            sp = max(rel_load * pm, load_floor_sigma)
            sq = max(rel_load * qm, load_floor_sigma)
            out.add(P_LOAD, bus, ph, h, pm, sp * sp)
            out.add(Q_LOAD, bus, ph, h, qm, sq * sq)
        for j, (bus, ph) in enumerate(layout.pv_entries):
            s_cap = feeder.bus(bus).pv.s_cap
            pg = pv_level * s_cap * PV_SHAPE[h % 24]
            sg = rel_pv * pg
            out.add(P_PV, bus, ph, h, pg, sg * sg)
            head = float(np.sqrt(max(s_cap * s_cap - pg * pg, 0.0)))
            dvar = (pg * sg / head) ** 2 if head > 1e-9 else 0.0
            out.add(QCAP_PV, bus, ph, h, head, dvar)
    return out


def three_bus_moments(hours=(12,), **kwargs):
    return build_moments(three_bus_feeder(), THREE_BUS_WEIGHTS, hours, **kwargs)


def thirteen_bus_moments(hours=tuple(range(24)), **kwargs):
    return build_moments(thirteen_bus_feeder(), THIRTEEN_BUS_WEIGHTS, hours, **kwargs)


# ---------------------------------------------------------------------------
# Synthetic measurement fleet


@dataclass
class TransformerSpec:
    """One monitored transformer of the synthetic fleet.

    ``base`` is the transformer-total per-unit level at shape 1.0 (split
    evenly over ``phases`` at ingestion); ``volatility`` scales the fast
    within-hour fluctuation process.
    """

    transformer_id: str
    kind: str            # "load" or "pv"
    bus: str
    phases: tuple
    base: float
    volatility: float
    day_noise: float = 0.05
    shape: np.ndarray = field(default_factory=lambda: LOAD_SHAPE)


def generate_highres(spec, n_days=2, samples_per_hour=120, master_seed=7):
    """Simulate a transformer's true high-resolution day(s).

    The fast process is a clipped stationary AR(1) riding on the hourly
    shape, with an independent day-level level shift; reactive power
    follows at constant power factor for loads and stays zero for PV.
    """
    from scipy.signal import lfilter

    rng = np.random.default_rng([int(master_seed), _transformer_seed_word(spec.transformer_id)])
    rho = 0.9
    innov = np.sqrt(1.0 - rho * rho)
    hours = np.arange(24 * n_days)
    vals = np.empty((len(hours), samples_per_hour))
    z = float(rng.standard_normal())
    for d in range(n_days):
        day_factor = 1.0 + spec.day_noise * rng.standard_normal()
        e = rng.standard_normal(24 * samples_per_hour)
        chain, zf = lfilter([innov], [1.0, -rho], e, zi=[rho * z])
        z = float(chain[-1])
        shaped = np.clip(chain, -2.5, 2.5).reshape(24, samples_per_hour)
        levels = spec.base * spec.shape * day_factor
        vals[24 * d: 24 * (d + 1)] = np.maximum(
            levels[:, None] * (1.0 + spec.volatility * shaped), 0.0)
    p = HighResSeries(spec.transformer_id, hours, vals)
    q_vals = Q_FRACTION * vals if spec.kind == "load" else np.zeros_like(vals)
    q = HighResSeries(spec.transformer_id, hours, q_vals)
    return p, q


# Teacher volatility offsets around the student level.  The first half is
# biased high, so a 4-teacher subset mis-estimates dispersion while the
# full 8-teacher set is balanced.
TEACHER_VOL_OFFSETS = (0.05, 0.025, 0.05, 0.025, -0.05, -0.025, -0.05, -0.025)


def study_fleet(n_teachers=8, n_students=12, student_vol=0.20, seed=3):
    """Specs for the teacher-count study: similar daily patterns, student
    volatilities centered at ``student_vol`` and teachers spread around it."""
    rng = np.random.default_rng(seed)
    teachers = []
    for k in range(n_teachers):
        off = TEACHER_VOL_OFFSETS[k % len(TEACHER_VOL_OFFSETS)]
        teachers.append(TransformerSpec(
            f"pmu{k:02d}", "load", f"tb{k}", ("a",),
            base=0.55 + 0.05 * (k % 4), volatility=student_vol + off))
    students = []
    for k in range(n_students):
        students.append(TransformerSpec(
            f"sm{k:02d}", "load", f"sb{k}", ("a",),
            base=0.50 + 0.04 * (k % 6) + 0.01 * rng.random(),
            volatility=student_vol + rng.uniform(-0.02, 0.02)))
    return teachers, students


def example_fleet(feeder=None):
    """Transformer fleet matched to the 13-bus feeder: 8 high-resolution
    teachers (5 load, 3 PV) and per-phase ordinary meters elsewhere."""
    feeder = feeder or thirteen_bus_feeder()
    vol_cycle = (0.16, 0.22, 0.18, 0.24, 0.20)
    teachers = []
    for i, bus in enumerate(("b4", "b6", "b8", "b10", "b12")):
        phases = tuple(feeder.bus(bus).phases)
        w = THIRTEEN_BUS_WEIGHTS[bus]
        base = sum(w.values())
        teachers.append(TransformerSpec(
            f"pmu_l{i}", "load", bus, phases, base, vol_cycle[i]))
    for i, bus in enumerate(("b4", "b6", "b10")):
        pv = feeder.bus(bus).pv
        teachers.append(TransformerSpec(
            f"pmu_g{i}", "pv", bus, tuple(pv.phases),
            base=0.8 * pv.s_cap * len(pv.phases), volatility=0.10,
            shape=PV_SHAPE))
    students = []
    covered = {t.bus for t in teachers if t.kind == "load"}
    i = 0
    for bus in feeder.non_root_buses():
        if bus.id in covered:
            continue
        for ph in bus.phases:
            w = THIRTEEN_BUS_WEIGHTS[bus.id][ph]
            students.append(TransformerSpec(
                f"sm{i:02d}", "load", bus.id, (ph,), w,
                volatility=0.18 + 0.02 * (i % 3)))
            i += 1
    return teachers, students


def write_example_dataset(outdir, n_days=2, samples_per_hour=60, master_seed=7,
                          epsilon=0.05, horizon=24):
    """Materialize the 13-bus demo dataset: feeder file, teacher/student
    measurement CSVs and a pipeline config.  Returns the config path."""
    from .enrichment import write_highres_csv
    import pandas as pd

    os.makedirs(outdir, exist_ok=True)
    feeder = thirteen_bus_feeder()
    feeder_path = os.path.join(outdir, "feeder.json")
    save_feeder(feeder, feeder_path)

    teachers, students = example_fleet(feeder)
    base_kva = feeder.base_power_kva

    def rows_for(spec, highres):
        p, q = highres
        frames = []
        m = p.samples_per_hour
        step = pd.to_timedelta(3600.0 / m, unit="s")
        base = pd.Timestamp("2024-01-01")
        for i, h in enumerate(p.hours):
            start = base + pd.to_timedelta(int(h), unit="h")
            frames.append(pd.DataFrame({
                "timestamp": start + step * np.arange(m),
                "transformer_id": spec.transformer_id,
                "p_kw": p.values[i] * base_kva,
                "q_kvar": q.values[i] * base_kva,
            }))
        return frames

    pmu_frames = []
    for spec in teachers:
        pmu_frames.extend(rows_for(spec, generate_highres(
            spec, n_days, samples_per_hour, master_seed)))
    pd.concat(pmu_frames, ignore_index=True).to_csv(
        os.path.join(outdir, "pmu.csv"), index=False)

    sm_frames = []
    base_ts = pd.Timestamp("2024-01-01")
    for spec in students:
        p, q = generate_highres(spec, n_days, samples_per_hour, master_seed)
        sm_frames.append(pd.DataFrame({
            "timestamp": base_ts + pd.to_timedelta(p.hours, unit="h"),
            "transformer_id": spec.transformer_id,
            "p_kw": p.values.mean(axis=1) * base_kva,
            "q_kvar": q.values.mean(axis=1) * base_kva,
        }))
    pd.concat(sm_frames, ignore_index=True).to_csv(
        os.path.join(outdir, "sm.csv"), index=False)

    config = {
        "feeder": "feeder.json",
        "pmu_csv": "pmu.csv",
        "sm_csv": "sm.csv",
        "moments": "moments.json",
        "transformers": {
            spec.transformer_id: {"kind": spec.kind, "bus": spec.bus,
                                  "phases": list(spec.phases)}
            for spec in teachers + students
        },
        "horizon": horizon,
        "epsilon": epsilon,
        "samples_per_hour": samples_per_hour,
        "seed": master_seed,
    }
    config_path = os.path.join(outdir, "config.json")
    with open(config_path, "w") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return config_path
