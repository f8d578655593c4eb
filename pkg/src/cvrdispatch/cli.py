"""Command-line pipeline: feeder checks, measurement enrichment, dispatch
and Monte-Carlo validation.

All stages read a shared JSON config (paths resolved relative to the
config file) and accept flag overrides.  The solver feasibility/gap
tolerance can be overridden with the ``CVR_SOLVER_TOL`` environment
variable.  Outputs are deterministic for fixed seeds except the isolated
``solve_ms`` timing fields.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import dispatch, enrichment, validation
from .dispatch import P_LOAD, P_PV, Q_LOAD, QCAP_PV
from .feeder import FeederError, load_feeder, validate_radial

SOLVER_TOL_ENV = "CVR_SOLVER_TOL"

_ERRORS = (FeederError, dispatch.ParameterError, dispatch.ModelValidityError,
           dispatch.MomentCoverageError, enrichment.DataError,
           enrichment.DegenerateBoundsError, FileNotFoundError, KeyError,
           json.JSONDecodeError)


def _solver_config():
    tol = os.environ.get(SOLVER_TOL_ENV)
    if tol is None:
        return dispatch.SolverConfig()
    try:
        tol = float(tol)
    except ValueError:
        raise dispatch.ParameterError(
            f"{SOLVER_TOL_ENV} must be a float, got '{os.environ[SOLVER_TOL_ENV]}'")
    if tol <= 0.0:
        raise dispatch.ParameterError(f"{SOLVER_TOL_ENV} must be positive")
    return dispatch.SolverConfig(tolerance=tol)


def _load_config(path):
    with open(path) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise dispatch.ParameterError(f"{path}: not valid JSON ({exc})") from None
    cfg.setdefault("horizon", 24)
    cfg.setdefault("epsilon", 0.05)
    cfg.setdefault("seed", 0)
    cfg.setdefault("samples_per_hour", 3600)
    cfg.setdefault("bins", enrichment.DEFAULT_BINS)
    cfg.setdefault("weights_mode", "inverse")
    cfg.setdefault("moments", "moments.json")
    cfg["_dir"] = os.path.dirname(os.path.abspath(path))
    return cfg


def _cfg_path(cfg, key):
    if key not in cfg:
        raise dispatch.ParameterError(f"config is missing required path '{key}'")
    return os.path.join(cfg["_dir"], cfg[key])


# ---------------------------------------------------------------------------
# feeder validate


def cmd_feeder_validate(args):
    feeder = load_feeder(args.feeder)
    report = validate_radial(feeder)
    print(report)
    if report.ok:
        n_phases = sum(len(b.phases) for b in feeder.non_root_buses())
        print(f"{len(feeder.buses)} buses, {len(feeder.lines)} lines, "
              f"{n_phases} non-root bus phases, {len(feeder.pv_entries())} PV phases")
        return 0
    return 1


# ---------------------------------------------------------------------------
# enrich


def _pool_by_clock_hour(series):
    """Pool a (possibly multi-day) series' rows per clock hour."""
    pooled = {}
    for i, h in enumerate(series.hours):
        pooled.setdefault(int(h) % 24, []).append(np.atleast_1d(series.values[i]))
    return {h: np.concatenate(chunks) for h, chunks in pooled.items()}


def _accumulate(samples, key, arr):
    if key in samples:
        if len(samples[key]) != len(arr):
            raise enrichment.DataError(
                f"{key}: conflicting sample counts from overlapping transformers")
        samples[key] = samples[key] + arr
    else:
        samples[key] = arr


def _spread_entries(samples, mapping, quantity, pooled):
    bus, phases = mapping["bus"], mapping["phases"]
    share = 1.0 / len(phases)
    for h, arr in pooled.items():
        for ph in phases:
            _accumulate(samples, (quantity, bus, ph, h), arr * share)


def cmd_enrich(args):
    cfg = _load_config(args.config)
    bins = args.bins or cfg["bins"]
    n_samples = args.samples_per_hour or cfg["samples_per_hour"]
    seed = cfg["seed"] if args.seed is None else args.seed
    mode = args.weights or cfg["weights_mode"]
    out_dir = args.out or cfg["_dir"]
    os.makedirs(out_dir, exist_ok=True)

    feeder = load_feeder(_cfg_path(cfg, "feeder"))
    tmap = cfg.get("transformers", {})
    if not tmap:
        raise dispatch.ParameterError("config must map transformers to bus/phases")
    for tid, m in tmap.items():
        try:
            bus = feeder.bus(m["bus"])
        except KeyError:
            raise dispatch.ParameterError(
                f"transformer '{tid}' maps to unknown bus '{m['bus']}'") from None
        for ph in m["phases"]:
            if ph not in bus.phases:
                raise dispatch.ParameterError(
                    f"transformer '{tid}': bus '{bus.id}' has no phase '{ph}'")

    highres = {}
    if cfg.get("pmu_csv"):
        highres = enrichment.load_highres_csv(_cfg_path(cfg, "pmu_csv"),
                                              feeder.base_power_kva)
    hourly = {}
    if cfg.get("sm_csv"):
        hourly = enrichment.load_hourly_csv(_cfg_path(cfg, "sm_csv"),
                                            feeder.base_power_kva)
    if not highres and not hourly:
        raise dispatch.ParameterError(
            "config must point to at least one measurement file "
            "(pmu_csv and/or sm_csv)")
    unknown = [t for t in list(highres) + list(hourly) if t not in tmap]
    if unknown:
        raise dispatch.ParameterError(f"measurements for unmapped transformers: {unknown}")

    teacher_ids = sorted(highres)
    models = {}
    patterns = []
    for tid in teacher_ids:
        p_hr, q_hr = highres[tid]
        entry = {
            "p": (enrichment.fit_bound_models(p_hr),
                  enrichment.fit_transition_model(p_hr, bins)),
            "q": None,
        }
        if tmap[tid]["kind"] == "load":
            entry["q"] = (enrichment.fit_bound_models(q_hr),
                          enrichment.fit_transition_model(q_hr, bins))
        models[tid] = entry
        patterns.append(enrichment.daily_patterns(enrichment.hourly_from_highres(p_hr)))

    samples = {}
    for tid in teacher_ids:
        p_hr, q_hr = highres[tid]
        m = tmap[tid]
        if m["kind"] == "pv":
            _spread_entries(samples, m, P_PV, _pool_by_clock_hour(p_hr))
        else:
            _spread_entries(samples, m, P_LOAD, _pool_by_clock_hour(p_hr))
            _spread_entries(samples, m, Q_LOAD, _pool_by_clock_hour(q_hr))

    q_teachers = [t for t in teacher_ids if models[t]["q"] is not None]
    for tid in sorted(hourly):
        p_h, q_h = hourly[tid]
        m = tmap[tid]
        if not teacher_ids:
            # no high-resolution data anywhere: moments fall back to the
            # across-day spread of the hourly means themselves
            quantity = P_PV if m["kind"] == "pv" else P_LOAD
            _spread_entries(samples, m, quantity, _pool_by_clock_hour(p_h))
            if m["kind"] != "pv":
                _spread_entries(samples, m, Q_LOAD, _pool_by_clock_hour(q_h))
            continue
        student_pat = enrichment.daily_patterns(p_h)
        weights = enrichment.compute_learning_weights(student_pat, patterns, mode)
        pairs = " ".join(f"{t}={w:.4f}" for t, w in zip(teacher_ids, weights.weights))
        print(f"weights[{tid}]: {pairs}")

        bounds_p, trans_p = enrichment.blend_teachers(
            weights, [models[t]["p"][0] for t in teacher_ids],
            [models[t]["p"][1] for t in teacher_ids])
        enriched_p = enrichment.enrich_series(p_h, bounds_p, trans_p, n_samples, seed)
        if m["kind"] == "pv":
            _spread_entries(samples, m, P_PV, _pool_by_clock_hour(enriched_p))
            enriched_q = None
        else:
            if not q_teachers:
                raise enrichment.DataError(
                    "no load teacher available to enrich reactive series")
            wq = weights.weights[[teacher_ids.index(t) for t in q_teachers]]
            wq = wq / wq.sum()
            bounds_q, trans_q = enrichment.blend_teachers(
                wq, [models[t]["q"][0] for t in q_teachers],
                [models[t]["q"][1] for t in q_teachers])
            enriched_q = enrichment.enrich_series(q_h, bounds_q, trans_q, n_samples, seed)
            _spread_entries(samples, m, P_LOAD, _pool_by_clock_hour(enriched_p))
            _spread_entries(samples, m, Q_LOAD, _pool_by_clock_hour(enriched_q))
        if args.write_enriched and enriched_q is not None:
            enrichment.write_highres_csv(
                os.path.join(out_dir, f"enriched_{tid}.csv"),
                enriched_p, enriched_q, feeder.base_power_kva)

    pv_caps = {(b, ph): feeder.bus(b).pv.s_cap for b, ph in feeder.pv_entries()}
    moments = enrichment.estimate_moments(samples, pv_caps=pv_caps)

    # uncovered bus phases carry no load; idle PV keeps full headroom
    hours = range(int(cfg["horizon"]))
    layout = dispatch.build_layout(feeder)
    have = set(moments.keys())
    for h in hours:
        for bus, ph in layout.load_entries:
            for q in (P_LOAD, Q_LOAD):
                if (q, bus, ph, h) not in have:
                    moments.add(q, bus, ph, h, 0.0, 0.0)
        for bus, ph in layout.pv_entries:
            if (P_PV, bus, ph, h) not in have:
                moments.add(P_PV, bus, ph, h, 0.0, 0.0)
            if (QCAP_PV, bus, ph, h) not in have:
                moments.add(QCAP_PV, bus, ph, h, pv_caps[(bus, ph)], 0.0)

    out_path = os.path.join(out_dir, cfg["moments"])
    enrichment.save_moments(moments, out_path)
    print(f"{len(teacher_ids)} teachers, {len(hourly)} students, "
          f"{len(moments)} moment entries -> {out_path}")
    return 0


# ---------------------------------------------------------------------------
# solve


def cmd_solve(args):
    cfg = _load_config(args.config)
    feeder = load_feeder(_cfg_path(cfg, "feeder"))
    moments = enrichment.load_moments(_cfg_path(cfg, "moments"))
    horizon = args.horizon or cfg["horizon"]
    epsilon = cfg["epsilon"] if args.epsilon is None else args.epsilon

    kwargs = {}
    if args.vmin is not None:
        kwargs["v_min"] = args.vmin
    if args.vmax is not None:
        kwargs["v_max"] = args.vmax
    problem = dispatch.build_problem(
        feeder, moments, args.mode, horizon=horizon,
        epsilon=epsilon if dispatch.normalize_mode(args.mode) == "drcc" else None,
        **kwargs)
    solution = dispatch.solve_dispatch(problem, _solver_config())

    out_path = args.out or os.path.join(cfg["_dir"], "dispatch.json")
    dispatch.save_dispatch(solution, out_path)
    print(f"mode={solution.mode} status={solution.status} "
          f"objective_kwh={solution.objective_kwh} "
          f"min_margin={solution.min_margin:.3e} -> {out_path}")
    if solution.status != "optimal":
        for hr in solution.hour_results:
            if hr.hint:
                print(f"hint: {hr.hint}", file=sys.stderr)
                break
        return 3
    return 0


# ---------------------------------------------------------------------------
# validate


def cmd_validate(args):
    cfg = _load_config(args.config)
    feeder = load_feeder(_cfg_path(cfg, "feeder"))
    moments = enrichment.load_moments(_cfg_path(cfg, "moments"))
    dispatch_path = args.dispatch or os.path.join(cfg["_dir"], "dispatch.json")
    data = dispatch.load_dispatch(dispatch_path)
    mode = data.get("mode", "drcc")
    epsilon = data.get("epsilon") or cfg["epsilon"]
    horizon = data.get("horizon", cfg["horizon"])

    problem = dispatch.build_problem(
        feeder, moments, mode, horizon=horizon,
        epsilon=epsilon if mode == "drcc" else None)
    alpha = dispatch.alpha_from_dispatch(data, problem)
    report = validation.monte_carlo_violation(problem, alpha, n=args.samples,
                                              seed=args.seed, family=args.family)

    config = _solver_config()
    energy = validation.energy_report(feeder, moments, horizon=horizon,
                                      epsilon=epsilon, config=config)
    base = energy.base_kwh
    print(f"{'case':<16}{'energy_kwh':>14}{'saving_%':>10}  status")
    print(f"{'base':<16}{base:>14.3f}{0.0:>10.2f}  -")
    for name, me in energy.modes.items():
        e = "-" if me.energy_kwh is None else f"{me.energy_kwh:.3f}"
        r = "-" if me.reduction_pct is None else f"{me.reduction_pct:.2f}"
        print(f"{name:<16}{e:>14}{r:>10}  {me.status}")

    worst = report.worst
    if worst is not None:
        print(f"worst violation: {worst.rate:.4f} "
              f"(95% upper {worst.ci95_upper:.4f}) at bus {worst.bus} "
              f"phase {worst.phase} hour {worst.hour} [{worst.side}]")

    out_path = args.out or os.path.join(cfg["_dir"], "report.json")
    validation.save_report(report, energy, {"monte_carlo": args.seed}, out_path)
    print(f"report -> {out_path}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cvr-dispatch",
        description="Voltage-reduction reactive dispatch under uncertainty")
    sub = parser.add_subparsers(dest="command", required=True)

    p_feeder = sub.add_parser("feeder", help="feeder file utilities")
    feeder_sub = p_feeder.add_subparsers(dest="feeder_command", required=True)
    p_val = feeder_sub.add_parser("validate", help="check a feeder file")
    p_val.add_argument("feeder")
    p_val.set_defaults(func=cmd_feeder_validate)

    p_enrich = sub.add_parser("enrich", help="enrich measurements into moments")
    p_enrich.add_argument("--config", required=True)
    p_enrich.add_argument("--out", help="output directory (default: config dir)")
    p_enrich.add_argument("--bins", type=int)
    p_enrich.add_argument("--samples-per-hour", type=int, dest="samples_per_hour")
    p_enrich.add_argument("--seed", type=int)
    p_enrich.add_argument("--weights", choices=("inverse", "literal"))
    p_enrich.add_argument("--write-enriched", action="store_true")
    p_enrich.set_defaults(func=cmd_enrich)

    p_solve = sub.add_parser("solve", help="solve the dispatch problem")
    p_solve.add_argument("--config", required=True)
    p_solve.add_argument("--mode", required=True, choices=("det", "ro", "drcc"))
    p_solve.add_argument("--epsilon", type=float)
    p_solve.add_argument("--horizon", type=int)
    p_solve.add_argument("--vmin", type=float)
    p_solve.add_argument("--vmax", type=float)
    p_solve.add_argument("--out")
    p_solve.set_defaults(func=cmd_solve)

    p_check = sub.add_parser("validate", help="Monte-Carlo check of a dispatch")
    p_check.add_argument("--config", required=True)
    p_check.add_argument("--dispatch")
    p_check.add_argument("--samples", type=int, default=10000)
    p_check.add_argument("--seed", type=int, default=0)
    p_check.add_argument("--family", choices=("gaussian", "two_point"),
                         default="gaussian")
    p_check.add_argument("--out")
    p_check.set_defaults(func=cmd_validate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
