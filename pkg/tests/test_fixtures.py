"""Bundled study fixtures: feeders, moment tables, synthetic fleet data."""

import json

import numpy as np
import pytest

from cvrdispatch.dispatch import build_layout, build_problem
from cvrdispatch.enrichment import load_highres_csv, load_hourly_csv
from cvrdispatch.feeder import build_incidence, load_feeder, validate_radial
from cvrdispatch.fixtures import (
    LOAD_SHAPE,
    PV_SHAPE,
    Q_FRACTION,
    TEACHER_VOL_OFFSETS,
    THIRTEEN_BUS_WEIGHTS,
    THREE_BUS_WEIGHTS,
    TransformerSpec,
    build_moments,
    example_fleet,
    generate_highres,
    load_profile,
    study_fleet,
    thirteen_bus_feeder,
    thirteen_bus_moments,
    three_bus_feeder,
    three_bus_moments,
    write_example_dataset,
)


def test_profiles_are_daily_and_bounded():
    assert LOAD_SHAPE.shape == PV_SHAPE.shape == (24,)
    assert 0.0 < LOAD_SHAPE.min() and LOAD_SHAPE.max() == 1.0
    assert PV_SHAPE.min() == 0.0 and PV_SHAPE.max() == 1.0
    assert PV_SHAPE[0] == PV_SHAPE[23] == 0.0  # dark at the day edges
    assert np.argmax(LOAD_SHAPE) == 19  # evening peak
    assert np.argmax(PV_SHAPE) == 12


def test_weights_cover_every_load_entry():
    for feeder, weights in ((three_bus_feeder(), THREE_BUS_WEIGHTS),
                            (thirteen_bus_feeder(), THIRTEEN_BUS_WEIGHTS)):
        for bus, ph in build_incidence(feeder).col_labels:
            assert weights[bus][ph] > 0.0


def test_load_profile_scales_weights_by_shape():
    feeder = three_bus_feeder()
    p, q = load_profile(feeder, THREE_BUS_WEIGHTS, hour=19)
    assert p[0] == pytest.approx(0.35 * LOAD_SHAPE[19], abs=1e-15)
    assert p[1] == pytest.approx(0.45 * LOAD_SHAPE[19], abs=1e-15)
    assert np.allclose(q, Q_FRACTION * p, atol=1e-15)


def test_moment_tables_cover_dispatch_layout():
    feeder = thirteen_bus_feeder()
    layout = build_layout(feeder)
    moments = thirteen_bus_moments()
    for h in range(24):
        mu, cov = moments.slice_hour(h, layout.entries())
        assert mu.shape == (layout.n_xi,)
        assert np.all(np.diag(cov) >= 0.0)
    # a problem can be built directly for the full day
    build_problem(feeder, moments, "det", horizon=24)


def test_moment_table_headroom_consistent_with_capacity():
    feeder = thirteen_bus_feeder()
    moments = thirteen_bus_moments(hours=(12,))
    for bus, ph in build_layout(feeder).pv_entries:
        pg, _ = moments.get("p_g", bus, ph, 12)
        head, _ = moments.get("Q_cap", bus, ph, 12)
        s_cap = feeder.bus(bus).pv.s_cap
        assert head ** 2 + pg ** 2 == pytest.approx(s_cap ** 2, rel=1e-12)


def test_zero_relative_spread_gives_zero_variance():
    moments = three_bus_moments(hours=(12,), rel_load=0.0, rel_pv=0.0)
    for key in moments.keys():
        _, var = moments.get(*key)
        assert var == 0.0


def test_generate_highres_is_deterministic_and_shaped():
    spec = TransformerSpec("t0", "load", "b4", ("a",), base=0.4, volatility=0.2)
    p1, q1 = generate_highres(spec, n_days=2, samples_per_hour=30)
    p2, q2 = generate_highres(spec, n_days=2, samples_per_hour=30)
    assert np.array_equal(p1.values, p2.values)
    assert p1.values.shape == (48, 30)
    assert p1.values.min() >= 0.0
    assert np.allclose(q1.values, Q_FRACTION * p1.values, atol=1e-15)
    p3, _ = generate_highres(spec, n_days=2, samples_per_hour=30, master_seed=8)
    assert not np.array_equal(p1.values, p3.values)
    # hourly means track the daily shape (loose: there is day-level noise)
    hourly = p1.values.mean(axis=1).reshape(2, 24).mean(axis=0)
    corr = np.corrcoef(hourly, spec.base * LOAD_SHAPE)[0, 1]
    assert corr > 0.9


def test_generate_highres_pv_has_no_reactive_power():
    spec = TransformerSpec("g0", "pv", "b4", ("a",), base=0.3, volatility=0.1,
                           shape=PV_SHAPE)
    p, q = generate_highres(spec, n_days=1, samples_per_hour=20)
    assert not q.values.any()
    assert p.values[0].max() == 0.0  # dark hour


def test_study_fleet_volatility_design():
    teachers, students = study_fleet(n_teachers=8, n_students=12, student_vol=0.20)
    assert len(teachers) == 8 and len(students) == 12
    vols = np.array([t.volatility for t in teachers])
    # first half biased high, full set balanced around the student level
    assert vols[:4].mean() > 0.20 + 0.02
    assert vols.mean() == pytest.approx(0.20, abs=1e-12)
    assert abs(sum(TEACHER_VOL_OFFSETS)) < 1e-15
    ids = [t.transformer_id for t in teachers + students]
    assert len(set(ids)) == len(ids)


def test_example_fleet_partitions_load_entries():
    feeder = thirteen_bus_feeder()
    teachers, students = example_fleet(feeder)
    assert sum(t.kind == "load" for t in teachers) == 5
    assert sum(t.kind == "pv" for t in teachers) == 3
    covered = set()
    for spec in teachers:
        if spec.kind != "load":
            continue
        for ph in spec.phases:
            covered.add((spec.bus, ph))
    for spec in students:
        assert spec.kind == "load" and len(spec.phases) == 1
        key = (spec.bus, spec.phases[0])
        assert key not in covered
        covered.add(key)
    assert covered == set(build_incidence(feeder).col_labels)


def test_example_dataset_writes_complete_bundle(tmp_path):
    out = tmp_path / "demo"
    config_path = write_example_dataset(out, n_days=2, samples_per_hour=12)
    with open(config_path) as fh:
        cfg = json.load(fh)
    assert cfg["horizon"] == 24 and cfg["epsilon"] == 0.05
    feeder = load_feeder(out / "feeder.json")
    assert validate_radial(feeder).ok

    pmu = load_highres_csv(out / "pmu.csv", feeder.base_power_kva)
    sm = load_hourly_csv(out / "sm.csv", feeder.base_power_kva)
    assert len(pmu) == 8 and len(sm) > 0
    for tid, (p, _) in pmu.items():
        assert p.values.shape == (48, 12)
        assert tid in cfg["transformers"]
    for tid, (p, _) in sm.items():
        assert len(p.hours) == 48
        assert tid in cfg["transformers"]
    assert set(cfg["transformers"]) == set(pmu) | set(sm)


def test_example_dataset_is_reproducible(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    write_example_dataset(a, n_days=1, samples_per_hour=6)
    write_example_dataset(b, n_days=1, samples_per_hour=6)
    assert (a / "pmu.csv").read_bytes() == (b / "pmu.csv").read_bytes()
    assert (a / "sm.csv").read_bytes() == (b / "sm.csv").read_bytes()
