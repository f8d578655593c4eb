"""Measurement enrichment: bound models, bin dynamics, weights, moments, I/O."""

import numpy as np
import pytest

from cvrdispatch.dispatch import MomentCoverageError, ParameterError
from cvrdispatch.enrichment import (
    DataError,
    DegenerateBoundsError,
    DegenerateInputError,
    HighResSeries,
    HourlySeries,
    MomentAmbiguitySet,
    TransitionModel,
    _SqExpGpr,
    blend_teachers,
    compute_learning_weights,
    daily_patterns,
    enrich_hour,
    enrich_series,
    estimate_moments,
    fit_bound_models,
    fit_transition_model,
    hourly_from_highres,
    load_highres_csv,
    load_hourly_csv,
    load_moments,
    save_moments,
    write_highres_csv,
)


def _teacher_series(tid="t0", n_hours=48, m=60, seed=0, rel_band=0.2):
    """Synthetic teacher: smooth daily mean plus uniform within-hour spread."""
    rng = np.random.default_rng(seed)
    hours = np.arange(n_hours)
    means = 0.6 + 0.3 * np.sin(2.0 * np.pi * (hours % 24) / 24.0)
    spread = rel_band * means
    vals = means[:, None] + spread[:, None] * rng.uniform(-1.0, 1.0, (n_hours, m))
    return HighResSeries(tid, hours, vals)


# ---------------------------------------------------------------------------
# containers


def test_series_validation():
    with pytest.raises(DataError):
        HourlySeries("t", [0, 1, 1], [0.1, 0.2, 0.3])
    with pytest.raises(DataError):
        HourlySeries("t", [0, 1], [0.1, np.nan])
    with pytest.raises(DataError):
        HighResSeries("t", [0, 1], np.zeros(5))
    with pytest.raises(DataError):
        HighResSeries("t", [1, 0], np.zeros((2, 4)))


def test_hourly_from_highres_takes_row_means():
    s = HighResSeries("t", [0, 1], np.array([[1.0, 3.0], [2.0, 4.0]]))
    h = hourly_from_highres(s)
    assert np.allclose(h.values, [2.0, 3.0], atol=1e-15)
    assert np.array_equal(h.hours, [0, 1])


def test_daily_patterns_stack_and_drop_partial_day():
    h = HourlySeries("t", np.arange(30), np.arange(30.0))
    pat = daily_patterns(h)
    assert pat.shape == (1, 24)
    assert np.allclose(pat[0], np.arange(24.0))


def test_daily_patterns_require_contiguous_hours():
    h = HourlySeries("t", np.concatenate([np.arange(10), [12]]), np.zeros(11))
    with pytest.raises(DataError):
        daily_patterns(h)
    with pytest.raises(DataError):
        daily_patterns(HourlySeries("t", np.arange(10), np.zeros(10)))


# ---------------------------------------------------------------------------
# bound models


def test_gpr_interpolates_as_noise_vanishes():
    x = np.linspace(0.0, 1.0, 10)
    y = np.sin(2.0 * np.pi * x)
    gpr = _SqExpGpr(x, y, length_scale=0.3, signal_var=1.0, noise_var=1e-10)
    assert np.max(np.abs(gpr.predict(x) - y)) < 1e-6


def test_gpr_likelihood_prefers_matching_noise():
    rng = np.random.default_rng(4)
    x = np.linspace(0.0, 1.0, 40)
    y = np.sin(2.0 * np.pi * x) + 1e-3 * rng.normal(size=40)
    noisy = _SqExpGpr(x, y, 0.3, 1.0, 1e-2)
    matched = _SqExpGpr(x, y, 0.3, 1.0, 1e-6)
    assert matched.log_marginal_likelihood() > noisy.log_marginal_likelihood()


def test_bound_model_learns_linear_extremes():
    """Extremes exactly 0.8x / 1.2x the hourly mean are recovered within
    2% at a held-out mean level."""
    hours = np.arange(48)
    rng = np.random.default_rng(1)
    means = rng.uniform(0.4, 1.0, 48)
    vals = np.stack([0.8 * means, means, 1.2 * means], axis=1)
    model = fit_bound_models(HighResSeries("t", hours, vals))
    q = 0.77
    lo, hi = model.predict_bounds(np.array([q]))
    assert hi[0] == pytest.approx(1.2 * q, rel=0.02)
    assert lo[0] == pytest.approx(0.8 * q, rel=0.02)


def test_bound_model_orders_band_edges():
    model = fit_bound_models(_teacher_series())
    qs = np.linspace(0.25, 0.95, 15)
    lo, hi = model.predict_bounds(qs)
    assert np.all(lo <= hi + 1e-12)


def test_bound_model_requires_full_day():
    short = _teacher_series(n_hours=12)
    with pytest.raises(DataError):
        fit_bound_models(short)


def test_bound_model_rejects_constant_hourly_means():
    vals = np.full((48, 30), 0.5)
    vals += np.linspace(-0.01, 0.01, 30)[None, :]  # spread but identical means
    with pytest.raises(DegenerateInputError):
        fit_bound_models(HighResSeries("t", np.arange(48), vals))


def test_bound_model_on_within_hour_constant_data_tracks_mean():
    means = np.linspace(0.4, 1.0, 48)
    vals = np.repeat(means[:, None], 5, axis=1)  # no within-hour spread
    model = fit_bound_models(HighResSeries("t", np.arange(48), vals))
    lo, hi = model.predict_bounds(np.array([0.7]))
    assert lo[0] == pytest.approx(0.7, abs=1e-3)
    assert hi[0] == pytest.approx(0.7, abs=1e-3)


# ---------------------------------------------------------------------------
# transition models


def test_transition_alternating_levels_concentrate_rows():
    n_bins = 20
    row = np.tile([0.0, 1.0], 50)
    series = HighResSeries("t", [0, 1], np.stack([row, row]))
    tm = fit_transition_model(series, n_bins)
    # after (low, high) the walk returns to low, and symmetrically
    assert tm.probs[0, n_bins - 1, 0] > 0.99
    assert tm.probs[n_bins - 1, 0, n_bins - 1] > 0.99


def test_transition_constant_hour_occupies_single_bin():
    series = HighResSeries("t", [0], np.full((1, 100), 0.42))
    tm = fit_transition_model(series, 20)
    assert tm.probs[0, 0, 0] > 0.999
    # unseen contexts fall back to the uniform smoothed row
    assert np.allclose(tm.probs[5, 7], 1.0 / 20.0, atol=1e-12)


def test_transition_rows_normalize_on_random_data():
    rng = np.random.default_rng(3)
    series = HighResSeries("t", np.arange(6), rng.uniform(0, 1, (6, 120)))
    tm = fit_transition_model(series, 12)
    assert np.allclose(tm.probs.sum(axis=2), 1.0, atol=1e-9)
    assert tm.probs.min() > 0.0


def test_transition_parameter_validation():
    series = _teacher_series(m=2)
    with pytest.raises(DataError):
        fit_transition_model(series)  # 2 samples per hour < 3
    with pytest.raises(ParameterError):
        fit_transition_model(_teacher_series(), n_bins=1)
    with pytest.raises(ParameterError):
        TransitionModel(4, np.zeros((4, 4, 3)))


# ---------------------------------------------------------------------------
# weights and blending


def test_weights_inverse_distance_values():
    # teachers at pattern distance 1 and 3 from the student
    student = [np.zeros(24)]
    t_near = [np.zeros(24) + 1.0 / np.sqrt(24.0)]
    t_far = [np.zeros(24) + 3.0 / np.sqrt(24.0)]
    lw = compute_learning_weights(student, [t_near, t_far])
    assert np.allclose(lw.distances, [1.0, 3.0], atol=1e-12)
    assert np.allclose(lw.weights, [0.75, 0.25], atol=1e-5)
    assert lw.weights.sum() == pytest.approx(1.0, abs=1e-12)


def test_weights_literal_mode_prefers_distant_teachers():
    student = [np.zeros(24)]
    t_near = [np.zeros(24) + 1.0 / np.sqrt(24.0)]
    t_far = [np.zeros(24) + 3.0 / np.sqrt(24.0)]
    lw = compute_learning_weights(student, [t_near, t_far], mode="literal")
    assert np.allclose(lw.weights, [0.25, 0.75], atol=1e-12)


def test_weights_identical_teacher_dominates():
    rng = np.random.default_rng(6)
    student = rng.uniform(0, 1, (1, 24))
    twin = student.copy()
    other = student + 0.5
    lw = compute_learning_weights(student, [twin, other])
    assert lw.distances[0] == pytest.approx(0.0, abs=1e-12)
    assert lw.weights[0] > 0.999


def test_weights_equal_distances_split_evenly():
    student = [np.zeros(4)]
    t = [np.ones(4)]
    for mode in ("inverse", "literal"):
        lw = compute_learning_weights(student, [t, t], mode=mode)
        assert np.allclose(lw.weights, [0.5, 0.5], atol=1e-12)


def test_weights_validation():
    with pytest.raises(ParameterError):
        compute_learning_weights([np.zeros(4)], [])
    with pytest.raises(ParameterError):
        compute_learning_weights([np.zeros(4)], [[np.zeros(5)]])
    with pytest.raises(ParameterError):
        compute_learning_weights([np.zeros(4)], [[np.zeros(4)]], mode="softmax")


def test_blend_reduces_to_single_teacher_at_unit_weight():
    t0 = _teacher_series("t0", seed=0)
    t1 = _teacher_series("t1", seed=1, rel_band=0.4)
    bms = [fit_bound_models(s) for s in (t0, t1)]
    tms = [fit_transition_model(s) for s in (t0, t1)]
    bb, bt = blend_teachers(np.array([1.0, 0.0]), bms, tms)
    assert np.allclose(bt.probs, tms[0].probs, atol=1e-12)
    q = np.array([0.6])
    assert np.allclose(bb.predict_bounds(q), bms[0].predict_bounds(q), atol=1e-12)


def test_blend_interpolates_bounds():
    t0 = _teacher_series("t0", seed=0, rel_band=0.1)
    t1 = _teacher_series("t1", seed=1, rel_band=0.4)
    bms = [fit_bound_models(s) for s in (t0, t1)]
    tms = [fit_transition_model(s) for s in (t0, t1)]
    w = np.array([0.3, 0.7])
    bb, bt = blend_teachers(w, bms, tms)
    q = np.array([0.6])
    los = [m.predict_bounds(q)[0][0] for m in bms]
    his = [m.predict_bounds(q)[1][0] for m in bms]
    lo, hi = bb.predict_bounds(q)
    assert lo[0] == pytest.approx(w @ los, abs=1e-12)
    assert hi[0] == pytest.approx(w @ his, abs=1e-12)
    assert np.allclose(bt.probs.sum(axis=2), 1.0, atol=1e-9)


def test_blend_validation():
    t0 = _teacher_series("t0")
    bm, tm = fit_bound_models(t0), fit_transition_model(t0)
    with pytest.raises(ParameterError):
        blend_teachers(np.array([0.5, 0.5]), [bm], [tm])
    tm8 = fit_transition_model(t0, n_bins=8)
    with pytest.raises(ParameterError):
        blend_teachers(np.array([0.5, 0.5]), [bm, bm], [tm, tm8])


# ---------------------------------------------------------------------------
# synthesis


class _FixedBounds:
    def __init__(self, lo, hi):
        self.lo, self.hi = lo, hi

    def predict_bounds(self, p_a):
        p_a = np.atleast_1d(p_a)
        return np.full_like(p_a, self.lo), np.full_like(p_a, self.hi)


def _uniform_transitions(n_bins=20):
    return TransitionModel(n_bins, np.full((n_bins,) * 3, 1.0 / n_bins))


def test_enrich_hour_contract():
    teacher = _teacher_series(seed=2)
    bounds = fit_bound_models(teacher)
    transitions = fit_transition_model(teacher)
    rng = np.random.default_rng(5)
    for p_a in (0.35, 0.6, 0.88):
        out = enrich_hour(p_a, bounds, transitions, n_samples=3600, rng=rng)
        assert out.values.shape == (3600,)
        assert out.values.mean() == pytest.approx(p_a, abs=1e-9)
        assert out.values.min() >= out.lower - 1e-9
        assert out.values.max() <= out.upper + 1e-9
        assert out.lower <= p_a <= out.upper


def test_enrich_hour_band_extends_to_cover_anchor():
    out = enrich_hour(0.9, _FixedBounds(0.2, 0.5), _uniform_transitions(),
                      n_samples=500, rng=np.random.default_rng(0))
    assert out.upper == pytest.approx(0.9, abs=1e-12)
    assert out.values.max() <= 0.9 + 1e-9
    assert out.values.mean() == pytest.approx(0.9, abs=1e-9)


def test_enrich_hour_zero_width_band_is_constant():
    out = enrich_hour(0.4, _FixedBounds(0.4, 0.4), _uniform_transitions(),
                      n_samples=100, rng=np.random.default_rng(0))
    assert np.allclose(out.values, 0.4, atol=1e-15)


def test_enrich_hour_rejects_bad_band_and_counts():
    with pytest.raises(DegenerateBoundsError):
        enrich_hour(0.4, _FixedBounds(np.nan, 1.0), _uniform_transitions(),
                    n_samples=10, rng=np.random.default_rng(0))
    with pytest.raises(ParameterError):
        enrich_hour(0.4, _FixedBounds(0.0, 1.0), _uniform_transitions(), n_samples=0)


def test_enrich_series_is_deterministic_per_seed():
    teacher = _teacher_series(seed=7)
    bounds = fit_bound_models(teacher)
    transitions = fit_transition_model(teacher)
    hourly = HourlySeries("s1", np.arange(5), np.linspace(0.4, 0.8, 5))
    a = enrich_series(hourly, bounds, transitions, n_samples=200, master_seed=3)
    b = enrich_series(hourly, bounds, transitions, n_samples=200, master_seed=3)
    c = enrich_series(hourly, bounds, transitions, n_samples=200, master_seed=4)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)
    # stream is tied to the transformer id, not call order
    other = enrich_series(HourlySeries("s2", hourly.hours, hourly.values),
                          bounds, transitions, n_samples=200, master_seed=3)
    assert not np.array_equal(a.values, other.values)


def test_enriched_variance_tracks_teacher_within_hour_variance():
    """Self-enrichment: feeding a teacher's own hourly means back through
    its models reproduces each hour's variance to within 25% on average."""
    teacher = _teacher_series(seed=9, m=120)
    bounds = fit_bound_models(teacher)
    transitions = fit_transition_model(teacher)
    hourly = hourly_from_highres(teacher)
    out = enrich_series(hourly, bounds, transitions, n_samples=3600, master_seed=1)
    true_var = teacher.values.var(axis=1)
    synth_var = out.values.var(axis=1)
    ratio = synth_var / true_var
    assert 0.75 <= np.mean(ratio) <= 1.25


# ---------------------------------------------------------------------------
# moments


def test_moment_estimates_are_maximum_likelihood():
    m = estimate_moments({("p_L", "b1", "a", 0): np.array([1.0, 2.0, 3.0])})
    mu, var = m.get("p_L", "b1", "a", 0)
    assert mu == pytest.approx(2.0, abs=1e-15)
    assert var == pytest.approx(2.0 / 3.0, abs=1e-12)


def test_moment_estimates_constant_samples():
    m = estimate_moments({("q_L", "b1", "a", 3): np.full(10, 0.3)})
    mu, var = m.get("q_L", "b1", "a", 3)
    assert mu == pytest.approx(0.3, abs=1e-15)
    assert var == pytest.approx(0.0, abs=1e-30)


def test_moment_estimates_recover_gaussian_parameters():
    rng = np.random.default_rng(0)
    m = estimate_moments({("p_L", "b1", "a", 0): rng.normal(0.5, 0.1, 10000)})
    mu, var = m.get("p_L", "b1", "a", 0)
    assert abs(mu - 0.5) <= 0.003
    assert abs(np.sqrt(var) - 0.1) <= 0.005


def test_moment_estimates_validation():
    with pytest.raises(DataError):
        estimate_moments({("p_L", "b1", "a", 0): np.array([1.0])})
    with pytest.raises(DataError):
        estimate_moments({("p_L", "b1", "a", 0): np.array([1.0, np.inf])})


def test_headroom_moments_derived_from_active_power():
    rng = np.random.default_rng(2)
    s_cap = 0.5
    p = rng.uniform(0.0, 0.6, 500)  # occasionally above cap, must be clipped
    m = estimate_moments({("p_g", "b4", "a", 12): p}, pv_caps={("b4", "a"): s_cap})
    head = np.sqrt(s_cap ** 2 - np.clip(p, 0.0, s_cap) ** 2)
    mu, var = m.get("Q_cap", "b4", "a", 12)
    assert mu == pytest.approx(head.mean(), abs=1e-12)
    assert var == pytest.approx(head.var(), abs=1e-12)


def test_group_covariance_appears_in_hour_slice():
    rng = np.random.default_rng(8)
    z = rng.normal(size=300)
    a = 0.5 + 0.1 * z
    b = 0.4 + 0.08 * z + 0.01 * rng.normal(size=300)
    keys = [("p_L", "b1", "a", 0), ("p_L", "b2", "a", 0)]
    m = estimate_moments(dict(zip(keys, (a, b))), groups=[keys])
    entries = (("p_L", "b1", "a"), ("p_L", "b2", "a"))
    mu, cov = m.slice_hour(0, entries)
    assert cov[0, 1] == pytest.approx(np.cov(a, b, bias=True)[0, 1], abs=1e-12)
    assert np.linalg.eigvalsh(cov).min() >= -1e-12
    with pytest.raises(MomentCoverageError):
        m.slice_hour(0, entries + (("q_L", "b1", "a"),))


def test_group_validation():
    with pytest.raises(MomentCoverageError):
        estimate_moments({("p_L", "b1", "a", 0): np.ones(3) + np.arange(3)},
                         groups=[[("p_L", "b1", "a", 0), ("p_L", "zzz", "a", 0)]])
    with pytest.raises(DataError):
        estimate_moments({("p_L", "b1", "a", 0): np.arange(3.0),
                          ("p_L", "b2", "a", 0): np.arange(4.0)},
                         groups=[[("p_L", "b1", "a", 0), ("p_L", "b2", "a", 0)]])


def test_moments_file_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    keys = [("p_L", "b1", "a", 0), ("q_L", "b1", "a", 0)]
    m = estimate_moments({k: rng.uniform(0, 1, 50) for k in keys}, groups=[keys])
    path = tmp_path / "moments.json"
    save_moments(m, path)
    again = load_moments(path)
    assert again.to_dict() == m.to_dict()
    assert again.hours() == [0]


# ---------------------------------------------------------------------------
# measurement files


def test_highres_csv_round_trip(tmp_path):
    teacher = _teacher_series(m=6, n_hours=24)
    q = HighResSeries(teacher.transformer_id, teacher.hours, 0.35 * teacher.values)
    path = tmp_path / "pmu.csv"
    write_highres_csv(path, teacher, q, base_power_kva=100.0)
    loaded = load_highres_csv(path, base_power_kva=100.0)
    p_back, q_back = loaded["t0"]
    assert np.array_equal(p_back.hours, teacher.hours)
    assert np.allclose(p_back.values, teacher.values, atol=1e-9)
    assert np.allclose(q_back.values, q.values, atol=1e-9)


def test_highres_csv_rejects_uneven_hours(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text(
        "timestamp,transformer_id,p_kw,q_kvar\n"
        "2024-01-01 00:00,t,1.0,0.3\n"
        "2024-01-01 00:30,t,1.1,0.3\n"
        "2024-01-01 01:00,t,1.2,0.3\n")
    with pytest.raises(DataError) as err:
        load_highres_csv(path, 100.0)
    assert "uneven samples" in str(err.value)


def test_csv_rejects_missing_column_and_bad_number(tmp_path):
    p1 = tmp_path / "m1.csv"
    p1.write_text("timestamp,transformer_id,p_kw\n2024-01-01,t,1.0\n")
    with pytest.raises(DataError) as err:
        load_highres_csv(p1, 100.0)
    assert "q_kvar" in str(err.value)

    p2 = tmp_path / "m2.csv"
    p2.write_text("timestamp,transformer_id,p_kw,q_kvar\n"
                  "2024-01-01 00:00,t,1.0,0.2\n"
                  "2024-01-01 01:00,t,oops,0.2\n")
    with pytest.raises(DataError) as err:
        load_hourly_csv(p2, 100.0)
    assert "line 3" in str(err.value)


def test_hourly_csv_rejects_duplicate_hours(tmp_path):
    path = tmp_path / "sm.csv"
    path.write_text("timestamp,transformer_id,p_kw,q_kvar\n"
                    "2024-01-01 00:00,t,1.0,0.2\n"
                    "2024-01-01 00:30,t,1.1,0.2\n")
    with pytest.raises(DataError) as err:
        load_hourly_csv(path, 100.0)
    assert "duplicate" in str(err.value)


def test_hourly_csv_scales_by_power_base(tmp_path):
    path = tmp_path / "sm.csv"
    path.write_text("timestamp,transformer_id,p_kw,q_kvar\n"
                    "2024-01-01 00:00,t,50.0,20.0\n"
                    "2024-01-01 01:00,t,80.0,30.0\n")
    p, q = load_hourly_csv(path, 100.0)["t"]
    assert np.allclose(p.values, [0.5, 0.8], atol=1e-12)
    assert np.allclose(q.values, [0.2, 0.3], atol=1e-12)
