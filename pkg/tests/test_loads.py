"""Voltage-dependent load law and inverter capability."""

import numpy as np
import pytest

from cvrdispatch.loads import (
    DEFAULT_ACTIVE_ZIP,
    DEFAULT_REACTIVE_ZIP,
    InfeasibleOperatingPointError,
    LoadMultipliers,
    PvInverter,
    ZipCoefficients,
    pv_reactive_capability,
    pv_reactive_output,
    zip_offset,
    zip_power_exact,
    zip_power_linearized,
    zip_slope,
)


def test_default_coefficients_sum_to_one():
    assert abs(sum(DEFAULT_ACTIVE_ZIP) - 1.0) < 1e-12
    assert abs(sum(DEFAULT_REACTIVE_ZIP) - 1.0) < 1e-12


def test_exact_power_at_nominal_voltage_is_multiplier():
    for coeffs in (DEFAULT_ACTIVE_ZIP, DEFAULT_REACTIVE_ZIP, (0.3, 0.3, 0.4)):
        assert zip_power_exact(1.0, 0.7, coeffs) == pytest.approx(0.7, abs=1e-15)


def test_exact_power_zero_multiplier():
    assert zip_power_exact(1.21, 0.0, DEFAULT_ACTIVE_ZIP) == 0.0


def test_exact_reactive_power_above_nominal():
    # direct arithmetic with the squared-voltage law at v = 1.05^2
    v = 1.1025
    want = 6.28 * v - 10.16 * np.sqrt(v) + 4.88
    got = zip_power_exact(v, 1.0, DEFAULT_REACTIVE_ZIP)
    assert got == pytest.approx(want, abs=1e-12)
    assert got == pytest.approx(6.28 * 1.1025 - 10.16 * 1.05 + 4.88, abs=1e-12)


def test_exact_power_rejects_nonpositive_voltage():
    with pytest.raises(ValueError):
        zip_power_exact(0.0, 1.0, DEFAULT_ACTIVE_ZIP)
    with pytest.raises(ValueError):
        zip_power_exact(np.array([1.0, -0.2]), 1.0, DEFAULT_ACTIVE_ZIP)


def test_exact_power_vectorized_matches_scalar():
    v = np.array([0.92, 1.0, 1.08])
    got = zip_power_exact(v, 0.5, DEFAULT_REACTIVE_ZIP)
    want = [zip_power_exact(float(vi), 0.5, DEFAULT_REACTIVE_ZIP) for vi in v]
    assert np.allclose(got, want, atol=1e-15)


def test_slope_offset_split_the_coefficients():
    k1, k2, k3 = 0.25, 0.25, 0.5
    assert zip_slope((k1, k2, k3)) == pytest.approx(0.375, abs=1e-15)
    assert zip_offset((k1, k2, k3)) == pytest.approx(0.625, abs=1e-15)
    # slope + offset reproduces the full coefficient mass
    for coeffs in (DEFAULT_ACTIVE_ZIP, DEFAULT_REACTIVE_ZIP):
        assert zip_slope(coeffs) + zip_offset(coeffs) == pytest.approx(sum(coeffs), abs=1e-12)


def test_linearized_equals_exact_at_nominal_voltage():
    rng = np.random.default_rng(11)
    for _ in range(20):
        coeffs = tuple(rng.normal(size=3))
        assert (zip_power_linearized(1.0, 1.0, coeffs)
                == pytest.approx(zip_power_exact(1.0, 1.0, coeffs), abs=1e-14))


def test_linearized_is_affine_in_squared_voltage():
    coeffs = DEFAULT_REACTIVE_ZIP
    v1, v2, lam = 0.93, 1.09, 0.37
    mix = lam * zip_power_linearized(v1, 1.0, coeffs) + (1 - lam) * zip_power_linearized(v2, 1.0, coeffs)
    assert zip_power_linearized(lam * v1 + (1 - lam) * v2, 1.0, coeffs) == pytest.approx(mix, abs=1e-14)


def test_linearized_exact_when_square_root_term_absent():
    coeffs = (0.6, 0.0, 0.4)
    v = np.linspace(0.9, 1.1, 41)
    assert np.allclose(zip_power_linearized(v, 0.8, coeffs),
                       zip_power_exact(v, 0.8, coeffs), atol=1e-14)


def test_linearization_error_closed_form():
    """With v = (1 + dv)^2 the tangent-at-nominal error is exactly
    -(k2/2) dv^2 for any coefficients."""
    rng = np.random.default_rng(5)
    dv = np.linspace(-0.05, 0.05, 101)
    v = (1.0 + dv) ** 2
    for coeffs in (DEFAULT_ACTIVE_ZIP, DEFAULT_REACTIVE_ZIP,
                   tuple(rng.normal(size=3)), tuple(rng.normal(size=3))):
        err = zip_power_exact(v, 1.0, coeffs) - zip_power_linearized(v, 1.0, coeffs)
        assert np.allclose(err, -0.5 * coeffs[1] * dv ** 2, atol=1e-14)


def test_linearization_error_bound_five_percent():
    dv = 0.05
    v = (1.0 + dv) ** 2
    for coeffs in (DEFAULT_ACTIVE_ZIP, DEFAULT_REACTIVE_ZIP):
        err = abs(zip_power_exact(v, 1.0, coeffs) - zip_power_linearized(v, 1.0, coeffs))
        assert err <= abs(coeffs[1]) * dv ** 2 / 2 * (1 + 1e-12)


def test_capability_known_triples():
    assert pv_reactive_capability(1.0, 0.6) == pytest.approx(0.8, abs=1e-12)
    assert pv_reactive_capability(1.0, 0.0) == pytest.approx(1.0, abs=1e-15)
    assert pv_reactive_capability(0.5, 0.5) == pytest.approx(0.0, abs=1e-9)


def test_capability_identity_random():
    rng = np.random.default_rng(2)
    s = rng.uniform(0.1, 2.0, 50)
    p = s * rng.uniform(0.0, 1.0, 50)
    q = pv_reactive_capability(s, p)
    assert np.allclose(q ** 2 + p ** 2, s ** 2, atol=1e-12)


def test_capability_rejects_overload_and_negative_generation():
    with pytest.raises(InfeasibleOperatingPointError):
        pv_reactive_capability(1.0, 1.0001)
    with pytest.raises(InfeasibleOperatingPointError):
        pv_reactive_capability(1.0, -0.1)


def test_reactive_output_scaling_and_sign():
    cap = pv_reactive_capability(1.0, 0.6)
    assert pv_reactive_output(0.0, cap) == 0.0
    assert pv_reactive_output(-1.0, 0.8) == pytest.approx(-0.8, abs=1e-15)
    assert pv_reactive_output(0.5, cap) == pytest.approx(0.4, abs=1e-12)


def test_reactive_output_rejects_out_of_range_fraction():
    with pytest.raises(ValueError):
        pv_reactive_output(1.2, 0.5)
    with pytest.raises(ValueError):
        pv_reactive_output(-1.0001, 0.5)


def test_zip_coefficients_normalization_guard():
    ZipCoefficients()  # defaults are consistent
    ZipCoefficients(kp=(0.3, 0.3, 0.4))
    with pytest.raises(ValueError):
        ZipCoefficients(kp=(0.5, 0.5, 0.5))
    # opting out of the check admits arbitrary triples
    ZipCoefficients(kp=(0.5, 0.5, 0.5), normalized=False)


def test_pv_inverter_validation():
    inv = PvInverter(0.4, ("a", "c"))
    assert inv.s_cap == 0.4
    with pytest.raises(ValueError):
        PvInverter(-0.1, ("a",))
    with pytest.raises(ValueError):
        PvInverter(0.4, ())


def test_load_multipliers_clip_to_unit_interval():
    entries = (("b1", "a"), ("b2", "a"), ("b3", "a"))
    m = LoadMultipliers(entries, np.array([[-0.2], [0.5], [1.7]]),
                        np.array([[0.0], [1.0], [0.3]]))
    assert np.all(m.p_l >= 0.0) and np.all(m.p_l <= 1.0)
    assert m.p_l[1, 0] == 0.5
    assert m.n_times == 1
    with pytest.raises(ValueError):
        LoadMultipliers(entries, np.zeros((2, 4)), np.zeros((2, 4)))
