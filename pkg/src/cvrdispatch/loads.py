"""Voltage-dependent ZIP load models and PV inverter capability curves.

Conventions: voltages enter as squared magnitudes ``v = |V|^2`` in per-unit
squared, powers are per-unit on the feeder power base.  A ZIP triple
``(k1, k2, k3)`` weights the constant-impedance, constant-current and
constant-power parts; a normalized triple sums to one so the multiplier is
the drawn power at nominal voltage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# CVR-type coefficients for a residential feeder mix; both triples sum to 1.
DEFAULT_ACTIVE_ZIP = (0.96, -1.17, 1.21)
DEFAULT_REACTIVE_ZIP = (6.28, -10.16, 4.88)

# |sum(k) - 1| allowed for a triple declared normalized.
_NORMALIZATION_TOL = 0.05


class InfeasibleOperatingPointError(ValueError):
    """Requested operating point violates a device capability limit."""


def _as_float_or_array(x):
    arr = np.asarray(x, dtype=float)
    return arr if arr.ndim else float(arr)


def zip_power_exact(v, multiplier, coeffs):
    """Power drawn by a ZIP load at squared voltage ``v``.

    ``multiplier * (k1 * v + k2 * sqrt(v) + k3)``.  Accepts scalars or
    arrays (broadcast together); ``v`` must be strictly positive.
    """
    v = np.asarray(v, dtype=float)
    if np.any(v <= 0.0):
        raise ValueError("squared voltage magnitude must be strictly positive")
    k1, k2, k3 = coeffs
    out = np.asarray(multiplier, dtype=float) * (k1 * v + k2 * np.sqrt(v) + k3)
    return _as_float_or_array(out)


def zip_slope(coeffs):
    """Coefficient of ``v`` in the linearized ZIP law: ``k1 + k2 / 2``."""
    k1, k2, _ = coeffs
    return k1 + 0.5 * k2


def zip_offset(coeffs):
    """Constant term of the linearized ZIP law: ``k3 + k2 / 2``."""
    _, k2, k3 = coeffs
    return k3 + 0.5 * k2


def zip_power_linearized(v, multiplier, coeffs):
    """First-order ZIP law, affine in the squared voltage.

    Linearizing ``sqrt(v)`` around ``v = 1`` gives
    ``multiplier * ((k1 + k2/2) v + (k3 + k2/2))``; exact at ``v = 1``.
    """
    v = np.asarray(v, dtype=float)
    out = np.asarray(multiplier, dtype=float) * (zip_slope(coeffs) * v + zip_offset(coeffs))
    return _as_float_or_array(out)


def pv_reactive_capability(s_cap, p_g, tol=1e-12):
    """Reactive headroom ``sqrt(s_cap^2 - p_g^2)`` of an inverter.

    ``p_g`` outside ``[0, s_cap]`` (beyond ``tol``) raises
    :class:`InfeasibleOperatingPointError`.
    """
    s_cap = np.asarray(s_cap, dtype=float)
    p_g = np.asarray(p_g, dtype=float)
    if np.any(p_g < -tol) or np.any(p_g > s_cap + tol):
        raise InfeasibleOperatingPointError(
            "active generation must lie within [0, s_cap]"
        )
    p_c = np.clip(p_g, 0.0, s_cap)
    return _as_float_or_array(np.sqrt(np.maximum(s_cap * s_cap - p_c * p_c, 0.0)))


def pv_reactive_output(alpha_q, q_cap):
    """Reactive output for utilization ``alpha_q`` in [-1, 1] of headroom ``q_cap``."""
    alpha_q = np.asarray(alpha_q, dtype=float)
    if np.any(np.abs(alpha_q) > 1.0 + 1e-12):
        raise ValueError("reactive utilization must lie in [-1, 1]")
    return _as_float_or_array(alpha_q * np.asarray(q_cap, dtype=float))


@dataclass(frozen=True)
class ZipCoefficients:
    """Active and reactive ZIP triples attached to a bus.

    When ``normalized`` each triple must sum to 1 within a small tolerance,
    so the load multiplier equals drawn power at nominal voltage.
    """

    kp: tuple = DEFAULT_ACTIVE_ZIP
    kq: tuple = DEFAULT_REACTIVE_ZIP
    normalized: bool = True

    def __post_init__(self):
        for name, triple in (("kp", self.kp), ("kq", self.kq)):
            if len(triple) != 3:
                raise ValueError(f"{name} must be a (k1, k2, k3) triple")
            if self.normalized and abs(sum(triple) - 1.0) > _NORMALIZATION_TOL:
                raise ValueError(
                    f"{name} declared normalized but sums to {sum(triple):.4f}"
                )


@dataclass(frozen=True)
class PvInverter:
    """Per-phase inverter apparent-power capacity (per-unit) and placement phases."""

    s_cap: float
    phases: tuple = ("a", "b", "c")

    def __post_init__(self):
        if self.s_cap < 0.0:
            raise ValueError("apparent-power capacity must be nonnegative")
        if not self.phases:
            raise ValueError("inverter must be placed on at least one phase")


@dataclass
class LoadMultipliers:
    """Per bus/phase/time active and reactive load multipliers.

    ``p_l`` and ``q_l`` have shape ``(n_entries, n_times)`` aligned with
    ``entries``; values are regularized to the unit interval on
    construction.
    """

    entries: tuple
    p_l: np.ndarray
    q_l: np.ndarray

    def __post_init__(self):
        self.p_l = np.clip(np.atleast_2d(np.asarray(self.p_l, dtype=float)), 0.0, 1.0)
        self.q_l = np.clip(np.atleast_2d(np.asarray(self.q_l, dtype=float)), 0.0, 1.0)
        if self.p_l.shape != self.q_l.shape:
            raise ValueError("active and reactive multiplier arrays must match in shape")
        if self.p_l.shape[0] != len(self.entries):
            raise ValueError("multiplier rows must match the entry labels")

    @property
    def n_times(self):
        return self.p_l.shape[1]
