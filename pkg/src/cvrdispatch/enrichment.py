"""Statistical enrichment of mixed-resolution measurement data.

High-resolution meters ("teachers") see the fast within-hour behaviour of
their transformer; ordinary meters ("students") only report hourly means.
Teachers donate two learned objects:

* a pair of Gaussian-process regressions mapping an hourly mean to the
  expected within-hour max and min (the enrichment band), and
* a second-order Markov chain over min/max-normalized amplitude bins
  capturing the fast dynamics.

Students receive a convex blend of teacher models, weighted by daily-
pattern similarity, and synthesize within-hour samples anchored to each
observed hourly mean.  First and second moments extracted from the
synthesized samples feed the dispatch ambiguity set.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .dispatch import MomentCoverageError, P_LOAD, P_PV, ParameterError, Q_LOAD, QCAP_PV
from .loads import pv_reactive_capability

DEFAULT_BINS = 20
_LAPLACE = 1e-3       # transition-count smoothing
_WEIGHT_DELTA = 1e-6  # inverse-distance regularizer


class DataError(ValueError):
    """Measurement data violates a structural requirement."""


class DegenerateInputError(DataError):
    """Training data carries no usable variation."""


class DegenerateBoundsError(RuntimeError):
    """Predicted enrichment band is unusable (non-finite)."""


# ---------------------------------------------------------------------------
# Series containers


@dataclass
class HourlySeries:
    """Hourly-mean power of one transformer (per-unit).

    ``hours`` are absolute hour indices counted from local midnight of the
    first day, strictly increasing.
    """

    transformer_id: str
    hours: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.hours = np.asarray(self.hours, dtype=int)
        self.values = np.asarray(self.values, dtype=float)
        if self.hours.shape != self.values.shape or self.hours.ndim != 1:
            raise DataError(f"{self.transformer_id}: hours/values must be equal-length 1-D")
        if len(self.hours) > 1 and np.any(np.diff(self.hours) <= 0):
            raise DataError(f"{self.transformer_id}: hour indices must strictly increase")
        if not np.all(np.isfinite(self.values)):
            raise DataError(f"{self.transformer_id}: non-finite hourly values")


@dataclass
class HighResSeries:
    """Within-hour samples of one transformer, fixed count per hour."""

    transformer_id: str
    hours: np.ndarray
    values: np.ndarray  # (n_hours, samples_per_hour)

    def __post_init__(self):
        self.hours = np.asarray(self.hours, dtype=int)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[0] != len(self.hours):
            raise DataError(
                f"{self.transformer_id}: values must be (n_hours, samples_per_hour)")
        if len(self.hours) > 1 and np.any(np.diff(self.hours) <= 0):
            raise DataError(f"{self.transformer_id}: hour indices must strictly increase")
        if not np.all(np.isfinite(self.values)):
            raise DataError(f"{self.transformer_id}: non-finite samples")

    @property
    def samples_per_hour(self):
        return self.values.shape[1]


def hourly_from_highres(series):
    return HourlySeries(series.transformer_id, series.hours, series.values.mean(axis=1))


def daily_patterns(hourly, hours_per_day=24):
    """Stack a contiguous hourly series into (n_days, hours_per_day) rows,
    dropping a trailing partial day."""
    h = hourly.hours
    if len(h) and np.any(np.diff(h) != 1):
        raise DataError(f"{hourly.transformer_id}: hourly series must be contiguous")
    n_days = len(h) // hours_per_day
    if n_days == 0:
        raise DataError(f"{hourly.transformer_id}: need at least one full day")
    return hourly.values[: n_days * hours_per_day].reshape(n_days, hours_per_day)


# ---------------------------------------------------------------------------
# Bound models: hourly mean -> within-hour extreme


class _SqExpGpr:
    """Minimal squared-exponential GP regression on scalar inputs.

    Targets are centered; the posterior mean at a query point is
    ``mean(y) + k_*^T (K + sigma_n^2 I)^{-1} (y - mean(y))``.
    """

    def __init__(self, x, y, length_scale, signal_var, noise_var):
        self.x = np.asarray(x, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.length_scale = float(length_scale)
        self.signal_var = float(signal_var)
        self.noise_var = float(noise_var)
        self.y_mean = float(self.y.mean())
        k = self._kernel(self.x, self.x) + self.noise_var * np.eye(len(self.x))
        self._chol = np.linalg.cholesky(k)
        resid = self.y - self.y_mean
        self._alpha = np.linalg.solve(self._chol.T, np.linalg.solve(self._chol, resid))
        self._resid = resid

    def _kernel(self, a, b):
        d = a[:, None] - b[None, :]
        return self.signal_var * np.exp(-0.5 * (d / self.length_scale) ** 2)

    def log_marginal_likelihood(self):
        n = len(self.x)
        return float(-0.5 * self._resid @ self._alpha
                     - np.log(np.diag(self._chol)).sum()
                     - 0.5 * n * np.log(2.0 * np.pi))

    def predict(self, xs):
        xs = np.atleast_1d(np.asarray(xs, dtype=float))
        return self.y_mean + self._kernel(xs, self.x) @ self._alpha


def _fit_gpr(x, y):
    """Grid-search the SE hyperparameters by marginal likelihood."""
    span = float(np.ptp(x))
    var_y = max(float(np.var(y)), 1e-12)
    best, best_lml = None, -np.inf
    for ls in (0.1 * span, 0.3 * span, 1.0 * span):
        for sv in (0.5 * var_y, var_y, 2.0 * var_y):
            for nv in (1e-6 * var_y, 1e-4 * var_y, 1e-2 * var_y):
                try:
                    gpr = _SqExpGpr(x, y, ls, sv, max(nv, 1e-12))
                except np.linalg.LinAlgError:
                    continue
                lml = gpr.log_marginal_likelihood()
                if lml > best_lml:
                    best, best_lml = gpr, lml
    if best is None:
        raise DegenerateInputError("no numerically stable GP hyperparameters found")
    return best


@dataclass
class BoundModel:
    """Teacher-specific map from hourly mean to within-hour band edges."""

    upper: _SqExpGpr
    lower: _SqExpGpr
    train_range: tuple

    def predict_bounds(self, p_a):
        lo = self.lower.predict(p_a)
        hi = self.upper.predict(p_a)
        return np.minimum(lo, hi), np.maximum(lo, hi)


def fit_bound_models(series):
    """Fit the (mean -> max, mean -> min) GP pair from teacher high-res data.

    Needs at least one full day of hours and at least two distinct hourly
    mean levels, otherwise the regression input is degenerate.
    """
    if len(series.hours) < 24:
        raise DataError(
            f"{series.transformer_id}: need at least 24 hours of data, "
            f"got {len(series.hours)}")
    means = series.values.mean(axis=1)
    if len(np.unique(np.round(means, 12))) < 2:
        raise DegenerateInputError(
            f"{series.transformer_id}: hourly means are constant; "
            "cannot learn a mean-to-extreme map")
    upper = _fit_gpr(means, series.values.max(axis=1))
    lower = _fit_gpr(means, series.values.min(axis=1))
    return BoundModel(upper, lower, (float(means.min()), float(means.max())))


@dataclass
class BlendedBoundModel:
    """Convex combination of teacher bound models."""

    models: tuple
    weights: np.ndarray

    def predict_bounds(self, p_a):
        lo = hi = 0.0
        for w, m in zip(self.weights, self.models):
            mlo, mhi = m.predict_bounds(p_a)
            lo = lo + w * mlo
            hi = hi + w * mhi
        return np.minimum(lo, hi), np.maximum(lo, hi)


# ---------------------------------------------------------------------------
# Within-hour dynamics: second-order Markov chain on normalized bins


@dataclass
class TransitionModel:
    """Second-order transition tensor over normalized amplitude bins.

    ``probs[b2, b1, :]`` is the distribution of the next bin given the two
    previous bins; every such row sums to one.
    """

    n_bins: int
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        if self.probs.shape != (self.n_bins,) * 3:
            raise ParameterError("transition tensor must be (bins, bins, bins)")


def _bin_indices(samples, n_bins):
    lo, hi = samples.min(), samples.max()
    if hi - lo < 1e-15:
        return np.zeros(len(samples), dtype=int)
    z = (samples - lo) / (hi - lo)
    return np.minimum((z * n_bins).astype(int), n_bins - 1)


def fit_transition_model(series, n_bins=DEFAULT_BINS):
    """Count second-order bin transitions within each hour (normalized per
    hour to its own min/max), Laplace-smooth, and row-normalize."""
    if n_bins < 2:
        raise ParameterError(f"need at least 2 bins, got {n_bins}")
    if series.samples_per_hour < 3:
        raise DataError(
            f"{series.transformer_id}: need at least 3 samples per hour "
            "for second-order transitions")
    counts = np.zeros((n_bins,) * 3)
    for row in series.values:
        b = _bin_indices(row, n_bins)
        np.add.at(counts, (b[:-2], b[1:-1], b[2:]), 1.0)
    probs = counts + _LAPLACE
    probs /= probs.sum(axis=2, keepdims=True)
    return TransitionModel(n_bins, probs)


# ---------------------------------------------------------------------------
# Teacher weighting and blending


@dataclass
class LearningWeights:
    weights: np.ndarray
    distances: np.ndarray
    mode: str


def compute_learning_weights(student_patterns, teacher_patterns, mode="inverse"):
    """Weight teachers by daily-pattern proximity to the student.

    Distance per teacher: mean pairwise Euclidean distance between the
    teacher's daily patterns and the student's.  ``inverse`` (default)
    weights closer teachers more, ``literal`` weights proportional to the
    raw distances themselves; both normalize to a convex combination.
    """
    if mode not in ("inverse", "literal"):
        raise ParameterError(f"unknown weighting mode '{mode}'")
    teacher_patterns = list(teacher_patterns)
    if not teacher_patterns:
        raise ParameterError("at least one teacher is required")
    s = np.atleast_2d(np.asarray(student_patterns, dtype=float))
    dists = np.empty(len(teacher_patterns))
    for k, tp in enumerate(teacher_patterns):
        t = np.atleast_2d(np.asarray(tp, dtype=float))
        if t.shape[1] != s.shape[1]:
            raise ParameterError(
                f"teacher {k} pattern length {t.shape[1]} != student {s.shape[1]}")
        diff = t[:, None, :] - s[None, :, :]
        dists[k] = np.sqrt((diff ** 2).sum(axis=2)).mean()
    if mode == "inverse":
        raw = 1.0 / (dists + _WEIGHT_DELTA)
    else:
        raw = dists.copy()
        if raw.sum() <= 0.0:
            raw = np.ones_like(raw)
    return LearningWeights(raw / raw.sum(), dists, mode)


def blend_teachers(weights, bound_models, transition_models):
    """Convex blend of teacher models under shared learning weights."""
    bound_models = tuple(bound_models)
    transition_models = tuple(transition_models)
    w = np.asarray(weights.weights if isinstance(weights, LearningWeights) else weights,
                   dtype=float)
    if len(w) != len(bound_models) or len(w) != len(transition_models):
        raise ParameterError("one weight per teacher model is required")
    if len(w) == 0:
        raise ParameterError("at least one teacher is required")
    bins = {tm.n_bins for tm in transition_models}
    if len(bins) != 1:
        raise ParameterError(f"teacher transition models disagree on bin count: {sorted(bins)}")
    probs = sum(wk * tm.probs for wk, tm in zip(w, transition_models))
    probs = probs / probs.sum(axis=2, keepdims=True)
    return (BlendedBoundModel(bound_models, w),
            TransitionModel(bins.pop(), probs))


# ---------------------------------------------------------------------------
# Synthesis


@dataclass
class EnrichedHour:
    values: np.ndarray
    lower: float
    upper: float


def enrich_hour(p_a, bounds, transitions, n_samples=3600, rng=None):
    """Synthesize ``n_samples`` within-hour values anchored to mean ``p_a``.

    The band comes from the bound model (extended to contain ``p_a`` if
    prediction undershoots it); the shape comes from a second-order Markov
    walk over normalized bins, jittered uniformly within bins, then
    affinely recentered so the sample mean equals ``p_a`` exactly while
    staying inside the band.
    """
    if n_samples < 1:
        raise ParameterError("need at least one sample per hour")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    p_a = float(p_a)
    lo_arr, hi_arr = bounds.predict_bounds(np.array([p_a]))
    lo, hi = float(lo_arr[0]), float(hi_arr[0])
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise DegenerateBoundsError(f"bound model produced non-finite band ({lo}, {hi})")
    lo, hi = min(lo, p_a), max(hi, p_a)
    width = hi - lo
    if width < 1e-12 * max(1.0, abs(p_a)):
        return EnrichedHour(np.full(n_samples, p_a), lo, hi)

    n_bins = transitions.n_bins
    cum = np.cumsum(transitions.probs, axis=2)
    anchor = min(int((p_a - lo) / width * n_bins), n_bins - 1)
    b2 = b1 = anchor
    idx = np.empty(n_samples, dtype=int)
    draws = rng.random(n_samples)
    for m in range(n_samples):
        nxt = int(np.searchsorted(cum[b2, b1], draws[m], side="right"))
        idx[m] = min(nxt, n_bins - 1)
        b2, b1 = b1, idx[m]
    bin_width = width / n_bins
    vals = lo + (idx + rng.random(n_samples)) * bin_width

    mean = vals.mean()
    dev_hi = vals.max() - mean
    dev_lo = mean - vals.min()
    lam = 1.0
    if dev_hi > 0.0:
        lam = min(lam, (hi - p_a) / dev_hi)
    if dev_lo > 0.0:
        lam = min(lam, (p_a - lo) / dev_lo)
    lam = max(lam, 0.0)
    vals = p_a + lam * (vals - mean)
    return EnrichedHour(vals, lo, hi)


def _transformer_seed_word(transformer_id):
    digest = hashlib.sha256(transformer_id.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


def enrich_series(hourly, bounds, transitions, n_samples=3600, master_seed=0):
    """Enrich every hour of a student's hourly series.

    Each hour draws from its own generator seeded by (master seed,
    transformer id, hour), so results are reproducible regardless of
    evaluation order or parallel scheduling.
    """
    word = _transformer_seed_word(hourly.transformer_id)
    out = np.empty((len(hourly.hours), n_samples))
    for i, (h, p_a) in enumerate(zip(hourly.hours, hourly.values)):
        rng = np.random.default_rng([int(master_seed), word, int(h)])
        out[i] = enrich_hour(p_a, bounds, transitions, n_samples, rng).values
    return HighResSeries(hourly.transformer_id, hourly.hours, out)


# ---------------------------------------------------------------------------
# Moments


class MomentAmbiguitySet:
    """First two moments per (quantity, bus, phase, hour) plus optional
    cross-covariance groups.

    ``slice_hour`` assembles the mean vector and covariance matrix in a
    caller-supplied entry order (the dispatch layout), diagonal by default
    with group blocks overlaid, projected to the PSD cone if rounding
    pushed an eigenvalue slightly negative.
    """

    def __init__(self):
        self._entries = {}
        self._groups = []

    def add(self, quantity, bus, phase, hour, mu, var):
        if var < 0.0:
            raise ParameterError("variance must be nonnegative")
        self._entries[(quantity, bus, phase, int(hour))] = (float(mu), float(var))

    def add_group(self, keys, cov):
        keys = tuple(tuple(k) for k in keys)
        cov = np.asarray(cov, dtype=float)
        if cov.shape != (len(keys), len(keys)):
            raise ParameterError("group covariance must be square over its keys")
        for k in keys:
            if k not in self._entries:
                raise MomentCoverageError(f"group references unknown entry {k}")
        self._groups.append((keys, 0.5 * (cov + cov.T)))

    def __len__(self):
        return len(self._entries)

    def keys(self):
        return self._entries.keys()

    def get(self, quantity, bus, phase, hour):
        return self._entries[(quantity, bus, phase, int(hour))]

    def hours(self):
        return sorted({k[3] for k in self._entries})

    def slice_hour(self, hour, entries):
        hour = int(hour)
        mu = np.empty(len(entries))
        var = np.empty(len(entries))
        missing = []
        pos = {}
        for i, (q, b, ph) in enumerate(entries):
            key = (q, b, ph, hour)
            pos[key] = i
            if key in self._entries:
                mu[i], var[i] = self._entries[key]
            else:
                missing.append(key)
        if missing:
            raise MomentCoverageError(
                f"hour {hour}: moments missing for {missing[:5]}"
                + ("..." if len(missing) > 5 else ""))
        cov = np.diag(var)
        touched = False
        for keys, block in self._groups:
            if keys[0][3] != hour:
                continue
            if all(k in pos for k in keys):
                ii = [pos[k] for k in keys]
                cov[np.ix_(ii, ii)] = block
                touched = True
        if touched:
            w, v = np.linalg.eigh(cov)
            if w.min() < 0.0:
                cov = (v * np.maximum(w, 0.0)[None, :]) @ v.T
        return mu, cov

    # -- serialization ------------------------------------------------------

    def to_dict(self):
        entries = [{"quantity": q, "bus": b, "phase": p, "hour": h,
                    "mu": mu, "var": var}
                   for (q, b, p, h), (mu, var) in sorted(self._entries.items())]
        groups = [{"keys": [list(k) for k in keys], "cov": cov.tolist()}
                  for keys, cov in self._groups]
        return {"entries": entries, "groups": groups}

    @classmethod
    def from_dict(cls, data):
        out = cls()
        for e in data.get("entries", []):
            out.add(e["quantity"], e["bus"], e["phase"], e["hour"], e["mu"], e["var"])
        for g in data.get("groups", []):
            out.add_group([tuple(k) for k in g["keys"]], np.asarray(g["cov"]))
        return out


def save_moments(moments, path):
    with open(path, "w") as fh:
        json.dump(moments.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_moments(path):
    with open(path) as fh:
        return MomentAmbiguitySet.from_dict(json.load(fh))


def estimate_moments(samples, pv_caps=None, groups=None):
    """Gaussian maximum-likelihood moments from per-entry sample arrays.

    ``samples`` maps ``(quantity, bus, phase, hour)`` to a 1-D array.
    When ``pv_caps`` maps PV (bus, phase) to apparent capacity, reactive
    headroom entries are derived from the active-power samples wherever
    not supplied directly.  ``groups`` lists key tuples whose cross-
    covariance should be retained (same hour, equal sample counts).
    """
    out = MomentAmbiguitySet()
    store = {}
    for key, arr in samples.items():
        arr = np.asarray(arr, dtype=float).ravel()
        if len(arr) < 2:
            raise DataError(f"{key}: need at least 2 samples for a variance")
        if not np.all(np.isfinite(arr)):
            raise DataError(f"{key}: non-finite samples")
        store[key] = arr
        out.add(*key, arr.mean(), arr.var())

    if pv_caps:
        for (q, bus, phase, hour), arr in list(store.items()):
            if q != P_PV or (bus, phase) not in pv_caps:
                continue
            qkey = (QCAP_PV, bus, phase, hour)
            if qkey in store:
                continue
            s_cap = float(pv_caps[(bus, phase)])
            head = pv_reactive_capability(s_cap, np.clip(arr, 0.0, s_cap))
            head = np.atleast_1d(head)
            store[qkey] = head
            out.add(*qkey, head.mean(), head.var())

    for keys in (groups or []):
        keys = [tuple(k) for k in keys]
        arrs = []
        for k in keys:
            if k not in store:
                raise MomentCoverageError(f"group references unknown entry {k}")
            arrs.append(store[k])
        lens = {len(a) for a in arrs}
        if len(lens) != 1:
            raise DataError(f"group {keys}: unequal sample counts {sorted(lens)}")
        stack = np.vstack(arrs)
        cov = np.cov(stack, bias=True)
        out.add_group(keys, np.atleast_2d(cov))
    return out


# ---------------------------------------------------------------------------
# Measurement CSV files


_CSV_COLUMNS = ("timestamp", "transformer_id", "p_kw", "q_kvar")
_BASE_DATE = "2024-01-01"


def _read_measurements(path):
    try:
        df = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: cannot parse measurement CSV ({exc})") from exc
    for col in _CSV_COLUMNS:
        if col not in df.columns:
            raise DataError(f"{path}: missing required column '{col}'")
    try:
        ts = pd.to_datetime(df["timestamp"])
    except (ValueError, TypeError) as exc:
        raise DataError(f"{path}: unparseable timestamp ({exc})") from exc
    df = df.assign(timestamp=ts)
    for col in ("p_kw", "q_kvar"):
        vals = pd.to_numeric(df[col], errors="coerce")
        if vals.isna().any():
            bad = int(vals.isna().idxmax()) + 2  # header + 1-based
            raise DataError(f"{path}: non-numeric {col} near line {bad}")
        df[col] = vals
    return df.sort_values(["transformer_id", "timestamp"], kind="stable")


def load_highres_csv(path, base_power_kva):
    """Read teacher measurements into per-transformer (p, q) high-res series.

    Every hour of a transformer must carry the same number of samples.
    """
    df = _read_measurements(path)
    out = {}
    for tid, g in df.groupby("transformer_id", sort=True):
        t0 = g["timestamp"].iloc[0].normalize()
        hour_idx = ((g["timestamp"] - t0).dt.total_seconds() // 3600).astype(int)
        counts = hour_idx.value_counts()
        if counts.nunique() != 1:
            raise DataError(
                f"{path}: transformer '{tid}' has uneven samples per hour "
                f"(min {counts.min()}, max {counts.max()})")
        m = int(counts.iloc[0])
        hours = np.sort(hour_idx.unique())
        order = np.argsort(hour_idx.to_numpy(), kind="stable")
        p = g["p_kw"].to_numpy()[order].reshape(len(hours), m) / base_power_kva
        q = g["q_kvar"].to_numpy()[order].reshape(len(hours), m) / base_power_kva
        out[str(tid)] = (HighResSeries(str(tid), hours, p),
                         HighResSeries(str(tid), hours, q))
    return out


def load_hourly_csv(path, base_power_kva):
    """Read student measurements into per-transformer (p, q) hourly series."""
    df = _read_measurements(path)
    out = {}
    for tid, g in df.groupby("transformer_id", sort=True):
        t0 = g["timestamp"].iloc[0].normalize()
        hour_idx = ((g["timestamp"] - t0).dt.total_seconds() // 3600).astype(int)
        if hour_idx.duplicated().any():
            raise DataError(f"{path}: transformer '{tid}' has duplicate hourly rows")
        hours = hour_idx.to_numpy()
        out[str(tid)] = (
            HourlySeries(str(tid), hours, g["p_kw"].to_numpy() / base_power_kva),
            HourlySeries(str(tid), hours, g["q_kvar"].to_numpy() / base_power_kva),
        )
    return out


def write_highres_csv(path, p_series, q_series, base_power_kva, base_date=_BASE_DATE):
    """Write enriched (p, q) series back to the measurement schema."""
    if p_series.values.shape != q_series.values.shape or not np.array_equal(
            p_series.hours, q_series.hours):
        raise DataError("p and q series must share hours and sample counts")
    m = p_series.samples_per_hour
    step = pd.to_timedelta(3600.0 / m, unit="s")
    base = pd.Timestamp(base_date)
    frames = []
    for i, h in enumerate(p_series.hours):
        start = base + pd.to_timedelta(int(h), unit="h")
        frames.append(pd.DataFrame({
            "timestamp": start + step * np.arange(m),
            "transformer_id": p_series.transformer_id,
            "p_kw": p_series.values[i] * base_power_kva,
            "q_kvar": q_series.values[i] * base_power_kva,
        }))
    pd.concat(frames, ignore_index=True).to_csv(path, index=False)
