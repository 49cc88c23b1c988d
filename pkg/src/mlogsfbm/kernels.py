"""Closed-form covariance kernels and moment formulas.

Everything here is a pure function of its arguments.  Kernels are supported
on lags below the correlation scale T and vanish identically beyond it; the
integrated (block-averaged) variants additionally require the whole
integration rectangle to fit inside the support, i.e. tau + Delta <= T.
Functions accepting a lag are vectorized over it.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .params import ModelParams, PairParams, require_admissible
from .special import power_exp_integral

__all__ = [
    "KernelDomainError",
    "CovCurve",
    "SeriesResult",
    "RatioBound",
    "msfbm_cross_cov",
    "log_kernel_cov",
    "noise_correlation",
    "integrated_cov",
    "interval_cov",
    "logvol_incr_cov",
    "logvol_incr_corr",
    "mrm_cross_cov_series",
    "mrm_cross_cov_sia",
    "zeta_exponent",
    "wick_moment",
    "sia_generalized_moment",
    "index_logvol_variance",
    "index_variance_decomposition",
    "index_ratio_bound",
]

# below this z = Delta/tau the direct second difference loses more than six
# digits; switch to its quadratic expansion
_SMALL_Z = 1e-4

_DOMAIN_SLACK = 1.0 + 1e-12


class KernelDomainError(ValueError):
    """Arguments outside the validity window of a closed-form kernel."""


@dataclass(frozen=True)
class CovCurve:
    """A covariance curve: strictly increasing lags with one value each.

    Produced both by theoretical kernels and empirical estimators; ``meta``
    records which (kernel name and parameters, or estimator and sample size).
    """

    lags: np.ndarray
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        lags = np.asarray(self.lags, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        if lags.ndim != 1 or vals.shape != lags.shape:
            raise ValueError("lags and values must be 1-d arrays of equal length")
        if lags.size < 1:
            raise ValueError("curve needs at least one lag")
        if np.any(lags < 0):
            raise ValueError("lags must be non-negative")
        if np.any(np.diff(lags) <= 0):
            raise ValueError("lags must be strictly increasing")
        if not np.all(np.isfinite(vals)):
            raise ValueError("values must be finite")
        object.__setattr__(self, "lags", lags)
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return self.lags.size

    def value_at(self, lag: float) -> float:
        idx = np.where(self.lags == lag)[0]
        if idx.size == 0:
            raise KeyError(f"lag {lag} not in curve")
        return float(self.values[idx[0]])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["lag", "value"])
        for lag, val in zip(self.lags, self.values):
            writer.writerow([repr(float(lag)), repr(float(val))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, meta: dict | None = None) -> "CovCurve":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or [c.lower() for c in rows[0]] != ["lag", "value"]:
            raise ValueError("expected header 'lag,value'")
        lags = [float(r[0]) for r in rows[1:]]
        vals = [float(r[1]) for r in rows[1:]]
        return cls(np.array(lags), np.array(vals), meta or {})

    def to_json(self) -> str:
        return json.dumps({
            "lags": self.lags.tolist(),
            "values": self.values.tolist(),
            "meta": self.meta,
        }, indent=2)


@dataclass(frozen=True)
class SeriesResult:
    """Value of a truncated series with the achieved tolerance estimate."""

    value: float
    terms_used: int
    rel_error: float
    converged: bool


@dataclass(frozen=True)
class RatioBound:
    finite: float
    limit: float
    c_h: float


def _pair_coeffs(pair: PairParams) -> tuple[float, float, float]:
    """Coefficients (A, B, C) of the cross kernel
    xi * [A - B (tau/T)^(2 H_ij) - C (tau/T)]."""
    hij = pair.H_ij
    hbar = pair.h_bar
    if hij <= 0:
        raise KernelDomainError(
            "H_ij = 0 has no power-law kernel; use log_kernel_cov for the "
            "multifractal branch"
        )
    a = (1.0 + 2.0 * hij - 2.0 * hbar) / (2.0 * hij * (1.0 - 2.0 * hbar))
    b = 1.0 / (2.0 * hij * (1.0 - 2.0 * hij))
    c = (2.0 * hij - 2.0 * hbar) / ((2.0 * hij - 1.0) * (1.0 - 2.0 * hbar))
    return a, b, c


def _dispatch(tau, fn):
    t = np.asarray(tau, dtype=float)
    if np.any(t < 0):
        raise KernelDomainError("lags must be non-negative")
    out = fn(t)
    return float(out) if t.ndim == 0 else out


def msfbm_cross_cov(tau, pair: PairParams):
    """Stationary cross-covariance of two coupled log-volatility marginals.

    Vanishes for tau >= T; at i = j it reduces to
    (nu^2/2) (1 - (tau/T)^(2H)) with nu^2 = lambda^2 / (H (1 - 2H)).
    """
    a, b, c = _pair_coeffs(pair)
    xi = pair.xi_ij
    T = pair.T
    h2 = 2.0 * pair.H_ij

    def compute(t):
        u = np.minimum(t / T, 1.0)
        val = xi * (a - b * u**h2 - c * u)
        return np.where(t >= T, 0.0, val)

    return _dispatch(tau, compute)


def log_kernel_cov(tau, ell: float, xi: float, T: float):
    """Logarithmic kernel with short-scale cutoff ell.

    Equals -xi ln(tau/T) on (ell, T), vanishes beyond T, and is capped
    linearly by -xi (ln(ell/T) - 1 + tau/ell) below ell; continuous at both
    junctions.  This is the H = 0 (multifractal) covariance branch.
    """
    if not 0 < ell < T:
        raise KernelDomainError(f"need 0 < ell < T, got ell={ell}, T={T}")

    def compute(t):
        capped = -xi * (math.log(ell / T) - 1.0 + t / ell)
        middle = -xi * np.log(np.maximum(t, ell) / T)
        val = np.where(t < ell, capped, middle)
        return np.where(t >= T, 0.0, val)

    return _dispatch(tau, compute)


def noise_correlation(h, pair: PairParams):
    """Scale-dependent correlation of the driving noises:
    g (h/T)^(2 (H_ij - Hbar)) below T, constant g above."""
    def compute(hh):
        if np.any(hh <= 0):
            raise KernelDomainError("scale h must be positive")
        expo = 2.0 * (pair.H_ij - pair.h_bar)
        val = pair.g * np.minimum(hh / pair.T, 1.0) ** expo
        return np.where(hh > pair.T, pair.g, val)

    return _dispatch(h, compute)


def _second_diff_ratio(z, alpha: float):
    # (|1+z|^(a+2) + |1-z|^(a+2) - 2) / (z^2 (1+a)(2+a)), guarded for small z
    z = np.asarray(z, dtype=float)
    small = z < _SMALL_Z
    zs = np.where(small, 1.0, z)
    direct = (
        np.abs(1.0 + zs) ** (alpha + 2.0)
        + np.abs(1.0 - zs) ** (alpha + 2.0)
        - 2.0
    ) / (zs * zs * (1.0 + alpha) * (alpha + 2.0))
    series = 1.0 + alpha * (alpha - 1.0) * z * z / 12.0
    return np.where(small, series, direct)


def _double_integral_power(tau, delta: float, T: float, alpha: float):
    """int over [0,Delta] x [tau, tau+Delta] of (|u-v|/T)^alpha du dv."""
    t = np.asarray(tau, dtype=float)
    pos = t > 0
    ts = np.where(pos, t, 1.0)
    via_ratio = delta * delta * (ts / T) ** alpha * _second_diff_ratio(delta / ts, alpha)
    at_zero = 2.0 * delta ** (alpha + 2.0) / (T**alpha * (1.0 + alpha) * (2.0 + alpha))
    return np.where(pos, via_ratio, at_zero)


def _check_window(tau, delta: float, T: float):
    t = np.asarray(tau, dtype=float)
    if delta <= 0:
        raise KernelDomainError(f"Delta must be positive, got {delta}")
    if np.any(t < 0):
        raise KernelDomainError("lags must be non-negative")
    if np.any(t + delta > T * _DOMAIN_SLACK):
        raise KernelDomainError(
            f"tau + Delta = {float(np.max(t)) + delta} exceeds the validity "
            f"window T = {T}"
        )


def integrated_cov(tau, delta: float, pair: PairParams):
    """Covariance of the two normalized block integrals of length Delta whose
    left endpoints are tau apart.  Finite at tau = 0 and symmetric in the
    marginals; dividing by Delta^2 recovers the instantaneous kernel as
    Delta -> 0."""
    _check_window(tau, delta, pair.T)
    a, b, c = _pair_coeffs(pair)

    def compute(t):
        g2h = _double_integral_power(t, delta, pair.T, 2.0 * pair.H_ij)
        g1 = _double_integral_power(t, delta, pair.T, 1.0)
        return pair.g * (a * delta * delta - b * g2h - c * g1)

    return _dispatch(tau, compute)


def interval_cov(interval_i: tuple, interval_j: tuple, pair: PairParams) -> float:
    """Covariance of the normalized integrals of the two marginals over two
    arbitrary intervals (not normalized by the interval lengths)."""
    p, q = map(float, interval_i)
    r, s = map(float, interval_j)
    if not (q > p and s > r):
        raise KernelDomainError("intervals must have positive length")
    span = max(abs(s - p), abs(r - q), abs(r - p), abs(s - q))
    if span > pair.T * _DOMAIN_SLACK:
        raise KernelDomainError(
            f"interval separation {span} exceeds the validity window T = {pair.T}"
        )
    a, b, c = _pair_coeffs(pair)

    def psi(alpha: float) -> float:
        num = (
            abs(s - p) ** (alpha + 2.0)
            + abs(r - q) ** (alpha + 2.0)
            - abs(r - p) ** (alpha + 2.0)
            - abs(s - q) ** (alpha + 2.0)
        )
        return num / (pair.T**alpha * (alpha + 1.0) * (alpha + 2.0))

    area = (q - p) * (s - r)
    return pair.g * (a * area - b * psi(2.0 * pair.H_ij) - c * psi(1.0))


def logvol_incr_cov(tau, delta: float, pair: PairParams):
    """Covariance of the lag-tau increments of the two block-averaged
    marginals, cov(d_tau Omega_i / Delta, d_tau Omega_j / Delta).

    Equals 2 (C(0) - C(tau)) / Delta^2 in terms of the block covariance C;
    evaluated here in closed form.
    """
    t = np.asarray(tau, dtype=float)
    if np.any(t <= 0):
        raise KernelDomainError("increment lag tau must be positive")
    _check_window(tau, delta, pair.T)
    a, b, c = _pair_coeffs(pair)
    T = pair.T
    h2 = 2.0 * pair.H_ij

    # block-variance constants: the tau = 0 double integrals over Delta^2
    kappa2 = (delta / T) ** h2 / ((1.0 + h2) * (1.0 + 0.5 * h2))
    kappa1 = delta / (3.0 * T)

    def compute(tt):
        z = delta / tt
        f2 = (tt / T) ** h2 * _second_diff_ratio(z, h2)
        f1 = (tt / T) * _second_diff_ratio(z, 1.0)
        return 2.0 * pair.g * (b * (f2 - kappa2) + c * (f1 - kappa1))

    return _dispatch(tau, compute)


def _diagonal_pair(pair: PairParams, which: str) -> PairParams:
    if which == "i":
        return PairParams.diagonal(pair.lambda_i2, pair.H_i, pair.T)
    return PairParams.diagonal(pair.lambda_j2, pair.H_j, pair.T)


def logvol_incr_corr(tau: float, delta: float, pair: PairParams) -> float:
    """Correlation of the lag-tau log-volatility increments of the two
    marginals in the small-amplitude regime; bounded by 1 in magnitude."""
    cov_ij = logvol_incr_cov(tau, delta, pair)
    var_i = logvol_incr_cov(tau, delta, _diagonal_pair(pair, "i"))
    var_j = logvol_incr_cov(tau, delta, _diagonal_pair(pair, "j"))
    if var_i <= 0 or var_j <= 0:
        raise KernelDomainError(
            f"degenerate increment variance (var_i={var_i}, var_j={var_j})"
        )
    return cov_ij / math.sqrt(var_i * var_j)


def _series_constants(pair: PairParams) -> tuple[float, float, float]:
    a, b, c = _pair_coeffs(pair)
    xi = pair.xi_ij
    k = xi * b / pair.T ** (2.0 * pair.H_ij)
    l = xi * c / pair.T
    m = math.exp(xi * a)
    return k, l, m


def _check_series_domain(tau: float, delta: float, pair: PairParams):
    if not delta > 0:
        raise KernelDomainError(f"Delta must be positive, got {delta}")
    if not tau > delta:
        raise KernelDomainError(f"need tau > Delta, got tau={tau}, Delta={delta}")
    if tau + delta > pair.T * _DOMAIN_SLACK:
        raise KernelDomainError(
            f"tau + Delta = {tau + delta} exceeds the validity window T = {pair.T}"
        )


def mrm_cross_cov_series(
    tau: float,
    delta: float,
    pair: PairParams,
    n_terms: int = 200,
    rtol: float = 1e-12,
) -> SeriesResult:
    """E[M_i over [t, t+Delta] times M_j over [t+tau, t+tau+Delta]] via the
    exponential-series expansion of the measure cross-moment.

    Expands exp(-K |x-y|^(2H)) and integrates each term exactly with
    incomplete-gamma identities; the linear factor exp(-L |x-y|) is kept
    inside the integrals.  Stops when the last term is below ``rtol`` of the
    partial sum, reporting the achieved ratio.
    """
    if n_terms < 1:
        raise ValueError("n_terms must be >= 1")
    _check_series_domain(tau, delta, pair)
    k, l, m = _series_constants(pair)
    h2 = 2.0 * pair.H_ij

    def lin_integral(p: float, a: float, b: float) -> float:
        # int_a^b u^p exp(-L u) du
        return power_exp_integral(p, l, 1.0, a, b)

    total = 0.0
    last_ratio = math.inf
    coeff = 1.0  # (-K)^n / n!
    terms = 0
    for n in range(n_terms):
        p = h2 * n
        f_n = (
            (delta + tau) * lin_integral(p, tau, tau + delta)
            - lin_integral(p + 1.0, tau, tau + delta)
            + lin_integral(p + 1.0, tau - delta, tau)
            + (delta - tau) * lin_integral(p, tau - delta, tau)
        )
        term = coeff * f_n
        total += term
        terms = n + 1
        if total != 0.0:
            last_ratio = abs(term) / abs(total)
            if last_ratio < rtol:
                break
        coeff *= -k / (n + 1.0)
    return SeriesResult(
        value=m * total,
        terms_used=terms,
        rel_error=last_ratio,
        converged=last_ratio < rtol,
    )


def mrm_cross_cov_sia(tau: float, delta: float, pair: PairParams) -> float:
    """First order (in the linear coefficient) form of the measure
    cross-moment: the pure power-kernel term minus L times the distance-
    weighted correction, each reduced to incomplete-gamma blocks.

    For i = j the correction vanishes and the value is
    M [F(tau+Delta) + F(tau-Delta) - 2 F(tau)].
    """
    _check_series_domain(tau, delta, pair)
    k, l, m = _series_constants(pair)
    h2 = 2.0 * pair.H_ij

    def j_int(n: float, a: float, b: float) -> float:
        # int_a^b z^n exp(-K z^(2H)) dz
        return power_exp_integral(n, k, h2, a, b)

    def f_block(x: float) -> float:
        return x * j_int(0.0, 0.0, x) - j_int(1.0, 0.0, x)

    pure = f_block(tau + delta) + f_block(tau - delta) - 2.0 * f_block(tau)
    upper = (
        -j_int(2.0, tau, tau + delta)
        + (delta + 2.0 * tau) * j_int(1.0, tau, tau + delta)
        - tau * (delta + tau) * j_int(0.0, tau, tau + delta)
    )
    lower = (
        -j_int(2.0, tau - delta, tau)
        + (2.0 * tau - delta) * j_int(1.0, tau - delta, tau)
        + tau * (delta - tau) * j_int(0.0, tau - delta, tau)
    )
    return m * (pure - l * (upper + lower))


def zeta_exponent(p: float, q: float, xi_ij: float) -> float:
    """Joint scaling exponent p + q - xi (p+q)^2 / 2 of the bivariate
    measure moments; symmetric in (p, q), concave in p + q."""
    return p + q - xi_ij * (p + q) ** 2 / 2.0


_WICK_MAX_N = 16


def wick_moment(cov) -> float:
    """E[X_1 ... X_n] for a centered Gaussian vector with the given
    covariance: zero for odd n, sum over perfect matchings of covariance
    products for even n."""
    c = np.asarray(cov, dtype=float)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError("covariance must be a square matrix")
    n = c.shape[0]
    if n > _WICK_MAX_N:
        raise ValueError(f"n = {n} exceeds the pairing-enumeration bound {_WICK_MAX_N}")
    scale = max(1.0, float(np.abs(c).max()))
    if np.abs(c - c.T).max() > 1e-10 * scale:
        raise ValueError("covariance must be symmetric")
    if np.linalg.eigvalsh(0.5 * (c + c.T)).min() < -1e-8 * scale:
        raise ValueError("covariance must be positive semidefinite within tolerance")
    if n % 2 == 1:
        return 0.0

    def pairing_sum(active: tuple) -> float:
        if not active:
            return 1.0
        first, rest = active[0], active[1:]
        total = 0.0
        for pos, partner in enumerate(rest):
            total += c[first, partner] * pairing_sum(rest[:pos] + rest[pos + 1:])
        return total

    return pairing_sum(tuple(range(n)))


def sia_generalized_moment(intervals: Sequence[tuple], params: ModelParams) -> float:
    """Leading small-amplitude term of E[prod_i ln(M_i(I_i)/|I_i|)]: the Wick
    moment of the Gaussian block integrals, with the amplitude factors
    lambda_i absorbed into the covariance matrix.  Zero for an odd number of
    factors."""
    require_admissible(params)
    d = params.d
    if len(intervals) != d:
        raise ValueError(f"expected {d} intervals, got {len(intervals)}")
    pts = [float(e) for iv in intervals for e in iv]
    if max(pts) - min(pts) > params.T * _DOMAIN_SLACK:
        raise KernelDomainError("intervals span a window longer than T")
    if d % 2 == 1:
        return 0.0
    lam = np.sqrt(params.lambda2_diag)
    sigma = np.empty((d, d))
    for i in range(d):
        for j in range(i, d):
            li = intervals[i][1] - intervals[i][0]
            lj = intervals[j][1] - intervals[j][0]
            cov = interval_cov(intervals[i], intervals[j], params.pair(i, j))
            sigma[i, j] = sigma[j, i] = lam[i] * lam[j] * cov / (li * lj)
    return wick_moment(sigma)


def index_logvol_variance(
    weights: Sequence[float], params: ModelParams, tau: float, delta: float
) -> float:
    """Small-amplitude variance of the lag-tau log-volatility increment of a
    weighted index of the d marginals: the quadratic form of the pairwise
    increment covariances with weights alpha_i^2 alpha_j^2 lambda_i lambda_j."""
    cross, diag = index_variance_decomposition(weights, params, tau, delta)
    return cross + diag


def index_variance_decomposition(
    weights: Sequence[float], params: ModelParams, tau: float, delta: float
) -> tuple[float, float]:
    """Split of the index increment variance into the off-diagonal (shared
    factor) and diagonal (idiosyncratic) sums."""
    require_admissible(params)
    w = np.asarray(weights, dtype=float)
    if w.shape != (params.d,):
        raise ValueError(f"expected {params.d} weights, got shape {w.shape}")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    if not (0 < delta < params.T and 0 < tau < params.T):
        raise KernelDomainError("need 0 < Delta, tau < T")
    lam = np.sqrt(params.lambda2_diag)
    cross = 0.0
    diag = 0.0
    for i in range(params.d):
        for j in range(i, params.d):
            cov = logvol_incr_cov(tau, delta, params.pair(i, j))
            term = w[i] ** 2 * w[j] ** 2 * lam[i] * lam[j] * cov
            if i == j:
                diag += term
            else:
                cross += 2.0 * term
    return float(cross), float(diag)


def _increment_variance_bracket(z: float, hurst: float) -> float:
    """Increment-variance shape as a function of z = Delta/tau alone, with
    the (tau/T)^(2H) factor stripped; extends continuously to hurst = 0."""
    if hurst == 0.0:
        if z >= 1.0:
            raise KernelDomainError("need z = Delta/tau < 1 at the H' -> 0 limit")
        corr = ((1.0 + z) ** 2 * math.log1p(z)
                + (1.0 - z) ** 2 * math.log1p(-z)) / (2.0 * z * z)
        return -math.log(z) + corr
    h2 = 2.0 * hurst
    e2 = float(_second_diff_ratio(np.asarray(z), h2))
    bracket = e2 - z**h2 / ((1.0 + h2) * (1.0 + hurst))
    return bracket / (h2 * (1.0 - h2))


def index_ratio_bound(
    H: float, Hprime: float, delta: float, tau: float, T: float, d: int
) -> RatioBound:
    """Lower bound for the ratio of the shared-factor term to the
    idiosyncratic term of the index variance, for the homogeneous
    configuration (common off-diagonal roughness H, marginal roughness H').

    Returns both the finite-H' bound (d-1) (tau/T)^(2(H-H')) / r(Delta/tau)
    and the H' -> 0 limit (d-1) (tau/T)^(2H) C_H (3 - 2 ln(Delta/tau)) with
    C_H = H (1-2H) (1+2H) (1+H) / (2 (2^(2H) - 1)).
    """
    if not 0 <= Hprime < H < 0.5:
        raise KernelDomainError(f"need 0 <= H' < H < 1/2, got H'={Hprime}, H={H}")
    if not 0 < delta < tau < T:
        raise KernelDomainError(
            f"need 0 < Delta < tau < T, got Delta={delta}, tau={tau}, T={T}"
        )
    if d < 1:
        raise ValueError("d must be >= 1")
    z = delta / tau
    r = _increment_variance_bracket(z, Hprime) / _increment_variance_bracket(z, H)
    finite = (d - 1) * (tau / T) ** (2.0 * (H - Hprime)) / r
    c_h = H * (1.0 - 2.0 * H) * (1.0 + 2.0 * H) * (1.0 + H) / (
        2.0 * (2.0 ** (2.0 * H) - 1.0)
    )
    limit = (d - 1) * (tau / T) ** (2.0 * H) * c_h * (3.0 - 2.0 * math.log(z))
    return RatioBound(finite=float(finite), limit=float(limit), c_h=float(c_h))
