"""Moment estimators and two-stage GMM calibration.

The workflow mirrors the simulation study: each marginal is fitted on its
own (roughness H, amplitude lambda^2, scale T fixed by the caller), then
every pair is fitted for its correlation g and joint roughness H_ij with the
marginals held fixed.  Moment conditions are empirical autocovariances of
the log-volatility series on a geometric lag grid, matched against the exact
model-implied expectation of the estimator (the demeaned 1/N estimator is
biased by the sample-mean variance, which is material when the correlation
scale is of the order of the sample span).

Constrained parameters never leave their boxes: the amplitude (lambda^2,
or g times the marginal amplitudes) enters the moment curve linearly and is
profiled out by weighted least squares clipped to its box, and the roughness
is searched on a bounded bracket.  This optimizes the same objective as the
tanh/logistic reparametrization but deterministically, without ridge
wandering; a Nelder-Mead mode on the unconstrained coordinates is kept for
comparison and for the free-scale fit.

Second-stage weights invert either the exact Gaussian covariance of the
moment vector at the first-stage estimate (default) or a Bartlett
(Newey-West) estimate of it.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.optimize as sopt

from .kernels import CovCurve
from .params import ModelParams, ValidationReport, validate
from .simulate import (
    FieldPanel,
    field_to_gaussian_proxy,
    field_to_measure,
    simulate_field,
)
from .simulate import _spectral_factor

__all__ = [
    "LagGrid",
    "GmmResult",
    "McConfig",
    "McReport",
    "McRun",
    "ZeroVarianceError",
    "CalibrationError",
    "McValidationError",
    "PanelCalibration",
    "empirical_cross_cov",
    "d_statistic",
    "newey_west_weight",
    "calibrate_univariate",
    "calibrate_pair",
    "calibrate_panel",
    "mc_validate",
    "default_workers",
]

MAX_ITERATIONS = 500
SIMPLEX_TOL = 1e-8

# starting points aligned with typical empirical values
INIT_H = 0.1
INIT_LAMBDA2 = 0.05
INIT_G = 0.5

_AMP_FLOOR = 1e-10


class ZeroVarianceError(ValueError):
    pass


class CalibrationError(RuntimeError):
    pass


class McValidationError(RuntimeError):
    pass


def default_workers() -> int:
    env = os.environ.get("MSFBM_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass(frozen=True)
class LagGrid:
    """Geometric lag grid floor(sqrt(2^k)), k = 0..Q, duplicates removed."""

    Q: int
    taus: tuple[int, ...]

    def __post_init__(self):
        if not self.taus:
            raise ValueError("lag grid must not be empty")
        if any(t <= 0 for t in self.taus):
            raise ValueError("lags must be positive integers")
        if any(b <= a for a, b in zip(self.taus, self.taus[1:])):
            raise ValueError("lags must be strictly increasing")

    @classmethod
    def default(cls, q: int = 19) -> "LagGrid":
        taus = sorted({int(math.isqrt(2**k)) for k in range(q + 1)})
        return cls(Q=q, taus=tuple(taus))

    def restrict(self, max_lag_exclusive: int) -> "LagGrid":
        kept = tuple(t for t in self.taus if t < max_lag_exclusive)
        if not kept:
            raise CalibrationError(
                f"no grid lags below {max_lag_exclusive}; series too short")
        return LagGrid(Q=self.Q, taus=kept)


@dataclass(frozen=True)
class GmmResult:
    params: dict
    objective: float
    iterations: int
    converged: bool
    weight: np.ndarray
    residuals: CovCurve
    stderr: dict | None = None
    notes: tuple = ()

    def to_dict(self) -> dict:
        return {
            "params": self.params,
            "objective": self.objective,
            "iterations": self.iterations,
            "converged": self.converged,
            "notes": list(self.notes),
        }


def empirical_cross_cov(
    x: np.ndarray,
    y: np.ndarray,
    grid: LagGrid,
    include_zero: bool = False,
    mask_x: np.ndarray | None = None,
    mask_y: np.ndarray | None = None,
) -> CovCurve:
    """Chat(k) = (1/N) sum_{l=1}^{N-k} (x_l - m_x)(y_{l+k} - m_y).

    Deliberately 1/N (not 1/(N-k)) so longer lags are shrunk toward zero.
    Directional: the (y, x) curve is a different object for k > 0.  Masked
    entries (mask False) are dropped from the means and from the products.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("series must be 1-d arrays of equal length")
    n = x.size
    lags = ((0,) if include_zero else ()) + grid.taus
    if lags[-1] >= n:
        raise ValueError(f"max lag {lags[-1]} must be below series length {n}")
    valid_x = np.ones(n, bool) if mask_x is None else np.asarray(mask_x, bool)
    valid_y = np.ones(n, bool) if mask_y is None else np.asarray(mask_y, bool)
    if not valid_x.any() or not valid_y.any():
        raise ValueError("mask excludes every observation")
    xc = np.where(valid_x, x - x[valid_x].mean(), 0.0)
    yc = np.where(valid_y, y - y[valid_y].mean(), 0.0)
    values = np.empty(len(lags))
    for pos, k in enumerate(lags):
        values[pos] = float(np.dot(xc[: n - k], yc[k:])) / n
    return CovCurve(np.array(lags, dtype=float), values,
                    meta={"estimator": "empirical-cross-cov", "n": n,
                          "lag_units": "delta"})


def d_statistic(curve: CovCurve) -> CovCurve:
    """Dhat(k) = Chat(k) - Chat(0); requires lag 0 in the input curve."""
    if curve.lags[0] != 0.0:
        raise ValueError("d_statistic needs the lag-0 value in the curve")
    meta = dict(curve.meta)
    meta["statistic"] = "d"
    return CovCurve(curve.lags, curve.values - curve.values[0], meta)


@dataclass(frozen=True)
class NWResult:
    long_run_cov: np.ndarray
    weight: np.ndarray
    bandwidth: int
    fallback_identity: bool


def newey_west_weight(contributions: np.ndarray, bandwidth: int) -> NWResult:
    """Bartlett long-run covariance of per-observation moment contributions
    and its regularized inverse, usable as a second-stage GMM weight."""
    u = np.asarray(contributions, dtype=float)
    if u.ndim != 2:
        raise ValueError("contributions must be (n_obs, n_moments)")
    n, q = u.shape
    if bandwidth < 0:
        raise ValueError("bandwidth must be >= 0")
    if n <= bandwidth:
        raise ValueError(f"series length {n} must exceed bandwidth {bandwidth}")
    u = u - u.mean(axis=0)
    s = u.T @ u / n
    for j in range(1, bandwidth + 1):
        gamma = u[j:].T @ u[:-j] / n
        s += (1.0 - j / (bandwidth + 1.0)) * (gamma + gamma.T)
    trace = float(np.trace(s))
    if not math.isfinite(trace) or trace <= 0:
        return NWResult(s, np.eye(q), bandwidth, True)
    eps = 1e-10 * trace / q
    try:
        w = np.linalg.inv(s + eps * np.eye(q))
    except np.linalg.LinAlgError:
        return NWResult(s, np.eye(q), bandwidth, True)
    w = 0.5 * (w + w.T)
    return NWResult(s, w, bandwidth, False)


# ---------------------------------------------------------------------------
# model curves
# ---------------------------------------------------------------------------

def _expected_curve(r: np.ndarray, n: int, lags: Sequence[int]) -> np.ndarray:
    """Exact finite-sample expectation of ``empirical_cross_cov`` under a
    model with (symmetric) cross-covariance sequence r(tau), tau = 0..n-1."""
    r = np.asarray(r, dtype=float)
    prefix = np.concatenate([[0.0], np.cumsum(r)])  # prefix[m] = sum r[0:m]

    def psum(m):
        # sum_{tau=0..m} r(tau), clipped to the available range
        return prefix[np.clip(m + 1, 0, n)]

    l = np.arange(1, n + 1)
    h = (psum(n - l) + psum(l - 1) - r[0]) / n  # E[x_l * mean(y)]
    hsum = np.concatenate([[0.0], np.cumsum(h)])
    tau = np.arange(1, n)
    vbar = (r[0] + 2.0 * np.sum((1.0 - tau / n) * r[1:])) / n
    out = np.empty(len(lags))
    for pos, k in enumerate(lags):
        cross = hsum[n - k] + (hsum[n] - hsum[k])
        out[pos] = (n - k) / n * (r[k] + vbar) - cross / n
    return out


class _BlockCovModel:
    """Optimizer-facing model curve: precomputes every roughness-independent
    array once per fit so a parameter evaluation costs a few vector power
    calls.  Matches integrated_cov / delta^2 to rounding (tested)."""

    def __init__(self, n: int, delta: float, taus: Sequence[int]):
        self.n = n
        self.delta = delta
        self.taus = tuple(taus)
        k = np.arange(1, n)
        self.abs_lags = k * delta
        self.z = delta / self.abs_lags
        z = self.z
        # second-difference ratio at alpha = 1 is exactly 1 for z <= 1
        self.e1 = np.where(
            z <= 1.0, 1.0,
            (np.abs(1 + z) ** 3 + np.abs(1 - z) ** 3 - 2) / (6 * z * z))
        self.small = z < 1e-4
        self.z2_12 = z * z / 12.0

    def _e_ratio(self, alpha: float) -> np.ndarray:
        z = self.z
        direct = (
            np.abs(1.0 + z) ** (alpha + 2.0)
            + np.abs(1.0 - z) ** (alpha + 2.0)
            - 2.0
        ) / (z * z * (1.0 + alpha) * (alpha + 2.0))
        if self.small.any():
            series = 1.0 + alpha * (alpha - 1.0) * self.z2_12
            return np.where(self.small, series, direct)
        return direct

    def cov_sequence(self, hij: float, hbar: float, scale: float,
                     t_val: float) -> np.ndarray:
        """scale * cov(block_0, block_k) / delta^2 for k = 0..n-1 with the
        kernel coefficients of joint roughness hij and marginal mean hbar."""
        h2 = 2.0 * hij
        a = (1.0 + h2 - 2.0 * hbar) / (h2 * (1.0 - 2.0 * hbar))
        b = 1.0 / (h2 * (1.0 - h2))
        c = (h2 - 2.0 * hbar) / ((h2 - 1.0) * (1.0 - 2.0 * hbar))
        u = self.abs_lags / t_val
        g2h = u**h2 * self._e_ratio(h2)
        g1 = u * self.e1
        r = np.empty(self.n)
        r[1:] = a - b * g2h - c * g1
        dt = self.delta / t_val
        r[0] = (a - 2.0 * b * dt**h2 / ((1.0 + h2) * (2.0 + h2))
                - c * dt / 3.0)
        r *= scale
        r[self.delta + np.arange(self.n) * self.delta > t_val * (1 + 1e-12)] = 0.0
        return r

    def expected_curve(self, hij: float, hbar: float, scale: float,
                       t_val: float) -> np.ndarray:
        return _expected_curve(self.cov_sequence(hij, hbar, scale, t_val),
                               self.n, self.taus)

    def raw_curve(self, hij: float, hbar: float, scale: float,
                  t_val: float) -> np.ndarray:
        r = self.cov_sequence(hij, hbar, scale, t_val)
        return r[np.array(self.taus)]


def _product_moment_cov(rxu: np.ndarray, ryv: np.ndarray, rxv: np.ndarray,
                        ryu: np.ndarray, n: int,
                        taus: Sequence[int]) -> np.ndarray:
    """Exact Gaussian covariance between two families of product moments,
    cov((1/N) sum_t x_t y_{t+k}, (1/N) sum_s u_s v_{s+l}), given the four
    cross-covariance sequences of the underlying jointly Gaussian series
    (demeaning ignored: it only lowers the variance slightly and these
    matrices act as weights)."""
    q = len(taus)

    def rval(r, m):
        m = np.abs(m)
        out = np.zeros(m.shape)
        ok = m < n
        out[ok] = r[m[ok]]
        return out

    s = np.empty((q, q))
    for a in range(q):
        for b in range(q):
            k, l = taus[a], taus[b]
            m = np.arange(-(n - k) + 1, n - l)
            w = np.minimum(n - l, n - k + m) - np.maximum(1, 1 + m) + 1
            w = np.clip(w, 0, None)
            term = (rval(rxu, m) * rval(ryv, m + l - k)
                    + rval(rxv, m + l) * rval(ryu, m - k))
            s[a, b] = float(np.sum(w * term)) / n**2
    return s


def _moment_vector_cov(rxx: np.ndarray, ryy: np.ndarray, rxy: np.ndarray,
                       n: int, taus: Sequence[int]) -> np.ndarray:
    """Covariance of the ((1/N) sum_t x_t y_{t+k})_k moment vector."""
    return _product_moment_cov(rxx, ryy, rxy, rxy, n, taus)


def _regularized_inverse(s: np.ndarray) -> tuple[np.ndarray, bool]:
    q = s.shape[0]
    trace = float(np.trace(s))
    if not math.isfinite(trace) or trace <= 0:
        return np.eye(q), True
    try:
        w = np.linalg.inv(s + 1e-10 * trace / q * np.eye(q))
    except np.linalg.LinAlgError:
        return np.eye(q), True
    return 0.5 * (w + w.T), False


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

def _expit(v: float) -> float:
    return 1.0 / (1.0 + math.exp(-min(max(v, -60.0), 60.0)))


def _logit(p: float) -> float:
    p = min(max(p, 1e-12), 1.0 - 1e-12)
    return math.log(p / (1.0 - p))


def _two_step_gmm(
    observed: np.ndarray,
    model: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    contributions: np.ndarray,
    bandwidth: int,
    polish: bool = True,
) -> tuple[np.ndarray, float, int, bool, np.ndarray, bool]:
    """Nelder-Mead two-step driver on unconstrained coordinates; kept for the
    free-scale fit and for comparison with the profiled path."""

    def objective(weight):
        def fun(x):
            resid = observed - model(x)
            return float(resid @ weight @ resid)
        return fun

    q = observed.size
    identity = np.eye(q)
    iterations = 0
    opts = {"xatol": SIMPLEX_TOL, "fatol": 1e-12,
            "maxiter": MAX_ITERATIONS, "maxfev": 4 * MAX_ITERATIONS}
    res1 = sopt.minimize(objective(identity), x0, method="Nelder-Mead",
                         options=opts)
    iterations += res1.nit
    nw = newey_west_weight(contributions, bandwidth)
    res2 = sopt.minimize(objective(nw.weight), res1.x, method="Nelder-Mead",
                         options=opts)
    iterations += res2.nit
    best_x, best_fun, converged = res2.x, res2.fun, bool(res2.success)
    if polish:
        res3 = sopt.minimize(objective(nw.weight), best_x, method="L-BFGS-B")
        iterations += int(res3.nit)
        if res3.fun <= best_fun:
            best_x, best_fun = res3.x, res3.fun
            converged = converged or bool(res3.success)
    return (best_x, float(best_fun), int(iterations), converged, nw.weight,
            nw.fallback_identity)


@dataclass(frozen=True)
class _ProfileOutcome:
    h: float
    amp: float
    objective: float
    evals: int
    amp_at_bound: bool
    converged: bool


def _profiled_minimize(
    observed: np.ndarray,
    unit_curve: Callable[[float], np.ndarray],
    weight: np.ndarray,
    h_lo: float,
    h_hi: float,
    amp_lo: float,
    amp_hi: float,
    n_scan: int = 24,
) -> _ProfileOutcome:
    """Minimize (obs - a c(h))' W (obs - a c(h)) with the amplitude a solved
    in closed form (clipped to its box) at each roughness h: a coarse scan
    locates the basin, a bounded Brent search refines it."""
    evals = 0

    def amp_and_value(h: float) -> tuple[float, float]:
        c = unit_curve(h)
        wc = weight @ c
        denom = float(c @ wc)
        a = float(observed @ wc) / denom if denom > 0 else 0.0
        a = min(max(a, amp_lo), amp_hi)
        resid = observed - a * c
        return a, float(resid @ weight @ resid)

    hs = np.linspace(h_lo, h_hi, n_scan)
    vals = []
    for h in hs:
        vals.append(amp_and_value(h)[1])
        evals += 1
    best = int(np.argmin(vals))
    lo = hs[max(0, best - 1)]
    hi = hs[min(n_scan - 1, best + 1)]
    res = sopt.minimize_scalar(lambda h: amp_and_value(h)[1],
                               bounds=(lo, hi), method="bounded",
                               options={"xatol": 1e-7})
    evals += int(res.nfev)
    h_star = float(res.x)
    if vals[best] < res.fun:
        h_star = float(hs[best])
    amp, value = amp_and_value(h_star)
    at_bound = amp in (amp_lo, amp_hi)
    return _ProfileOutcome(h=h_star, amp=amp, objective=value, evals=evals,
                           amp_at_bound=at_bound,
                           converged=bool(res.success) or vals[best] < res.fun)


def _contribution_matrix(x: np.ndarray, y: np.ndarray,
                         taus: Sequence[int]) -> np.ndarray:
    xc = x - x.mean()
    yc = y - y.mean()
    kmax = max(taus)
    n = x.size - kmax
    cols = [xc[:n] * yc[k:k + n] for k in taus]
    return np.column_stack(cols)


def _prepare_series(series: np.ndarray,
                    mask: np.ndarray | None = None) -> np.ndarray:
    s = np.asarray(series, dtype=float)
    if s.ndim != 1:
        raise ValueError("series must be 1-d")
    valid = np.ones(s.size, bool) if mask is None else np.asarray(mask, bool)
    if valid.shape != s.shape:
        raise ValueError("mask must match the series shape")
    if not np.all(np.isfinite(s[valid])):
        raise ValueError("series must be finite where unmasked")
    if valid.sum() < 2 or float(np.var(s[valid])) == 0.0:
        raise ZeroVarianceError("zero-variance series")
    return s


def _cv_adjusted_cross_moments(
    observed: np.ndarray,
    series: tuple[np.ndarray, np.ndarray],
    model_seqs: tuple[np.ndarray, np.ndarray, np.ndarray],
    block_model: "_BlockCovModel",
    n: int,
    taus: Sequence[int],
    finite_sample_adjust: bool,
    masks: tuple = (None, None),
) -> tuple[np.ndarray, np.ndarray]:
    """Regression-adjust the cross moments by the marginal moment residuals
    (computed at the fixed marginal parameters) and return the adjusted
    observations together with the inverse of their model covariance."""
    x, y = series
    mask_i, mask_j = masks
    r_ii, r_jj, r_ij = model_seqs
    grid_obj = LagGrid(Q=len(taus), taus=tuple(taus))
    obs_ii = empirical_cross_cov(x, x, grid_obj, mask_x=mask_i,
                                 mask_y=mask_i).values
    obs_jj = empirical_cross_cov(y, y, grid_obj, mask_x=mask_j,
                                 mask_y=mask_j).values
    if finite_sample_adjust:
        model_ii = _expected_curve(r_ii, n, taus)
        model_jj = _expected_curve(r_jj, n, taus)
    else:
        idx = np.array(taus)
        model_ii, model_jj = r_ii[idx], r_jj[idx]
    marg_resid = np.concatenate([obs_ii - model_ii, obs_jj - model_jj])

    s_cc = _product_moment_cov(r_ii, r_jj, r_ij, r_ij, n, taus)
    s_c_ii = _product_moment_cov(r_ii, r_ij, r_ii, r_ij, n, taus)
    s_c_jj = _product_moment_cov(r_ij, r_jj, r_ij, r_jj, n, taus)
    s_ii_ii = _product_moment_cov(r_ii, r_ii, r_ii, r_ii, n, taus)
    s_jj_jj = _product_moment_cov(r_jj, r_jj, r_jj, r_jj, n, taus)
    s_ii_jj = _product_moment_cov(r_ij, r_ij, r_ij, r_ij, n, taus)
    s_mm = np.block([[s_ii_ii, s_ii_jj], [s_ii_jj.T, s_jj_jj]])
    s_cm = np.hstack([s_c_ii, s_c_jj])
    mm_inv, _ = _regularized_inverse(s_mm)
    beta = s_cm @ mm_inv
    adjusted = observed - beta @ marg_resid
    s_adj = s_cc - beta @ s_cm.T
    weight, _ = _regularized_inverse(0.5 * (s_adj + s_adj.T))
    return adjusted, weight


def _second_stage_weight(
    weight_mode: str,
    series_pair: tuple[np.ndarray, np.ndarray],
    model_seqs: tuple[np.ndarray, np.ndarray, np.ndarray],
    n: int,
    taus: Sequence[int],
) -> tuple[np.ndarray, bool]:
    if weight_mode == "model":
        s = _moment_vector_cov(*model_seqs, n, taus)
        return _regularized_inverse(s)
    if weight_mode == "hac":
        contributions = _contribution_matrix(*series_pair, taus)
        bandwidth = min(int(n ** (1.0 / 3.0)), contributions.shape[0] - 1)
        nw = newey_west_weight(contributions, bandwidth)
        return nw.weight, nw.fallback_identity
    raise ValueError(f"unknown weight_mode {weight_mode!r}")


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

def calibrate_univariate(
    logvol: np.ndarray,
    delta: float,
    grid: LagGrid | None = None,
    fix_T: float | None = None,
    t_max: float | None = None,
    polish: bool = True,
    finite_sample_adjust: bool = True,
    optimizer: str = "profile",
    weight_mode: str = "model",
    mask: np.ndarray | None = None,
) -> GmmResult:
    """Fit (H, lambda^2) from one log-volatility series by matching its
    autocovariance curve; the scale T is fixed by the caller or, when
    ``fix_T`` is None, fitted inside [N delta, t_max] (free-scale fits use
    the Nelder-Mead path since the curve is then nonlinear in two
    parameters).

    The theoretical guarantees behind the moment matching are proved for
    H < 1/4; the estimator is exposed on the whole (0, 1/2) box.  ``mask``
    marks valid observations (imputed market entries are excluded from the
    empirical moments; the theoretical side assumes the gaps are sparse)."""
    s = _prepare_series(logvol, mask)
    n = s.size
    grid = (grid or LagGrid.default()).restrict(n)
    free_t = fix_T is None
    t_floor = n * delta
    t_cap = t_max if t_max is not None else 16.0 * t_floor
    if free_t and t_cap <= t_floor:
        raise ValueError("t_max must exceed N * delta for a free scale")
    if not free_t and max(grid.taus) * delta + delta > fix_T:
        # keep only lags whose blocks fit inside the correlation window
        grid = grid.restrict(int(math.floor((fix_T - delta) / delta)))
    taus = np.array(grid.taus)
    observed = empirical_cross_cov(s, s, grid, mask_x=mask, mask_y=mask).values
    block_model = _BlockCovModel(n, delta, grid.taus)

    def curve(h: float, scale: float, t_val: float) -> np.ndarray:
        if finite_sample_adjust:
            return block_model.expected_curve(h, h, scale, t_val)
        return block_model.raw_curve(h, h, scale, t_val)

    notes: list[str] = []
    if free_t or optimizer == "nelder-mead":
        def unpack(x):
            h = 0.5 * _expit(x[0])
            lam2 = math.exp(min(x[1], 50.0))
            t_val = (t_floor + (t_cap - t_floor) * _expit(x[2])) if free_t else fix_T
            return h, lam2, t_val

        def model(x):
            h, lam2, t_val = unpack(x)
            return curve(h, lam2, t_val)

        x0 = [_logit(INIT_H / 0.5), math.log(INIT_LAMBDA2)]
        if free_t:
            x0.append(_logit(0.25))
        contributions = _contribution_matrix(s, s, grid.taus)
        bandwidth = min(int(n ** (1.0 / 3.0)), contributions.shape[0] - 1)
        x, fun, iters, converged, weight, fallback = _two_step_gmm(
            observed, model, np.array(x0), contributions, bandwidth, polish)
        h, lam2, t_val = unpack(x)
        if fallback:
            notes.append("identity-weight-fallback")
    else:
        t_val = fix_T
        unit = lambda h: curve(h, 1.0, t_val)
        identity = np.eye(len(grid.taus))
        first = _profiled_minimize(observed, unit, identity,
                                   1e-4, 0.4999, _AMP_FLOOR, math.inf)
        r1 = block_model.cov_sequence(first.h, first.h,
                                      max(first.amp, _AMP_FLOOR), t_val)
        weight, fallback = _second_stage_weight(
            weight_mode, (s, s), (r1, r1, r1), n, grid.taus)
        second = _profiled_minimize(observed, unit, weight,
                                    1e-4, 0.4999, _AMP_FLOOR, math.inf)
        h, lam2 = second.h, second.amp
        fun = second.objective
        iters = first.evals + second.evals
        converged = first.converged and second.converged and not second.amp_at_bound
        if fallback:
            notes.append("identity-weight-fallback")
        if second.amp_at_bound:
            notes.append("amplitude-at-bound")
    assert 0.0 < h < 0.5 and lam2 > 0.0
    residuals = CovCurve(taus.astype(float), observed - curve(h, lam2, t_val),
                         meta={"statistic": "gmm-residual", "n": n,
                               "lag_units": "delta"})
    return GmmResult(params={"H": h, "lambda2": lam2, "T": t_val},
                     objective=float(fun), iterations=int(iters),
                     converged=bool(converged), weight=weight,
                     residuals=residuals, notes=tuple(notes))


def calibrate_pair(
    logvol_i: np.ndarray,
    logvol_j: np.ndarray,
    lambda_i2: float,
    lambda_j2: float,
    H_i: float,
    H_j: float,
    delta: float,
    grid: LagGrid | None = None,
    T: float | None = None,
    polish: bool = True,
    finite_sample_adjust: bool = True,
    optimizer: str = "profile",
    weight_mode: str = "model",
    mask_i: np.ndarray | None = None,
    mask_j: np.ndarray | None = None,
) -> GmmResult:
    """Fit (g, H_ij) for one pair with the marginal parameters held fixed.

    The constraints |g| <= 1 and H_ij >= (H_i + H_j)/2 hold at every iterate
    (amplitude box / bounded roughness bracket, equivalent to the tanh and
    scaled-logistic reparametrization of the same objective); the derived
    amplitude xi_ij = g sqrt(lambda_i^2 lambda_j^2) is returned alongside.
    """
    x = _prepare_series(logvol_i, mask_i)
    y = _prepare_series(logvol_j, mask_j)
    if x.size != y.size:
        raise ValueError("series must be aligned")
    n = x.size
    t_val = T if T is not None else n * delta
    grid = (grid or LagGrid.default()).restrict(n)
    if max(grid.taus) * delta + delta > t_val:
        grid = grid.restrict(int(math.floor((t_val - delta) / delta)))
    taus = np.array(grid.taus)
    observed = empirical_cross_cov(x, y, grid, mask_x=mask_i,
                                   mask_y=mask_j).values
    lam = math.sqrt(lambda_i2 * lambda_j2)
    hbar = 0.5 * (H_i + H_j)
    block_model = _BlockCovModel(n, delta, grid.taus)

    def curve(hij: float, scale: float) -> np.ndarray:
        if finite_sample_adjust:
            return block_model.expected_curve(hij, hbar, scale, t_val)
        return block_model.raw_curve(hij, hbar, scale, t_val)

    h_lo = hbar + 1e-6
    h_hi = 0.4999
    notes: list[str] = []
    if optimizer == "nelder-mead":
        def unpack(z):
            return math.tanh(z[0]), hbar + (0.5 - hbar) * _expit(z[1])

        def model(z):
            g, hij = unpack(z)
            return curve(hij, lam * g)

        h0 = INIT_H if INIT_H > hbar else 0.5 * (hbar + 0.5)
        x0 = np.array([math.atanh(INIT_G),
                       _logit((h0 - hbar) / (0.5 - hbar))])
        contributions = _contribution_matrix(x, y, grid.taus)
        bandwidth = min(int(n ** (1.0 / 3.0)), contributions.shape[0] - 1)
        z, fun, iters, converged, weight, fallback = _two_step_gmm(
            observed, model, x0, contributions, bandwidth, polish)
        g, hij = unpack(z)
        if fallback:
            notes.append("identity-weight-fallback")
    else:
        unit = lambda hij: curve(hij, 1.0)
        identity = np.eye(len(grid.taus))
        first = _profiled_minimize(observed, unit, identity,
                                   h_lo, h_hi, -lam, lam)
        r_ii = block_model.cov_sequence(
            max(H_i, 1e-4), max(H_i, 1e-4), lambda_i2, t_val)
        r_jj = block_model.cov_sequence(
            max(H_j, 1e-4), max(H_j, 1e-4), lambda_j2, t_val)
        r_ij = block_model.cov_sequence(first.h, hbar, first.amp, t_val)
        if weight_mode == "model":
            # stack the (fixed) marginal moment conditions as control
            # variates: their errors are strongly correlated with the cross
            # moments, so the regression adjustment sharpens the fit without
            # moving its expectation
            target, weight = _cv_adjusted_cross_moments(
                observed, (x, y), (r_ii, r_jj, r_ij), block_model, n,
                grid.taus, finite_sample_adjust, (mask_i, mask_j))
            fallback = False
        else:
            target = observed
            weight, fallback = _second_stage_weight(
                weight_mode, (x, y), (r_ii, r_jj, r_ij), n, grid.taus)
        second = _profiled_minimize(target, unit, weight,
                                    h_lo, h_hi, -lam, lam)
        hij = second.h
        g = second.amp / lam
        fun = second.objective
        iters = first.evals + second.evals
        converged = first.converged and second.converged
        if fallback:
            notes.append("identity-weight-fallback")
        if second.amp_at_bound:
            notes.append("correlation-at-bound")
    g = min(max(g, -1.0), 1.0)
    assert abs(g) <= 1.0 and hbar <= hij < 0.5
    residuals = CovCurve(taus.astype(float), observed - curve(hij, lam * g),
                         meta={"statistic": "gmm-residual", "n": n,
                               "lag_units": "delta"})
    return GmmResult(
        params={"g": g, "H_ij": hij, "xi_ij": g * lam, "T": t_val},
        objective=float(fun), iterations=int(iters), converged=bool(converged),
        weight=weight, residuals=residuals, notes=tuple(notes))


@dataclass(frozen=True)
class PanelCalibration:
    h_mat: np.ndarray
    xi_mat: np.ndarray
    g_mat: np.ndarray
    marginals: dict
    pairs: dict
    failures: dict
    xi_eigenvalues: np.ndarray | None
    validation: ValidationReport | None
    T: float

    @property
    def d(self) -> int:
        return self.h_mat.shape[0]

    @property
    def complete(self) -> bool:
        return not self.failures

    @property
    def converged_pair_fraction(self) -> float:
        if not self.pairs:
            return 1.0
        done = sum(1 for r in self.pairs.values() if r.converged)
        return done / len(self.pairs)

    def to_params(self) -> ModelParams:
        if not self.complete:
            raise CalibrationError(
                f"panel calibration incomplete: {sorted(self.failures)}")
        return ModelParams(T=self.T, H=self.h_mat, xi=self.xi_mat)


def calibrate_panel(
    panel: FieldPanel,
    grid: LagGrid | None = None,
    T: float | None = None,
    workers: int | None = None,
    polish: bool = True,
    mask: np.ndarray | None = None,
) -> PanelCalibration:
    """d marginal fits followed by d(d-1)/2 pair fits on an aligned panel of
    log-volatility proxies.  A failed marginal aborts its dependent pairs
    (recorded per pair); positive semidefiniteness of the assembled amplitude
    matrix is reported via its eigenvalues, not enforced.  ``mask`` (d x n,
    True = valid) excludes imputed entries from the empirical moments."""
    d = panel.d
    delta = panel.delta
    t_val = T if T is not None else panel.n * delta
    if mask is not None:
        mask = np.asarray(mask, bool)
        if mask.shape != panel.data.shape:
            raise ValueError("mask shape must match the panel")
    row_mask = (lambda i: None) if mask is None else (lambda i: mask[i])
    marginals: dict = {}
    failures: dict = {}
    for i in range(d):
        try:
            marginals[i] = calibrate_univariate(
                panel.data[i], delta, grid=grid, fix_T=t_val, polish=polish,
                mask=row_mask(i))
        except (ZeroVarianceError, ValueError, CalibrationError) as exc:
            failures[f"marginal-{i}"] = str(exc)

    todo = [(i, j) for i in range(d) for j in range(i + 1, d)]
    pairs: dict = {}

    def fit_pair(ij):
        i, j = ij
        if i not in marginals or j not in marginals:
            raise CalibrationError("marginal fit missing")
        mi, mj = marginals[i].params, marginals[j].params
        return calibrate_pair(
            panel.data[i], panel.data[j],
            lambda_i2=mi["lambda2"], lambda_j2=mj["lambda2"],
            H_i=mi["H"], H_j=mj["H"], delta=delta, grid=grid, T=t_val,
            polish=polish, mask_i=row_mask(i), mask_j=row_mask(j))

    n_workers = workers if workers is not None else default_workers()
    if todo:
        with ThreadPoolExecutor(max_workers=max(1, n_workers)) as pool:
            futures = {ij: pool.submit(fit_pair, ij) for ij in todo}
        for ij in todo:  # deterministic merge order
            try:
                pairs[ij] = futures[ij].result()
            except Exception as exc:
                failures[f"pair-{ij[0]}-{ij[1]}"] = str(exc)

    h_mat = np.full((d, d), np.nan)
    xi_mat = np.full((d, d), np.nan)
    g_mat = np.full((d, d), np.nan)
    for i, res in marginals.items():
        h_mat[i, i] = res.params["H"]
        xi_mat[i, i] = res.params["lambda2"]
        g_mat[i, i] = 1.0
    for (i, j), res in pairs.items():
        h_mat[i, j] = h_mat[j, i] = res.params["H_ij"]
        xi_mat[i, j] = xi_mat[j, i] = res.params["xi_ij"]
        g_mat[i, j] = g_mat[j, i] = res.params["g"]

    eigs = None
    report = None
    if not failures:
        eigs = np.linalg.eigvalsh(0.5 * (xi_mat + xi_mat.T))
        report = validate(ModelParams(T=t_val, H=h_mat, xi=xi_mat))
    return PanelCalibration(h_mat=h_mat, xi_mat=xi_mat, g_mat=g_mat,
                            marginals=marginals, pairs=pairs,
                            failures=failures, xi_eigenvalues=eigs,
                            validation=report, T=t_val)


# ---------------------------------------------------------------------------
# Monte-Carlo validation harness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class McConfig:
    """``n_list`` holds numbers of calibration observations: each replica
    simulates a field of length n * agg at step ``delta`` and aggregates by
    ``agg``, so the calibrated series has exactly n points and T keeps the
    value from ``params`` across the sweep."""

    params: ModelParams
    n_list: tuple[int, ...]
    replicas: int
    seed: int
    agg: int = 16
    proxy: str = "gaussian"      # "gaussian" | "measure"
    delta: float = 1.0
    grid: LagGrid | None = None
    workers: int | None = None
    polish: bool = True
    max_failure_fraction: float = 0.2

    def __post_init__(self):
        if self.proxy not in ("gaussian", "measure"):
            raise ValueError("proxy mode must be 'gaussian' or 'measure'")
        if self.replicas < 1:
            raise ValueError("replicas must be >= 1")
        if self.params.d < 2:
            raise ValueError("the validation harness needs d >= 2")


@dataclass(frozen=True)
class McRun:
    n: int
    seed: int
    samples: dict
    n_failures: int

    def means(self) -> dict:
        return {k: float(np.mean(v)) for k, v in self.samples.items()}

    def stds(self) -> dict:
        out = {}
        for k, v in self.samples.items():
            out[k] = float(np.std(v, ddof=1)) if len(v) > 1 else float("nan")
        return out


@dataclass(frozen=True)
class McReport:
    runs: tuple
    slopes: dict | None
    replicas: int
    seed: int
    notes: tuple = ()

    def run_for(self, n: int) -> McRun:
        for run in self.runs:
            if run.n == n:
                return run
        raise KeyError(f"no run with n={n}")

    def to_dict(self) -> dict:
        return {
            "replicas": self.replicas,
            "seed": self.seed,
            "notes": list(self.notes),
            "slopes": self.slopes,
            "runs": [
                {"n": r.n, "seed": r.seed, "n_failures": r.n_failures,
                 "means": r.means(), "stds": r.stds()}
                for r in self.runs
            ],
        }

    def replica_rows(self):
        """(n, replica, parameter, value) rows for the per-replica CSV."""
        for run in self.runs:
            length = max((len(v) for v in run.samples.values()), default=0)
            for rep in range(length):
                for name, vals in sorted(run.samples.items()):
                    if rep < len(vals):
                        yield run.n, rep, name, float(vals[rep])


_PARAM_KEYS = ("H_0", "lambda2_0", "H_1", "lambda2_1", "H_01", "g_01", "xi_01")


def _one_replica(config: McConfig, n_field: int, run_seed: int,
                 replica: int) -> dict:
    panels, _ = simulate_field(config.params, n_field, config.delta,
                               seed=run_seed, n_paths=1, first_path=replica)
    panel = panels[0]
    if config.proxy == "gaussian":
        agg_panel = field_to_gaussian_proxy(panel, config.params, config.agg)
    else:
        agg_panel = field_to_measure(panel, config.params, config.agg)
    t_true = config.params.T
    res0 = calibrate_univariate(agg_panel.data[0], agg_panel.delta,
                                grid=config.grid, fix_T=t_true,
                                polish=config.polish)
    res1 = calibrate_univariate(agg_panel.data[1], agg_panel.delta,
                                grid=config.grid, fix_T=t_true,
                                polish=config.polish)
    pair = calibrate_pair(
        agg_panel.data[0], agg_panel.data[1],
        lambda_i2=res0.params["lambda2"], lambda_j2=res1.params["lambda2"],
        H_i=res0.params["H"], H_j=res1.params["H"],
        delta=agg_panel.delta, grid=config.grid, T=t_true,
        polish=config.polish)
    return {
        "H_0": res0.params["H"], "lambda2_0": res0.params["lambda2"],
        "H_1": res1.params["H"], "lambda2_1": res1.params["lambda2"],
        "H_01": pair.params["H_ij"], "g_01": pair.params["g"],
        "xi_01": pair.params["xi_ij"],
    }


def mc_validate(config: McConfig) -> McReport:
    """simulate -> calibrate -> collect, for every series length in the
    sweep; with three or more lengths the log-std versus log-length slope is
    fitted per parameter (theory: about -1/2)."""
    runs = []
    notes: list[str] = []
    workers = config.workers if config.workers is not None else default_workers()
    for n_idx, n in enumerate(config.n_list):
        run_seed = config.seed + 1009 * n_idx
        n_field = n * config.agg
        # warm the shared spectral factorization before fanning out
        _spectral_factor(config.params, n_field, config.delta)
        estimates: list = [None] * config.replicas
        failures = 0
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            futures = [
                pool.submit(_one_replica, config, n_field, run_seed, rep)
                for rep in range(config.replicas)
            ]
        for rep, fut in enumerate(futures):
            try:
                estimates[rep] = fut.result()
            except Exception:
                failures += 1
        kept = [e for e in estimates if e is not None]
        if failures > config.max_failure_fraction * config.replicas:
            raise McValidationError(
                f"{failures}/{config.replicas} replicas failed at n={n}")
        samples = {key: np.array([e[key] for e in kept]) for key in _PARAM_KEYS}
        if config.replicas == 1:
            notes.append(f"n={n}: single replica, standard deviations undefined")
        runs.append(McRun(n=n, seed=run_seed, samples=samples,
                          n_failures=failures))

    slopes = None
    if len(config.n_list) >= 3 and config.replicas > 1:
        slopes = {}
        log_n = np.log([run.n for run in runs])
        for key in _PARAM_KEYS:
            stds = np.array([run.stds()[key] for run in runs])
            if np.all(np.isfinite(stds)) and np.all(stds > 0):
                slopes[key] = float(np.polyfit(log_n, np.log(stds), 1)[0])
            else:
                slopes[key] = float("nan")
    return McReport(runs=tuple(runs), slopes=slopes, replicas=config.replicas,
                    seed=config.seed, notes=tuple(notes))
