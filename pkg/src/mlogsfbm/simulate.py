"""Exact sampling of the coupled log-volatility field and of price paths.

The d-dimensional stationary Gaussian field is drawn by multivariate
circulant embedding: per-pair covariance sequences are periodized onto a
circulant of size M = 2^ceil(log2(2N)), Fourier transformed, and the
resulting per-frequency spectral matrices are factorized once and shared
across paths.  Because every kernel here is compactly supported (zero beyond
the correlation scale T), the periodized spectrum samples the true spectral
density and is non-negative up to rounding; negative eigenvalues are clipped
and accounted for in the diagnostics.

Randomness is counter-based (Philox) keyed by (seed, path index), so any
path can be regenerated independently of the others.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .params import ModelParams, mu_i, require_admissible

__all__ = [
    "FieldPanel",
    "PricePanel",
    "EmbeddingDiagnostics",
    "EmbeddingError",
    "SimulationError",
    "simulate_field",
    "field_to_measure",
    "field_to_gaussian_proxy",
    "simulate_prices",
    "write_panel_csv",
    "read_panel_csv",
    "write_panel_binary",
    "read_panel_binary",
]

PROVENANCES = ("gaussian-field", "logvol-measure", "gaussian-average-proxy", "market")

# relative clipped spectral mass thresholds
CLIP_EXACT = 1e-6
CLIP_APPROX = 1e-3

_EXP_OVERFLOW = 700.0

_MAGIC = b"MSFB1"

_SEED_MASK = (1 << 64) - 1
_PRICE_STREAM = 0x9E3779B97F4A7C15  # distinct Philox stream for price noise


class EmbeddingError(RuntimeError):
    def __init__(self, message: str, diagnostics: "EmbeddingDiagnostics | None" = None):
        super().__init__(message)
        self.diagnostics = diagnostics


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class EmbeddingDiagnostics:
    embedding_size: int
    min_eigenvalues: np.ndarray  # per-frequency minimum, length M
    clipped_mass: float          # relative clipped spectral mass
    flag: str                    # "exact" | "approximate"

    def __post_init__(self):
        object.__setattr__(self, "min_eigenvalues",
                           np.asarray(self.min_eigenvalues, dtype=float))

    @property
    def exact(self) -> bool:
        return self.flag == "exact"

    def to_dict(self) -> dict:
        return {
            "embedding_size": self.embedding_size,
            "clipped_mass": self.clipped_mass,
            "min_eigenvalue": float(self.min_eigenvalues.min()),
            "argmin_frequency": int(self.min_eigenvalues.argmin()),
            "flag": self.flag,
        }


def _check_values(data: np.ndarray, provenance: str):
    if np.any(np.isnan(data)) or np.any(np.isposinf(data)):
        raise ValueError("panel values must not contain NaN or +inf")
    if provenance in ("gaussian-field", "gaussian-average-proxy") and not np.all(
        np.isfinite(data)
    ):
        raise ValueError(f"{provenance} panels must be finite-valued")


@dataclass(frozen=True)
class FieldPanel:
    """d x N grid of field samples at uniform step delta.

    ``provenance`` records what the rows are: raw centered field values,
    log-measure values ln(M_Delta / Delta) (where -inf encodes a vanishing
    measure), block-averaged Gaussian proxies, or market observations.
    """

    data: np.ndarray
    delta: float
    seed: int
    provenance: str
    path: int = 0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 2:
            raise ValueError(f"panel data must be 2-d, got shape {data.shape}")
        if data.shape[1] < 2:
            raise ValueError("panel needs at least 2 samples per marginal")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        _check_values(data, self.provenance)
        data = np.ascontiguousarray(data)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def d(self) -> int:
        return self.data.shape[0]

    @property
    def n(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class PricePanel:
    """d x (n_steps + 1) price paths; column 0 equals the initial values."""

    data: np.ndarray
    x0: tuple
    seed: int
    delta: float          # time step between consecutive columns
    substeps: int = 1     # sub-steps per volatility block

    def __post_init__(self):
        data = np.ascontiguousarray(np.asarray(self.data, dtype=float))
        x0 = tuple(float(v) for v in self.x0)
        if data.ndim != 2 or data.shape[0] != len(x0):
            raise ValueError("price data must be (d, n+1) matching x0")
        if not np.array_equal(data[:, 0], np.asarray(x0)):
            raise ValueError("price paths must start exactly at x0")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "x0", x0)

    @property
    def d(self) -> int:
        return self.data.shape[0]


def _covariance_sequence(params: ModelParams, i: int, j: int,
                         delta: float, m_max: int) -> np.ndarray:
    lags = np.arange(m_max + 1, dtype=float) * delta
    if i == j and params.H[i, i] == 0.0:
        return kernels.log_kernel_cov(lags, delta, float(params.xi[i, i]), params.T)
    return kernels.msfbm_cross_cov(lags, params.pair(i, j))


def _periodize(base: np.ndarray, m: int) -> np.ndarray:
    """Wrap a symmetric compactly supported sequence onto a circle of size m."""
    m_max = base.size - 1
    out = np.zeros(m)
    idx = np.arange(m)
    n_wraps = m_max // m + 1
    for n in range(-n_wraps, n_wraps + 1):
        shifted = np.abs(idx + n * m)
        mask = shifted <= m_max
        out[mask] += base[shifted[mask]]
    return out


_factor_cache: dict = {}


def clear_factor_cache():
    _factor_cache.clear()


def _spectral_matrices(params: ModelParams, n: int, delta: float):
    m = 1 << int(math.ceil(math.log2(2 * n)))
    m_max = int(math.floor(params.T / delta))
    d = params.d
    seq = np.empty((m, d, d))
    for i in range(d):
        for j in range(i, d):
            base = _covariance_sequence(params, i, j, delta, m_max)
            per = _periodize(base, m)
            seq[:, i, j] = per
            seq[:, j, i] = per
    # real part only: the periodized sequence is even, so the DFT is real
    spectra = np.fft.fft(seq, axis=0).real
    return m, spectra


def _spectral_factor(params: ModelParams, n: int, delta: float):
    key = (params.H.tobytes(), params.xi.tobytes(), params.T, n, delta)
    hit = _factor_cache.get(key)
    if hit is not None:
        return hit
    m, spectra = _spectral_matrices(params, n, delta)
    eigvals, eigvecs = np.linalg.eigh(spectra)
    total = float(np.abs(eigvals).sum())
    clipped = float(np.abs(eigvals[eigvals < 0]).sum())
    mass = clipped / total if total > 0 else 0.0
    diagnostics = EmbeddingDiagnostics(
        embedding_size=m,
        min_eigenvalues=eigvals.min(axis=1),
        clipped_mass=mass,
        flag="exact" if mass <= CLIP_EXACT else "approximate",
    )
    if mass > CLIP_APPROX:
        raise EmbeddingError(
            f"clipped spectral mass {mass:.3e} exceeds the tolerance "
            f"{CLIP_APPROX:.0e}; the requested configuration does not embed",
            diagnostics,
        )
    factor = eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))[:, None, :]
    _factor_cache[key] = (factor, diagnostics)
    return factor, diagnostics


def _path_rng(seed: int, stream: int) -> np.random.Generator:
    key = np.array([seed & _SEED_MASK, stream & _SEED_MASK], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def simulate_field(
    params: ModelParams,
    n: int,
    delta: float = 1.0,
    seed: int = 0,
    n_paths: int = 1,
    first_path: int = 0,
) -> tuple[list[FieldPanel], EmbeddingDiagnostics]:
    """Draw ``n_paths`` independent centered field panels of length ``n``.

    The spectral factorization is computed once (and cached across calls with
    identical arguments); each path consumes its own Philox stream keyed by
    (seed, path), so results are reproducible under any execution order and
    a sweep can be streamed one path at a time via ``first_path``.
    Means are *not* added here; see ``field_to_measure``.
    """
    require_admissible(params, strict_pd=True)
    if n < 2:
        raise ValueError("n must be >= 2")
    if delta <= 0:
        raise ValueError("delta must be positive")
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    if first_path < 0:
        raise ValueError("first_path must be >= 0")
    factor, diagnostics = _spectral_factor(params, n, delta)
    m = factor.shape[0]
    scale = math.sqrt(m)
    panels = []
    for path in range(first_path, first_path + n_paths):
        rng = _path_rng(seed, path)
        z = rng.standard_normal((m, params.d)) + 1j * rng.standard_normal(
            (m, params.d)
        )
        spectral = np.einsum("mij,mj->mi", factor, z)
        draws = np.fft.ifft(spectral, axis=0) * scale
        data = np.ascontiguousarray(draws.real[:n].T)
        panels.append(FieldPanel(data=data, delta=delta, seed=seed,
                                 provenance="gaussian-field", path=path))
    return panels, diagnostics


def _marginal_means(params: ModelParams, delta: float) -> np.ndarray:
    """Per-marginal mean shifts making E[exp(field + mean)] = 1; H = 0
    marginals take the grid-cutoff kernel variance."""
    means = np.empty(params.d)
    for i in range(params.d):
        h = float(params.H[i, i])
        lam2 = float(params.xi[i, i])
        if h > 0:
            means[i] = mu_i(lam2, h)
        else:
            var0 = kernels.log_kernel_cov(0.0, delta, lam2, params.T)
            means[i] = -0.5 * var0
    return means


def _check_aggregation(panel: FieldPanel, agg: int):
    if panel.provenance != "gaussian-field":
        raise ValueError(
            f"expected a gaussian-field panel, got {panel.provenance!r}")
    if agg < 1 or panel.n % agg != 0:
        raise ValueError(f"agg={agg} must be >= 1 and divide n={panel.n}")


def field_to_measure(panel: FieldPanel, params: ModelParams, agg: int) -> FieldPanel:
    """ln(M_Delta'(k Delta') / Delta') at the aggregated step Delta' = agg * delta.

    The measure is a left-endpoint Riemann sum of exp(field + mean) over each
    aggregation block.  Field entries that would overflow exp() abort with a
    diagnostic instead of propagating infinities.
    """
    _check_aggregation(panel, agg)
    shifted = panel.data + _marginal_means(params, panel.delta)[:, None]
    peak = float(shifted.max())
    if peak > _EXP_OVERFLOW:
        i, k = np.unravel_index(int(shifted.argmax()), shifted.shape)
        raise SimulationError(
            f"field value {peak:.1f} at marginal {i}, sample {k} exceeds the "
            f"exp() overflow guard ({_EXP_OVERFLOW:.0f})"
        )
    blocks = np.exp(shifted).reshape(panel.d, panel.n // agg, agg)
    with np.errstate(divide="ignore"):
        values = np.log(blocks.mean(axis=2))
    return FieldPanel(data=values, delta=panel.delta * agg, seed=panel.seed,
                      provenance="logvol-measure", path=panel.path)


def field_to_gaussian_proxy(panel: FieldPanel, params: ModelParams, agg: int) -> FieldPanel:
    """Block averages of the centered field: the linear (small-amplitude)
    stand-in for the log measure, lambda_i Omega_Delta' / Delta'."""
    _check_aggregation(panel, agg)
    values = panel.data.reshape(panel.d, panel.n // agg, agg).mean(axis=2)
    return FieldPanel(data=values, delta=panel.delta * agg, seed=panel.seed,
                      provenance="gaussian-average-proxy", path=panel.path)


def simulate_prices(
    measure_panel: FieldPanel,
    x0: Sequence[float],
    seed: int,
    substeps: int = 1,
) -> PricePanel:
    """Price paths with conditionally Gaussian increments: over block k the
    total increment variance is the measure mass M_Delta'(k), split evenly
    across ``substeps`` sub-increments.  Driving noises are independent
    across marginals and independent of the volatility field."""
    if measure_panel.provenance != "logvol-measure":
        raise ValueError(
            f"price simulation needs a logvol-measure panel, got "
            f"{measure_panel.provenance!r}")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    x0 = np.asarray(list(x0), dtype=float)
    if x0.shape != (measure_panel.d,):
        raise ValueError(f"x0 must have length {measure_panel.d}")
    d, n = measure_panel.d, measure_panel.n
    mass = measure_panel.delta * np.exp(measure_panel.data)  # block variances
    rng = _path_rng(seed, _PRICE_STREAM)
    z = rng.standard_normal((d, n, substeps))
    incr = np.sqrt(mass / substeps)[:, :, None] * z
    paths = np.empty((d, n * substeps + 1))
    paths[:, 0] = x0
    np.cumsum(incr.reshape(d, n * substeps), axis=1, out=paths[:, 1:])
    paths[:, 1:] += x0[:, None]
    return PricePanel(data=paths, x0=tuple(x0), seed=seed,
                      delta=measure_panel.delta / substeps, substeps=substeps)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def write_panel_csv(panel: FieldPanel) -> str:
    buf = io.StringIO()
    buf.write(f"# delta={panel.delta!r} provenance={panel.provenance} "
              f"seed={panel.seed} path={panel.path}\n")
    buf.write("t," + ",".join(f"m{i}" for i in range(panel.d)) + "\n")
    for k in range(panel.n):
        row = ",".join(repr(float(v)) for v in panel.data[:, k])
        buf.write(f"{k},{row}\n")
    return buf.getvalue()


def read_panel_csv(text: str) -> FieldPanel:
    lines = text.strip().splitlines()
    if len(lines) < 3 or not lines[0].startswith("#"):
        raise ValueError("not a panel CSV (missing metadata comment)")
    meta = dict(tok.split("=", 1) for tok in lines[0][1:].split())
    rows = [line.split(",")[1:] for line in lines[2:]]
    data = np.array(rows, dtype=float).T
    return FieldPanel(
        data=data,
        delta=float(meta["delta"]),
        seed=int(meta["seed"]),
        provenance=meta["provenance"],
        path=int(meta.get("path", 0)),
    )


_PROV_CODES = {name: idx for idx, name in enumerate(PROVENANCES)}


def write_panel_binary(panel: FieldPanel) -> bytes:
    header = struct.pack(
        "<5sIQdqIB",
        _MAGIC,
        panel.d,
        panel.n,
        panel.delta,
        panel.seed,
        panel.path,
        _PROV_CODES[panel.provenance],
    )
    body = np.ascontiguousarray(panel.data, dtype="<f8").tobytes()
    return header + body


def read_panel_binary(blob: bytes) -> FieldPanel:
    head_size = struct.calcsize("<5sIQdqIB")
    magic, d, n, delta, seed, path, prov = struct.unpack(
        "<5sIQdqIB", blob[:head_size])
    if magic != _MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {_MAGIC!r}")
    data = np.frombuffer(blob[head_size:], dtype="<f8", count=d * n).reshape(d, n)
    return FieldPanel(data=data.copy(), delta=delta, seed=seed,
                      provenance=PROVENANCES[prov], path=path)
