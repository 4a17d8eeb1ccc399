"""Fano / Breit-Wigner transmission lineshapes: model, fit, peak search.

The transmission magnitude model is

    |S21|(f) = amp * [1 - (q*G/2 + D)^2 / ((G/2)^2 + D^2)] + offset,

with ``D = f - f0`` and full linewidth ``G``. ``amp = 1, offset = 0`` is the
bare dimensionless form. ``amp`` is signed so a Lorentzian dip is simply
``q = 0, amp < 0``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import signal

from . import kernels
from .errors import DataError, UnfittableError
from .lsq import check_rank, levenberg_marquardt

PARAM_NAMES = ("f0_hz", "gamma_hz", "fano_q", "amp", "offset")
MIN_SAMPLES = 8


@dataclass
class Trace:
    """One transmission sweep. ``s21`` is linear magnitude."""

    freq_hz: np.ndarray
    s21: np.ndarray
    meta: dict = field(default_factory=dict)
    # dB values as read from disk, so load -> save is byte-exact
    _db: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.freq_hz = np.asarray(self.freq_hz, dtype=float)
        self.s21 = np.asarray(self.s21, dtype=float)
        if self.freq_hz.shape != self.s21.shape or self.freq_hz.ndim != 1:
            raise ValueError("freq_hz and s21 must be 1-D arrays of equal length")
        if self.freq_hz.size > 1 and np.any(np.diff(self.freq_hz) <= 0):
            raise ValueError("freq_hz must be strictly increasing")
        if np.any(self.s21 < 0):
            raise ValueError("s21 is a linear magnitude and must be >= 0")

    @classmethod
    def from_db(cls, freq_hz, s21_db, meta=None) -> "Trace":
        db = np.asarray(s21_db, dtype=float)
        return cls(freq_hz, 10.0 ** (db / 20.0), dict(meta or {}), _db=db)

    def to_db(self) -> np.ndarray:
        if self._db is not None:
            return self._db
        with np.errstate(divide="ignore"):
            return 20.0 * np.log10(self.s21)

    def window(self, lo: float, hi: float) -> "Trace":
        sel = (self.freq_hz >= lo) & (self.freq_hz <= hi)
        db = None if self._db is None else self._db[sel]
        return Trace(self.freq_hz[sel], self.s21[sel], dict(self.meta), _db=db)

    def __len__(self):
        return self.freq_hz.size


def read_trace_csv(path, meta=None) -> Trace:
    """Read a ``freq_hz,s21_db`` CSV; errors name the file and line."""
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"{path}: cannot open trace ({exc.strerror})") from exc
    freqs, dbs = [], []
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["freq_hz", "s21_db"]:
            raise DataError(f"{path}:1: expected header 'freq_hz,s21_db', got {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise DataError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
            try:
                freqs.append(float(row[0]))
                dbs.append(float(row[1]))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    try:
        return Trace.from_db(freqs, dbs, meta)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def write_trace_csv(trace: Trace, path) -> None:
    db = trace.to_db()
    with open(path, "w", newline="") as fh:
        fh.write("freq_hz,s21_db\n")
        for f, d in zip(trace.freq_hz.tolist(), db.tolist()):
            fh.write(f"{f!r},{d!r}\n")


@dataclass(frozen=True)
class FanoParams:
    f0_hz: float
    gamma_hz: float
    fano_q: float = 0.0
    amp: float = 1.0
    offset: float = 0.0

    def __post_init__(self):
        if not self.gamma_hz > 0:
            raise ValueError(f"gamma_hz must be > 0, got {self.gamma_hz}")
        if self.amp == 0 or not np.isfinite(self.amp):
            raise ValueError("amp must be finite and non-zero")

    def as_array(self) -> np.ndarray:
        return np.array([self.f0_hz, self.gamma_hz, self.fano_q, self.amp, self.offset])

    @property
    def q_factor(self) -> float:
        return self.f0_hz / self.gamma_hz

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in PARAM_NAMES}


@dataclass(frozen=True)
class QualityReport:
    q_factor: float
    covariance: np.ndarray
    residual_rms: float
    converged: bool = True
    n_iter: int = 0

    @property
    def loss_tangent(self) -> float:
        return 1.0 / self.q_factor

    @property
    def stderr(self) -> dict:
        return dict(zip(PARAM_NAMES, np.sqrt(np.abs(np.diag(self.covariance))).tolist()))

    def to_json(self) -> dict:
        return {
            "q_factor": self.q_factor,
            "loss_tangent": self.loss_tangent,
            "residual_rms": self.residual_rms,
            "converged": self.converged,
            "n_iter": self.n_iter,
            "stderr": self.stderr,
            "covariance": self.covariance.tolist(),
        }


def fano_model(params: FanoParams, f) -> np.ndarray:
    """Evaluate the lineshape at frequencies ``f`` (Hz)."""
    f = np.asarray(f, dtype=float)
    out = kernels.fano_eval(f, params.f0_hz, params.gamma_hz, params.fano_q, params.amp, params.offset)
    return out.reshape(f.shape)


def fit_fano(trace: Trace, guess: FanoParams, sigma=None, max_iter: int = 200) -> tuple[FanoParams, QualityReport]:
    """Weighted least-squares fit of the lineshape to ``trace``.

    Frequencies are mapped to ``x = (f - centre) / half_span`` and the
    magnitude to units of its peak-to-peak range before fitting; results and
    covariance are mapped back to Hz and linear magnitude.

    Raises
    ------
    UnfittableError
        Flat trace, too few samples, or a rank-deficient Jacobian.
    ValueError
        The trace spans fewer than three guess linewidths.
    """
    f, y = trace.freq_hz, trace.s21
    if f.size < MIN_SAMPLES:
        raise UnfittableError(f"need at least {MIN_SAMPLES} samples, got {f.size}")
    ptp = float(np.ptp(y))
    if ptp == 0.0 or ptp <= 1e-12 * max(float(np.max(np.abs(y))), 1e-300):
        raise UnfittableError("trace is flat: no resonance to fit")
    span = float(f[-1] - f[0])
    if span < 3.0 * guess.gamma_hz:
        raise ValueError(f"trace spans {span:.4g} Hz, less than 3 linewidths of the guess ({guess.gamma_hz:.4g} Hz)")

    fc = 0.5 * (f[0] + f[-1])
    w = 0.5 * span
    x = (f - fc) / w
    ys = ptp
    yy = y / ys
    wts = np.ones_like(y) if sigma is None else 1.0 / (np.broadcast_to(np.asarray(sigma, dtype=float), y.shape) / ys)

    def resid(p):
        return (kernels.fano_eval(x, p[0], p[1], p[2], p[3], p[4]) - yy) * wts

    p0 = np.array([(guess.f0_hz - fc) / w, guess.gamma_hz / w, guess.fano_q, guess.amp / ys, guess.offset / ys])
    typical = np.array([abs(p0[1]), abs(p0[1]), 1.0, max(abs(p0[3]), 1e-3), 1.0])
    res = levenberg_marquardt(resid, p0, scale=typical, max_iter=max_iter)
    check_rank(res.jacobian, PARAM_NAMES)

    p = res.params.copy()
    cov = res.covariance.copy()
    # (gamma, q) -> (-gamma, -q) leaves the model unchanged; keep gamma > 0
    if p[1] < 0:
        flip = np.diag([1.0, -1.0, -1.0, 1.0, 1.0])
        p = flip @ p
        cov = flip @ cov @ flip
    to_phys = np.diag([w, w, 1.0, ys, ys])
    cov = to_phys @ cov @ to_phys
    try:
        fitted = FanoParams(*(float(v) for v in (fc + w * p[0], w * p[1], p[2], ys * p[3], ys * p[4])))
    except ValueError as exc:
        raise UnfittableError(f"fit collapsed: {exc}") from exc
    rms = float(np.sqrt(np.mean((fano_model(fitted, f) - y) ** 2)))
    report = QualityReport(fitted.q_factor, cov, rms, res.converged, res.n_iter)
    return fitted, report


def noise_sigma(y) -> float:
    """Robust white-noise estimate from first differences (MAD based)."""
    d = np.diff(np.asarray(y, dtype=float))
    if d.size == 0:
        return 0.0
    return float(1.4826 * np.median(np.abs(d - np.median(d))) / math.sqrt(2.0))


def find_peaks(trace: Trace, min_prominence: float, min_q: float = 0.0) -> list[FanoParams]:
    """Locate resonances (peaks and dips) and return lineshape guesses.

    A candidate is a local extremum whose excursion from the trace median
    is at least ``min_prominence`` (linear units) and whose topographic
    prominence is at least half that. Width comes from the half-height
    crossing points. Guesses with ``f0 / gamma < min_q`` are dropped.
    """
    f, y = trace.freq_hz, trace.s21
    if f.size < 3:
        return []
    base = float(np.median(y))
    idx = np.arange(f.size, dtype=float)
    found = []
    for sign in (1.0, -1.0):
        z = sign * (y - base)
        pk, props = signal.find_peaks(z, height=min_prominence, prominence=0.5 * min_prominence)
        if pk.size == 0:
            continue
        heights = props["peak_heights"]
        widths, _, left, right = signal.peak_widths(z, pk, rel_height=0.5)
        for k, i in enumerate(pk):
            fl = np.interp(left[k], idx, f)
            fr = np.interp(right[k], idx, f)
            gamma = max(fr - fl, f[min(i + 1, f.size - 1)] - f[max(i - 1, 0)])
            found.append((f[i], gamma, sign * heights[k], heights[k]))
    # merge candidates closer than one linewidth, keeping the strongest
    found.sort(key=lambda c: -c[3])
    kept = []
    for c in found:
        if all(abs(c[0] - k[0]) > max(c[1], k[1]) for k in kept):
            kept.append(c)
    out = []
    for f0, gamma, amp, _ in sorted(kept):
        if gamma > 0 and f0 / gamma >= min_q:
            out.append(FanoParams(f0_hz=float(f0), gamma_hz=float(gamma), fano_q=0.0, amp=float(amp), offset=base))
    return out


def fwhm(f, y) -> float:
    """Full width at half maximum of a single peak sampled on ``f`` (linear interpolation)."""
    f = np.asarray(f, dtype=float)
    y = np.asarray(y, dtype=float)
    i = int(np.argmax(y))
    half = 0.5 * (y[i] + np.min(y))
    left = np.flatnonzero(y[:i] < half)
    right = np.flatnonzero(y[i:] < half) + i
    if left.size == 0 or right.size == 0:
        raise ValueError("peak does not fall below half maximum on both sides")
    a = left[-1]
    b = right[0]
    fl = np.interp(half, [y[a], y[a + 1]], [f[a], f[a + 1]])
    fr = np.interp(half, [y[b], y[b - 1]], [f[b], f[b - 1]])
    return float(fr - fl)


def census(trace: Trace, min_prominence: float, min_q: float = 0.0, half_window_lw: float = 10.0, threads: int = 1):
    """Fit every resonance found in a (zero-field) trace.

    Each guess is refined on a window of ``half_window_lw`` guess linewidths
    either side of its centre. Returns ``(params, report)`` pairs sorted by
    frequency; resonances that cannot be fitted are skipped. Fits are
    accepted strongest first, and a fit is dropped when it is narrower than
    the sample spacing, lies within a linewidth of an accepted one, or no
    longer exceeds ``min_prominence`` after accepted lines are subtracted.
    """
    guesses = find_peaks(trace, min_prominence, min_q)

    def one(g):
        sub = trace.window(g.f0_hz - half_window_lw * g.gamma_hz, g.f0_hz + half_window_lw * g.gamma_hz)
        try:
            return fit_fano(sub, replace(g, offset=float(np.median(sub.s21))))
        except (UnfittableError, ValueError):
            return None

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(one, guesses))
    else:
        results = [one(g) for g in guesses]
    # peel off: strongest first, each candidate must still stand out once
    # the accepted lines are subtracted (an asymmetric line's side lobe and
    # noise riding on it do not)
    f = trace.freq_hz
    spacing = float(np.median(np.diff(f))) if f.size > 1 else 0.0
    resid = trace.s21.copy()
    base = float(np.median(resid))
    kept = []
    for r in sorted((r for r in results if r is not None), key=lambda r: -abs(r[0].amp)):
        p = r[0]
        if p.gamma_hz < spacing or any(abs(p.f0_hz - k[0].f0_hz) < max(p.gamma_hz, k[0].gamma_hz) for k in kept):
            continue
        near = np.abs(f - p.f0_hz) <= max(p.gamma_hz, spacing)
        if not near.any() or np.max(np.sign(p.amp) * (resid[near] - base)) < min_prominence:
            continue
        kept.append(r)
        resid = resid - fano_model(replace(p, offset=0.0), f)
    return sorted(kept, key=lambda r: r[0].f0_hz)
