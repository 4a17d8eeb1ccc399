"""Spin-photon avoided crossings and spin concentration.

A photon mode at ``fp`` couples to a spin line linearised around the
crossing, ``fs(B) = a + b*B``. The lossless coupled-oscillator normal modes
are

    f±^2 = (fs^2 + fp^2 ± sqrt((fs^2 - fp^2)^2 + 4 d^2 fs^2 fp^2)) / 2,

with the normalised coupling ``d = 2 g / fp``; on resonance ``f+ - f- ≈ 2g``.
All frequencies are ordinary frequencies in Hz.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import constants
from .errors import DegenerateFitError
from .lsq import check_rank, levenberg_marquardt

PARAMS = ("fp_hz", "spin_intercept_hz", "spin_slope_hz_per_tesla", "g_hz")


@dataclass(frozen=True)
class CrossingModel:
    fp_hz: float
    spin_intercept_hz: float
    spin_slope_hz_per_tesla: float
    g_hz: float

    def __post_init__(self):
        if not self.fp_hz > 0:
            raise ValueError("fp_hz must be > 0")
        if self.g_hz < 0:
            raise ValueError("g_hz must be >= 0")

    @property
    def delta_ps(self) -> float:
        return 2.0 * self.g_hz / self.fp_hz

    def spin_freq(self, field):
        return self.spin_intercept_hz + self.spin_slope_hz_per_tesla * np.asarray(field, dtype=float)

    @property
    def crossing_field(self) -> float:
        """Field where the bare spin line meets the photon mode."""
        return (self.fp_hz - self.spin_intercept_hz) / self.spin_slope_hz_per_tesla

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in PARAMS}
        d["delta_ps"] = self.delta_ps
        d["crossing_field_tesla"] = self.crossing_field
        return d


def _branches(fs, fp, g):
    """Normal-mode frequencies; the lower root comes from the product of roots."""
    fs = np.asarray(fs, dtype=float)
    d = 2.0 * g / fp
    s2, p2 = fs * fs, fp * fp
    disc = np.sqrt((s2 - p2) ** 2 + 4.0 * d * d * s2 * p2)
    wp2 = 0.5 * (s2 + p2 + disc)
    wm2 = s2 * p2 * (1.0 - d * d) / wp2
    return np.sqrt(wp2), np.sqrt(np.maximum(wm2, 0.0))


def normal_modes(model: CrossingModel, field):
    """``(f_plus, f_minus)`` in Hz at ``field`` (scalar or array, tesla)."""
    fs = model.spin_freq(field)
    return _branches(fs, model.fp_hz, model.g_hz)


@dataclass
class CrossingFit:
    model: CrossingModel
    covariance: np.ndarray
    branch: np.ndarray
    residual_rms_hz: float
    converged: bool
    n_iter: int
    fixed: tuple = field(default_factory=tuple)

    @property
    def stderr(self) -> dict:
        return dict(zip(PARAMS, np.sqrt(np.abs(np.diag(self.covariance))).tolist()))

    def to_json(self) -> dict:
        out = self.model.to_json()
        err = self.stderr
        out["stderr"] = err
        # d(delta_ps) = 2/fp dg - 2g/fp^2 dfp
        jac = np.array([-2 * self.model.g_hz / self.model.fp_hz**2, 0.0, 0.0, 2.0 / self.model.fp_hz])
        out["delta_ps_stderr"] = float(np.sqrt(max(jac @ self.covariance @ jac, 0.0)))
        jb = np.array(
            [
                1.0 / self.model.spin_slope_hz_per_tesla,
                -1.0 / self.model.spin_slope_hz_per_tesla,
                -self.model.crossing_field / self.model.spin_slope_hz_per_tesla,
                0.0,
            ]
        )
        out["crossing_field_stderr"] = float(np.sqrt(max(jb @ self.covariance @ jb, 0.0)))
        out["covariance"] = self.covariance.tolist()
        out["residual_rms_hz"] = self.residual_rms_hz
        out["converged"] = self.converged
        out["n_iter"] = self.n_iter
        out["fixed"] = list(self.fixed)
        out["n_upper"] = int(np.sum(self.branch == 1))
        out["n_lower"] = int(np.sum(self.branch == 0))
        return out


def fit_crossing(
    fields,
    freqs,
    guess: CrossingModel,
    *,
    fix=(),
    sigma_hz: float | None = None,
    max_outer: int = 20,
    hysteresis: float = 3.0,
) -> CrossingFit:
    """Least-squares fit of the normal-mode branches to ``(field, freq)`` points.

    Every point belongs to one branch. Assignments start at the nearer
    branch of ``guess`` and are revisited after each inner fit: a point
    changes branch only when the other one is closer by more than
    ``hysteresis`` times the noise scale (``sigma_hz``, or the current
    residual RMS).

    ``fix`` names parameters from ``PARAMS`` held at their guess value
    (e.g. the slope when it is known from the spin Hamiltonian).

    Raises
    ------
    DegenerateFitError
        Fewer than 8 points, or no point within 100 g of the crossing, or
        every point on one branch.
    """
    b = np.asarray(fields, dtype=float).ravel()
    y = np.asarray(freqs, dtype=float).ravel()
    if b.size != y.size:
        raise ValueError("fields and freqs differ in length")
    if b.size < 8:
        raise DegenerateFitError(f"need at least 8 points, got {b.size}")
    fix = tuple(fix)
    for name in fix:
        if name not in PARAMS:
            raise ValueError(f"unknown parameter {name!r}; choose from {PARAMS}")
    free = [i for i, n in enumerate(PARAMS) if n not in fix]

    # internal coordinates: fields relative to their mean, frequencies
    # relative to the median and in units of a scale near g
    b0 = float(np.mean(b))
    db = b - b0
    bs = max(float(np.ptp(b)), 1e-12)
    f0 = float(np.median(y))
    fsc = max(guess.g_hz, 1e-6 * abs(f0), 1.0)

    def to_internal(m: CrossingModel):
        a_c = m.spin_intercept_hz + m.spin_slope_hz_per_tesla * b0
        return np.array([(m.fp_hz - f0) / fsc, (a_c - f0) / fsc, m.spin_slope_hz_per_tesla * bs / fsc, m.g_hz / fsc])

    def from_internal(p):
        fp = f0 + fsc * p[0]
        slope = p[2] * fsc / bs
        a = f0 + fsc * p[1] - slope * b0
        return fp, a, slope, abs(fsc * p[3])

    full0 = to_internal(guess)
    # d(physical)/d(internal) for covariance mapping
    T = np.zeros((4, 4))
    T[0, 0] = fsc
    T[1, 1] = fsc
    T[1, 2] = -fsc / bs * b0
    T[2, 2] = fsc / bs
    T[3, 3] = fsc

    def model_branches(full):
        fp = f0 + fsc * full[0]
        fs = f0 + fsc * full[1] + fsc * full[2] * db / bs
        return _branches(fs, fp, abs(fsc * full[3]))

    def assemble(pfree):
        full = full0.copy()
        full[free] = pfree
        return full

    def check_degenerate(full):
        fp, a, slope, g = from_internal(full)
        det = np.abs(a + slope * b - fp)
        if np.all(det > 100.0 * max(g, 1e-300)):
            raise DegenerateFitError("all points are detuned by more than 100 g from the crossing; g is unidentifiable")

    check_degenerate(full0)
    up, lo = model_branches(full0)
    branch = (np.abs(y - up) < np.abs(y - lo)).astype(int)
    if branch.min() == branch.max():
        # guess crossing misplaced relative to the data: split about fp instead
        branch = (y >= guess.fp_hz).astype(int)

    res = None
    n_iter = 0
    for _ in range(max_outer):
        if branch.min() == branch.max():
            raise DegenerateFitError("all points lie on one branch; g is unidentifiable")

        def resid(pfree, branch=branch):
            u, l = model_branches(assemble(pfree))
            return (np.where(branch == 1, u, l) - y) / fsc

        start = full0[free] if res is None else res.params
        res = levenberg_marquardt(resid, start, scale=np.maximum(np.abs(start), 1.0))
        n_iter += res.n_iter
        full = assemble(res.params)
        u, l = model_branches(full)
        du, dl = np.abs(y - u), np.abs(y - l)
        scale = sigma_hz if sigma_hz is not None else float(np.sqrt(np.mean(np.minimum(du, dl) ** 2)))
        margin = hysteresis * scale
        new = branch.copy()
        new[(branch == 1) & (dl + margin < du)] = 0
        new[(branch == 0) & (du + margin < dl)] = 1
        if np.array_equal(new, branch):
            break
        branch = new

    full = assemble(res.params)
    check_degenerate(full)
    if branch.min() == branch.max():
        raise DegenerateFitError("all points lie on one branch; g is unidentifiable")
    check_rank(res.jacobian, [PARAMS[i] for i in free])
    fp, a, slope, g = from_internal(full)
    cov_int = np.zeros((4, 4))
    cov_int[np.ix_(free, free)] = res.covariance
    if sigma_hz is not None:
        # known noise: rescale from the a-posteriori residual variance
        dof = max(y.size - len(free), 1)
        s2 = res.cost / dof
        if s2 > 0:
            cov_int *= (sigma_hz / fsc) ** 2 / s2
    if full[3] < 0:
        cov_int[3, :] *= -1
        cov_int[:, 3] *= -1
    cov = T @ cov_int @ T.T
    rms = float(np.sqrt(np.mean(res.residuals**2))) * fsc
    return CrossingFit(CrossingModel(fp, a, slope, g), cov, branch, rms, res.converged, n_iter, fix)


@dataclass(frozen=True)
class ConcentrationInput:
    g_hz: float
    fp_hz: float
    lande_g: float
    filling_factor: float = 1.0
    g_sigma: float = 0.0
    fp_sigma: float = 0.0
    lande_g_sigma: float = 0.0
    filling_factor_sigma: float = 0.0

    def __post_init__(self):
        for name in ("g_hz", "fp_hz", "lande_g", "filling_factor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.filling_factor > 1:
            raise ValueError("filling_factor must be <= 1")
        for name in ("g_sigma", "fp_sigma", "lande_g_sigma", "filling_factor_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def concentration(inp: ConcentrationInput) -> tuple[float, float]:
    """Spin density (cm^-3) and its 1-sigma uncertainty from a coupling rate.

    Inverts ``g = g_L mu_B sqrt(mu0 fp n xi / (4 hbar))`` with ``g`` and
    ``fp`` entered as ordinary frequencies in Hz.
    """
    mu_b = constants.mu_b()
    n_m3 = 4.0 * constants.hbar() * inp.g_hz**2 / (
        inp.lande_g**2 * mu_b**2 * constants.MU_0 * inp.fp_hz * inp.filling_factor
    )
    rel = math.sqrt(
        (2.0 * inp.g_sigma / inp.g_hz) ** 2
        + (2.0 * inp.lande_g_sigma / inp.lande_g) ** 2
        + (inp.fp_sigma / inp.fp_hz) ** 2
        + (inp.filling_factor_sigma / inp.filling_factor) ** 2
    )
    n = n_m3 * 1e-6
    return n, n * rel


def coupling_rate(n_cm3: float, fp_hz: float, lande_g: float, filling_factor: float = 1.0) -> float:
    """Forward relation: coupling rate (Hz) for spin density ``n_cm3``."""
    n_m3 = n_cm3 * 1e6
    return lande_g * constants.mu_b() * math.sqrt(
        constants.MU_0 * fp_hz * n_m3 * filling_factor / (4.0 * constants.hbar())
    )


def guess_crossing(fields, freqs, crossing_field, slope_hz_per_tesla, fp_hz=None) -> CrossingModel:
    """Starting model from dispersive-tail data around a known crossing field.

    ``fp`` defaults to the median frequency; ``g`` comes from the median of
    ``|(f - fp) * b * (B - Bc)|``, which equals ``g^2`` in the dispersive limit.
    """
    b = np.asarray(fields, dtype=float)
    y = np.asarray(freqs, dtype=float)
    fp = float(np.median(y)) if fp_hz is None else float(fp_hz)
    g0 = math.sqrt(max(float(np.median(np.abs((y - fp) * slope_hz_per_tesla * (b - crossing_field)))), 1.0))
    return CrossingModel(fp, fp - slope_hz_per_tesla * crossing_field, slope_hz_per_tesla, g0)


def crossing_from_trace(fields, f0, site_field, site_freq, slope_hz_per_tesla, half_width_tesla=0.01, sigma_hz=None):
    """Fit the avoided crossing seen by one tracked mode around a site.

    Only the photon-like branch is tracked, and at coarse field steps it is
    seen only in its dispersive tails, where the shift ``g^2 / (b (B - Bc))``
    fixes ``g^2 / b`` but not ``g`` and ``b`` separately. The spin slope
    ``b`` is therefore held at the supplied value (from the spin
    Hamiltonian); ``fp``, the line position and ``g`` are fitted.
    """
    b = np.asarray(fields, dtype=float)
    y = np.asarray(f0, dtype=float)
    keep = np.isfinite(y) & (np.abs(b - site_field) <= half_width_tesla)
    b, y = b[keep], y[keep]
    if b.size < 8:
        raise DegenerateFitError(f"need at least 8 locked points near {site_field} T, got {b.size}")
    guess = guess_crossing(b, y, site_field, slope_hz_per_tesla, site_freq)
    return fit_crossing(b, y, guess, fix=("spin_slope_hz_per_tesla",), sigma_hz=sigma_hz)
