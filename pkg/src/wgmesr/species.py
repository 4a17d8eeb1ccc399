"""Spin-line identification: group perturbation sites into lines, match species."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import constants
from .spinham import SpinSystem, _dominant_m, _sz_gauge, build_hamiltonian, eigh, ket, spin_matrices, transition_at

RANSAC_ITERATIONS = 2000
RANSAC_TOL_HZ = 50e6
MIN_INLIERS = 4

_ROMAN = [(1000, "M"), (900, "CM"), (500, "D"), (400, "CD"), (100, "C"), (90, "XC"),
          (50, "L"), (40, "XL"), (10, "X"), (9, "IX"), (5, "V"), (4, "IV"), (1, "I")]


def roman(n: int) -> str:
    if n < 1:
        raise ValueError("roman numerals start at 1")
    out = []
    for v, s in _ROMAN:
        while n >= v:
            out.append(s)
            n -= v
    return "".join(out)


@dataclass(frozen=True)
class LineFit:
    """Straight line ``f = intercept + slope * B`` through a group of sites."""

    slope: float
    intercept: float
    members: tuple
    rms_hz: float
    r2: float
    b_min: float
    b_max: float

    def __post_init__(self):
        if len(self.members) < 3:
            raise ValueError("a line needs at least 3 member sites")
        if not 0.0 <= self.r2 <= 1.0:
            raise ValueError("r2 must lie in [0, 1]")

    def g_eff(self, delta_sz: int = 1) -> float:
        return effective_g(self.slope, delta_sz)

    def to_json(self) -> dict:
        return {
            "slope_hz_per_tesla": self.slope,
            "intercept_hz": self.intercept,
            "g_eff": self.g_eff(1),
            "members": list(self.members),
            "rms_hz": self.rms_hz,
            "r2": self.r2,
            "b_range_tesla": [self.b_min, self.b_max],
        }


@dataclass
class Regression:
    lines: list
    unassigned: list


def effective_g(slope, delta_sz: int = 1):
    """Effective Landé factor of a line: ``slope * h / (mu_B * delta_sz)``."""
    if delta_sz < 1:
        raise ValueError("delta_sz must be >= 1")
    return slope / (constants.MU_B_OVER_H * delta_sz)


def _lsq_line(b, f):
    if np.ptp(b) == 0:
        return 0.0, float(np.mean(f))
    slope, icpt = np.polyfit(b, f, 1)
    return float(slope), float(icpt)


def _make_fit(idx, b, f):
    slope, icpt = _lsq_line(b[idx], f[idx])
    r = f[idx] - (icpt + slope * b[idx])
    ss_res = float(r @ r)
    ss_tot = float(np.sum((f[idx] - f[idx].mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else min(max(1.0 - ss_res / ss_tot, 0.0), 1.0)
    return LineFit(
        slope, icpt, tuple(int(i) for i in idx), math.sqrt(ss_res / idx.size), r2,
        float(b[idx].min()), float(b[idx].max()),
    )


def regress_lines(
    sites,
    *,
    tol_hz: float = RANSAC_TOL_HZ,
    min_inliers: int = MIN_INLIERS,
    n_iter: int = RANSAC_ITERATIONS,
    seed: int = 0,
) -> Regression:
    """Group sites lying on straight lines in (field, frequency).

    Lines are found one at a time: ``n_iter`` random site pairs propose a
    line, the proposal with most sites within ``tol_hz`` wins (ties go to the
    smaller residual), its inliers are refitted by least squares, and the
    members are removed before the next search. The search stops when no
    proposal reaches ``min_inliers``. Sites are indexed by their position in
    ``sites``; objects with ``field``/``freq`` attributes or (B, f) pairs
    are accepted.
    """
    pts = [(s.field, s.freq) if hasattr(s, "field") else (float(s[0]), float(s[1])) for s in sites]
    b = np.array([p[0] for p in pts], dtype=float)
    f = np.array([p[1] for p in pts], dtype=float)
    remaining = np.arange(b.size)
    lines = []
    # pairs are drawn up front from one stream per iteration so the
    # proposals do not depend on how the loop is scheduled
    seqs = np.random.SeedSequence(seed).spawn(n_iter)
    draws = np.array([np.random.default_rng(s).random(2) for s in seqs])
    while remaining.size >= max(min_inliers, 2):
        n = remaining.size
        best = None
        for u, v in draws:
            ii, jj = int(u * n), int(v * (n - 1))
            jj += jj >= ii
            i, j = remaining[ii], remaining[jj]
            if b[i] == b[j]:
                continue
            slope = (f[j] - f[i]) / (b[j] - b[i])
            resid = np.abs(f[remaining] - (f[i] + slope * (b[remaining] - b[i])))
            inl = remaining[resid <= tol_hz]
            key = (inl.size, -float(np.sum(resid[resid <= tol_hz] ** 2)))
            if best is None or key > best[0]:
                best = (key, inl)
        if best is None or best[1].size < min_inliers:
            break
        inl = best[1]
        for _ in range(5):
            slope, icpt = _lsq_line(b[inl], f[inl])
            new = remaining[np.abs(f[remaining] - (icpt + slope * b[remaining])) <= tol_hz]
            if new.size < min_inliers or np.array_equal(new, inl):
                break
            inl = new
        lines.append(_make_fit(np.sort(inl), b, f))
        remaining = np.setdiff1d(remaining, inl)
    return Regression(lines, [int(i) for i in remaining])


@dataclass(frozen=True)
class SpeciesRecord:
    name: str
    lande_g: float
    zfs_list_hz: tuple = ()
    system: SpinSystem | None = None
    tolerance_g: float = 0.2
    tolerance_zfs_hz: float = 0.3e9
    unconfirmed: bool = False
    delta_sz: int = 1
    max_delta_sz: int = 1

    def __post_init__(self):
        if not self.lande_g > 0:
            raise ValueError(f"{self.name}: lande_g must be > 0")
        if not (self.tolerance_g > 0 and self.tolerance_zfs_hz > 0):
            raise ValueError(f"{self.name}: tolerances must be > 0")
        if self.delta_sz < 1 or self.max_delta_sz < 1:
            raise ValueError(f"{self.name}: delta_sz must be >= 1")
        object.__setattr__(self, "zfs_list_hz", tuple(float(z) for z in self.zfs_list_hz))

    def to_json(self) -> dict:
        d = {
            "name": self.name,
            "lande_g": self.lande_g,
            "zfs_list_hz": list(self.zfs_list_hz),
            "tolerance_g": self.tolerance_g,
            "tolerance_zfs_hz": self.tolerance_zfs_hz,
            "delta_sz": self.delta_sz,
            "max_delta_sz": self.max_delta_sz,
        }
        if self.system is not None:
            d["system"] = self.system.to_json()
        if self.unconfirmed:
            d["unconfirmed"] = True
        return d

    @classmethod
    def from_json(cls, doc) -> "SpeciesRecord":
        return cls(
            name=str(doc["name"]),
            lande_g=float(doc["lande_g"]),
            zfs_list_hz=tuple(doc.get("zfs_list_hz", ())),
            system=SpinSystem.from_json(doc["system"]) if "system" in doc else None,
            tolerance_g=float(doc.get("tolerance_g", 0.2)),
            tolerance_zfs_hz=float(doc.get("tolerance_zfs_hz", 0.3e9)),
            unconfirmed=bool(doc.get("unconfirmed", False)),
            delta_sz=int(doc.get("delta_sz", 1)),
            max_delta_sz=int(doc.get("max_delta_sz", 1)),
        )


def load_species_db(path=None) -> list[SpeciesRecord]:
    """Read a JSON array of species records (default: the bundled database)."""
    path = Path(path) if path is not None else Path(__file__).with_name("data") / "species_db.json"
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, list):
        raise ValueError(f"{path}: species database must be a JSON array")
    return [SpeciesRecord.from_json(d) for d in doc]


@dataclass(frozen=True)
class Match:
    species: str
    transition: str | None
    z: float
    g_eff: float
    delta_g: float
    delta_zfs_hz: float
    unconfirmed: bool

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass
class LineMatch:
    line: LineFit
    matches: list

    @property
    def status(self) -> str:
        if not self.matches:
            return "unknown"
        return "unconfirmed" if self.matches[0].unconfirmed else "matched"

    @property
    def label(self) -> str:
        if not self.matches:
            return "unknown"
        best = self.matches[0]
        return best.species if best.transition is None else f"{best.species} {best.transition}"

    def to_json(self) -> dict:
        return {"line": self.line.to_json(), "label": self.label, "status": self.status,
                "matches": [m.to_json() for m in self.matches]}


def _pairs(system: SpinSystem, max_dsz: int):
    ms = system.m_values
    for i, a in enumerate(ms):
        for bm in ms[i + 1:]:
            d = int(round(a - bm))
            if 1 <= d <= max_dsz:
                yield float(bm), float(a), d


def _record_matches(line: LineFit, rec: SpeciesRecord) -> list[Match]:
    out = []

    def consider(g_obs, g_ref, zfs_obs, zfs_ref, transition):
        dg = g_obs - g_ref
        dz = zfs_obs - zfs_ref
        if abs(dg) <= rec.tolerance_g and abs(dz) <= rec.tolerance_zfs_hz:
            z = math.hypot(dg / rec.tolerance_g, dz / rec.tolerance_zfs_hz)
            out.append(Match(rec.name, transition, z, g_obs, dg, dz, rec.unconfirmed))

    if rec.system is None:
        g_obs = line.g_eff(rec.delta_sz)
        if rec.zfs_list_hz:
            zref = min(rec.zfs_list_hz, key=lambda z: abs(line.intercept - z))
            consider(g_obs, rec.lande_g, line.intercept, zref, None)
        return out
    # full system: compare against each transition linearised over the line's field range
    lo, hi = line.b_min, max(line.b_max, line.b_min + 1e-4)
    grid = np.linspace(lo, hi, 9)
    for m_lo, m_up, dsz in _pairs(rec.system, rec.max_delta_sz):
        fs = np.array([transition_at(rec.system, m_lo, m_up, bb) for bb in grid])
        slope, icpt = _lsq_line(grid, fs)
        consider(line.g_eff(dsz), effective_g(slope, dsz), line.intercept, icpt, f"{ket(m_lo)}<->{ket(m_up)}")
    return out


def match_species(lines: Sequence[LineFit], db: Sequence[SpeciesRecord]) -> list[LineMatch]:
    """Candidate species per line, best (smallest combined z-score) first.

    A record matches when the effective g and the intercept both lie within
    its tolerances; ``z = hypot(dg / tol_g, dzfs / tol_zfs)``. Lines with no
    match are labelled ``"unknown"``; a best match on an unconfirmed record
    gives status ``"unconfirmed"``. Results are ordered by intercept then
    slope, so the output does not depend on input order.
    """
    if not db:
        raise ValueError("species database is empty")
    out = []
    for line in lines:
        ms = [m for rec in db for m in _record_matches(line, rec)]
        ms.sort(key=lambda m: (m.z, m.species, m.transition or ""))
        out.append(LineMatch(line, ms))
    out.sort(key=lambda lm: (lm.line.intercept, lm.line.slope, lm.line.members))
    return out


def identify(sites, db, **ransac) -> dict:
    """Regression plus matching, in the ``identify.json`` layout."""
    reg = regress_lines(sites, **ransac)
    matched = match_species(reg.lines, db) if reg.lines else []
    pts = [(s.field, s.freq) if hasattr(s, "field") else (float(s[0]), float(s[1])) for s in sites]
    return {
        "lines": [m.to_json() for m in matched],
        "unassigned": [{"index": i, "b_tesla": pts[i][0], "f_hz": pts[i][1]} for i in reg.unassigned],
    }


@dataclass(frozen=True)
class TransitionRow:
    label: str
    delta_sz: int
    zfs_hz: float
    lower: float
    upper: float

    @property
    def transition(self) -> str:
        return f"{ket(self.lower)}->{ket(self.upper)}"

    def to_json(self) -> dict:
        return {"line": self.label, "delta_sz": self.delta_sz, "zfs_hz": self.zfs_hz,
                "transition": self.transition}


def _energies_by_m(system, b):
    w, v = eigh(build_hamiltonian(system, b))
    v = _sz_gauge(w, v, spin_matrices(system.spin).sz)
    char = _dominant_m(v, system.m_values)
    return {float(c): float(e) for c, e in zip(char, w)}


def table_of_transitions(system: SpinSystem, max_delta_sz: int | None = None) -> list[TransitionRow]:
    """Zero-field frequency of every level pair, numbered I, II, ...

    Rows are grouped by ``|Δm|`` and sorted by ZFS within each group. Within
    a pair the lower level is the lower-energy one at 1 mT (ties by m).
    """
    limit = system.dim - 1 if max_delta_sz is None else int(max_delta_sz)
    e0 = _energies_by_m(system, 0.0)
    e1 = _energies_by_m(system, 1e-3)
    rows = []
    for a, bm, d in _pairs(system, limit):
        zfs = abs(e0[bm] - e0[a])
        # zero-field degeneracies show as rounding noise; snap them to 0
        if zfs <= 1e-9 * max(abs(x) for x in e0.values()) + 1e-3:
            zfs = 0.0
        lo, up = (a, bm) if (e1[a], a) < (e1[bm], bm) else (bm, a)
        rows.append((d, round(zfs), -up, lo, up, zfs))
    rows.sort()
    return [TransitionRow(roman(i + 1), r[0], r[5], r[3], r[4]) for i, r in enumerate(rows)]
