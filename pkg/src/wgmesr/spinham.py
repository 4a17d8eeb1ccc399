"""Spin operators, Stevens crystal-field operators and level diagrams.

Energies are in Hz throughout and fields in tesla. Crystal-field
coefficients are given in GHz (the customary unit) and scaled on use.

The basis is ordered by descending spin projection, ``m = S, S-1, ..., -S``.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import brentq, linear_sum_assignment

from . import constants, kernels
from .errors import TrackingWarning

SUPPORTED_STEVENS = ((2, 0), (4, 0), (4, 4), (6, 0), (6, 4))

_HERMITIAN_RTOL = 1e-9
_MIN_OVERLAP = 0.7


def parse_spin(value) -> Fraction:
    """Parse ``7/2``, ``"7/2"``, ``3.5`` or ``Fraction(7, 2)``; reject anything else."""
    try:
        s = Fraction(value) if not isinstance(value, float) else Fraction(value).limit_denominator(2)
    except (TypeError, ValueError, ZeroDivisionError) as exc:
        raise ValueError(f"cannot parse spin {value!r}") from exc
    if isinstance(value, float) and float(s) != value:
        raise ValueError(f"spin must be integer or half-integer, got {value!r}")
    if (2 * s).denominator != 1 or s < Fraction(1, 2):
        raise ValueError(f"spin must be a positive integer or half-integer (2S+1 >= 2), got {value!r}")
    return s


def format_m(m) -> str:
    """``2.5 -> '+5/2'``, ``-1 -> '-1'``."""
    fr = Fraction(m).limit_denominator(2)
    sign = "+" if fr >= 0 else "-"
    fr = abs(fr)
    body = str(fr.numerator) if fr.denominator == 1 else f"{fr.numerator}/{fr.denominator}"
    return sign + body


def _as_m(m) -> float:
    return float(Fraction(m)) if isinstance(m, str) else float(m)


def ket(m) -> str:
    return f"|{format_m(m)}>"


def _stevens_key(key) -> tuple[int, int]:
    if isinstance(key, str):
        k = key.strip().upper().lstrip("B")
        if len(k) != 2 or not k.isdigit():
            raise ValueError(f"cannot parse Stevens index {key!r}; expected e.g. 'B20', 'B44'")
        key = (int(k[0]), int(k[1]))
    key = (int(key[0]), int(key[1]))
    if key not in SUPPORTED_STEVENS:
        raise ValueError(f"unsupported Stevens index {key}; supported (k, q): {list(SUPPORTED_STEVENS)}")
    return key


@dataclass(frozen=True)
class SpinSystem:
    """Effective spin with Zeeman term along z and an S4-site crystal field.

    ``stevens`` maps ``(k, q)`` to the coefficient B(k, q) in GHz.
    """

    spin: Fraction
    lande_g: float
    stevens: Mapping[tuple[int, int], float] = field(default_factory=dict)
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "spin", parse_spin(self.spin))
        coeffs = {_stevens_key(k): float(v) for k, v in dict(self.stevens).items()}
        object.__setattr__(self, "stevens", coeffs)
        object.__setattr__(self, "lande_g", float(self.lande_g))
        if not np.isfinite(self.lande_g):
            raise ValueError("lande_g must be finite")

    @property
    def dim(self) -> int:
        return int(2 * self.spin + 1)

    @property
    def m_values(self) -> np.ndarray:
        return float(self.spin) - np.arange(self.dim, dtype=float)

    def replace(self, **changes) -> "SpinSystem":
        d = dict(spin=self.spin, lande_g=self.lande_g, stevens=dict(self.stevens), label=self.label)
        d.update(changes)
        return SpinSystem(**d)

    def to_json(self) -> dict:
        spin = self.spin
        return {
            "label": self.label,
            "spin": str(spin) if spin.denominator != 1 else str(spin.numerator),
            "lande_g": self.lande_g,
            "stevens_ghz": {f"B{k}{q}": v for (k, q), v in sorted(self.stevens.items())},
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "SpinSystem":
        try:
            return cls(
                spin=doc["spin"],
                lande_g=doc["lande_g"],
                stevens=doc.get("stevens_ghz", {}),
                label=doc.get("label", ""),
            )
        except KeyError as exc:
            raise ValueError(f"spin system document lacks field {exc}") from exc


def load_system(path) -> SpinSystem:
    with open(path) as fh:
        return SpinSystem.from_json(json.load(fh))


def gd_cawo4() -> SpinSystem:
    """Gd3+ at the Ca site of scheelite (S = 7/2, g = 1.99)."""
    return load_system(Path(__file__).with_name("data") / "gd_cawo4.json")


@dataclass(frozen=True)
class SpinMatrices:
    sz: np.ndarray
    s_plus: np.ndarray
    s_minus: np.ndarray


def spin_matrices(spin) -> SpinMatrices:
    """Sz, S+ and S- for spin ``S`` in the descending-m basis."""
    s = float(parse_spin(spin))
    d = int(round(2 * s + 1))
    m = s - np.arange(d)
    sz = np.diag(m).astype(complex)
    sp = np.zeros((d, d), dtype=complex)
    # <m+1|S+|m>: row i-1 holds m[i] + 1
    for i in range(1, d):
        sp[i - 1, i] = np.sqrt(s * (s + 1) - m[i] * (m[i] + 1))
    return SpinMatrices(sz=sz, s_plus=sp, s_minus=sp.conj().T.copy())


def stevens_operator(spin, k: int, q: int) -> np.ndarray:
    """Stevens operator O(k, q) as a dense matrix (Abragam-Bleaney convention)."""
    key = _stevens_key((k, q))
    ops = spin_matrices(spin)
    s = float(parse_spin(spin))
    x = s * (s + 1)
    d = ops.sz.shape[0]
    eye = np.eye(d)
    sz = ops.sz
    sz2 = sz @ sz
    sz4 = sz2 @ sz2
    p4 = np.linalg.matrix_power(ops.s_plus, 4) + np.linalg.matrix_power(ops.s_minus, 4)
    if key == (2, 0):
        return 3 * sz2 - x * eye
    if key == (4, 0):
        return 35 * sz4 - (30 * x - 25) * sz2 + (3 * x * x - 6 * x) * eye
    if key == (4, 4):
        return 0.5 * p4
    if key == (6, 0):
        return (
            231 * sz4 @ sz2
            - (315 * x - 735) * sz4
            + (105 * x * x - 525 * x + 294) * sz2
            + (-5 * x**3 + 40 * x * x - 60 * x) * eye
        )
    a = 11 * sz2 - (x + 38) * eye
    return 0.25 * (p4 @ a + a @ p4)


def crystal_field(system: SpinSystem) -> np.ndarray:
    h = np.zeros((system.dim, system.dim), dtype=complex)
    for (k, q), b in sorted(system.stevens.items()):
        if b != 0.0:
            h += b * 1e9 * stevens_operator(system.spin, k, q)
    return h


def build_hamiltonian(system: SpinSystem, field: float) -> np.ndarray:
    """Crystal field plus Zeeman term for a field along z, in Hz."""
    if not np.isfinite(field):
        raise ValueError(f"field must be finite, got {field!r}")
    sz = spin_matrices(system.spin).sz
    return crystal_field(system) + system.lande_g * constants.MU_B_OVER_H * field * sz


def eigh(matrix) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a Hermitian matrix by cyclic Jacobi rotations.

    Returns ascending eigenvalues and the matching orthonormal eigenvectors
    as columns. Raises ``ValueError`` for non-Hermitian input.
    """
    a = np.asarray(matrix)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    scale = np.linalg.norm(a)
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    if np.linalg.norm(a - a.conj().T) > _HERMITIAN_RTOL * scale:
        raise ValueError("matrix is not Hermitian")
    a = 0.5 * (a + a.conj().T)
    w, v, _, converged = kernels.jacobi_eigh(a)
    if not converged:
        raise np.linalg.LinAlgError("Jacobi iteration did not converge")
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def _sz_gauge(w, v, sz, rtol=1e-9):
    """Within each degenerate cluster, rotate eigenvectors to diagonalise Sz.

    Fixes the otherwise arbitrary basis of Kramers doublets so labels are
    reproducible; larger Sz comes first inside a cluster.
    """
    span = max(np.ptp(w), np.max(np.abs(w)), 1.0) if w.size else 1.0
    tol = rtol * span
    v = v.copy()
    i = 0
    n = w.size
    while i < n:
        j = i + 1
        while j < n and w[j] - w[j - 1] <= tol:
            j += 1
        if j - i > 1:
            sub = v[:, i:j]
            proj = sub.conj().T @ sz @ sub
            mu, u = eigh(0.5 * (proj + proj.conj().T))
            v[:, i:j] = sub @ u[:, ::-1]
        i = j
    return v


def _dominant_m(v, m_vals):
    """Distinct dominant spin projection per eigenvector column."""
    rows, cols = linear_sum_assignment(-(np.abs(v) ** 2))
    out = np.empty(v.shape[1])
    out[cols] = m_vals[rows]
    return out


@dataclass
class LevelDiagram:
    """Eigen-energies over a field grid with adiabatically tracked columns.

    ``energies[i, j]`` is the energy (Hz) of level ``j`` at ``field_grid[i]``;
    ``labels[j]`` is the spin projection dominating level ``j`` at the first
    grid point. ``vectors[i]`` holds the matching eigenvectors as columns.

    ``character[i, j]`` is the spin projection dominating column ``j`` at
    ``field_grid[i]``. Through an anticrossing a column keeps its adiabatic
    label while its character switches; :meth:`level` follows the character,
    which is how spectroscopic lines are named.
    """

    field_grid: np.ndarray
    energies: np.ndarray
    labels: np.ndarray
    system: SpinSystem
    vectors: np.ndarray
    character: np.ndarray

    def column(self, m) -> int:
        """Adiabatic column carrying label ``m``."""
        hits = np.flatnonzero(np.isclose(self.labels, _as_m(m)))
        if hits.size == 0:
            raise KeyError(f"no level labelled {format_m(_as_m(m))}")
        return int(hits[0])

    def adiabatic_level(self, m) -> np.ndarray:
        return self.energies[:, self.column(m)]

    def level(self, m) -> np.ndarray:
        """Energy of the state whose dominant Sz character is ``m`` at each field."""
        mask = np.isclose(self.character, _as_m(m))
        if not np.all(mask.sum(axis=1) == 1):
            raise KeyError(f"no level with character {format_m(_as_m(m))}")
        return self.energies[mask]


def level_diagram(system: SpinSystem, field_grid: Sequence[float]) -> LevelDiagram:
    """Diagonalise ``system`` on a field grid and follow each level.

    Consecutive eigenvector sets are matched by the maximum-|overlap|
    assignment, with eigenvalue proximity as the tie-breaker. A
    :class:`~wgmesr.errors.TrackingWarning` names any field interval where the
    best overlap drops below 0.7.
    """
    grid = np.asarray(field_grid, dtype=float).ravel()
    if grid.size == 0:
        raise ValueError("field grid is empty")
    if grid.size > 1 and np.any(np.diff(grid) <= 0):
        raise ValueError("field grid must be strictly increasing")
    sz = spin_matrices(system.spin).sz
    cf = crystal_field(system)
    zeeman = system.lande_g * constants.MU_B_OVER_H * sz
    d = system.dim
    energies = np.empty((grid.size, d))
    vectors = np.empty((grid.size, d, d), dtype=complex)

    m_vals = system.m_values
    character = np.empty((grid.size, d))

    w, v = eigh(cf + grid[0] * zeeman)
    v = _sz_gauge(w, v, sz)
    labels = _dominant_m(v, m_vals)
    # order columns by label, descending m, to make output layout stable
    order = np.argsort(-labels, kind="stable")
    labels = labels[order]
    energies[0] = w[order]
    vectors[0] = v[:, order]

    for i in range(1, grid.size):
        w, v = eigh(cf + grid[i] * zeeman)
        v = _sz_gauge(w, v, sz)
        overlap = np.abs(vectors[i - 1].conj().T @ v)
        span = max(np.ptp(w), 1.0)
        cost = -overlap + 1e-6 * np.abs(energies[i - 1][:, None] - w[None, :]) / span
        prev_idx, new_idx = linear_sum_assignment(cost)
        perm = np.empty(d, dtype=int)
        perm[prev_idx] = new_idx
        energies[i] = w[perm]
        vectors[i] = v[:, perm]
        character[i] = _dominant_m(vectors[i], m_vals)
        worst = overlap[prev_idx, new_idx].min()
        if worst < _MIN_OVERLAP:
            warnings.warn(
                f"ambiguous level tracking between {grid[i - 1]:.6g} T and {grid[i]:.6g} T "
                f"(overlap {worst:.3f}); refine the field grid",
                TrackingWarning,
                stacklevel=2,
            )
    character[0] = labels
    return LevelDiagram(grid, energies, labels, system, vectors, character)


@dataclass
class TransitionLine:
    lower_label: float
    upper_label: float
    delta_sz: int
    fields: np.ndarray
    freqs: np.ndarray
    zfs_hz: float

    @property
    def name(self) -> str:
        return f"{ket(self.lower_label)}->{ket(self.upper_label)}"


def transition_frequency(diagram: LevelDiagram, lower, upper) -> np.ndarray:
    """Signed ``E(upper) - E(lower)`` on the diagram grid (antisymmetric in the pair)."""
    return diagram.level(upper) - diagram.level(lower)


def _ordered_pair(diagram, a, b):
    """Lower level first: by energy at the first grid point, then mean energy, then m."""
    ea, eb = diagram.level(a), diagram.level(b)
    tol = 1e-9 * max(np.max(np.abs(diagram.energies[0])), 1.0)
    di = eb[0] - ea[0]
    if abs(di) <= tol:
        di = np.mean(eb - ea)
        if abs(di) <= tol:
            di = b - a
    return (a, b) if di > 0 else (b, a)


def transitions(diagram: LevelDiagram, max_delta_sz: int | None = None) -> list[TransitionLine]:
    """All level pairs with ``|Δm| <= max_delta_sz`` as :class:`TransitionLine`.

    Levels are identified by Sz character (see :meth:`LevelDiagram.level`),
    so line names keep their spectroscopic meaning across anticrossings.
    ``zfs_hz`` is the zero-field frequency when the grid starts at 0 T and
    NaN otherwise.
    """
    ms = sorted(diagram.labels.tolist(), reverse=True)
    limit = len(ms) - 1 if max_delta_sz is None else int(max_delta_sz)
    at_zero = diagram.field_grid[0] == 0.0
    out = []
    for i, mi in enumerate(ms):
        for mj in ms[i + 1:]:
            dsz = int(round(abs(mi - mj)))
            if dsz < 1 or dsz > limit:
                continue
            lo, up = _ordered_pair(diagram, mi, mj)
            f = np.abs(diagram.level(up) - diagram.level(lo))
            out.append(
                TransitionLine(
                    lower_label=float(lo),
                    upper_label=float(up),
                    delta_sz=dsz,
                    fields=diagram.field_grid.copy(),
                    freqs=f,
                    zfs_hz=float(f[0]) if at_zero else float("nan"),
                )
            )
    return out


def _kramers_clusters(w, span_hz):
    tol = 1.0 * span_hz / 1e9
    groups = [[0]]
    for j in range(1, w.size):
        if w[j] - w[j - 1] <= tol:
            groups[-1].append(j)
        else:
            groups.append([j])
    return groups


def zfs(system: SpinSystem) -> list[tuple[str, float]]:
    """Zero-field splittings between degenerate multiplets (Kramers doublets).

    One entry per pair of distinct multiplets, labelled like
    ``"|±5/2>-|±3/2>"``, followed by the splitting inside each multiplet,
    which is reported as exactly 0.
    """
    diag = level_diagram(system, [0.0])
    e = diag.energies[0]
    order = np.argsort(e, kind="stable")
    w = e[order]
    labels = diag.labels[order]
    span = float(np.ptp(w)) if w.size else 0.0
    groups = _kramers_clusters(w, span)

    def glabel(g):
        ms = sorted((float(labels[k]) for k in g), reverse=True)
        if len(ms) == 2 and ms[0] > 0 and ms[0] == -ms[1]:
            return f"|±{format_m(ms[0])[1:]}>"
        return ",".join(ket(m) for m in ms)

    out = []
    for a in range(len(groups)):
        for b in range(a + 1, len(groups)):
            ea = np.mean(w[groups[a]])
            eb = np.mean(w[groups[b]])
            out.append((f"{glabel(groups[a])}-{glabel(groups[b])}", float(eb - ea)))
    for g in groups:
        for x in range(len(g)):
            for y in range(x + 1, len(g)):
                out.append((f"{ket(labels[g[x]])}-{ket(labels[g[y]])}", 0.0))
    return out


def transition_at(system: SpinSystem, lower, upper, field: float) -> float:
    """``|E(upper) - E(lower)|`` at one field, levels identified by Sz character."""
    w, v = eigh(build_hamiltonian(system, field))
    v = _sz_gauge(w, v, spin_matrices(system.spin).sz)
    char = _dominant_m(v, system.m_values)
    lo = np.flatnonzero(np.isclose(char, _as_m(lower)))
    up = np.flatnonzero(np.isclose(char, _as_m(upper)))
    if lo.size != 1 or up.size != 1:
        raise KeyError(f"levels {lower!r}/{upper!r} not present for spin {system.spin}")
    return float(abs(w[up[0]] - w[lo[0]]))


def resonance_fields(
    system: SpinSystem,
    lower,
    upper,
    freq_hz: float,
    b_max: float,
    b_min: float = 0.0,
    step: float = 5e-4,
) -> list[float]:
    """Fields in ``[b_min, b_max]`` where the ``lower -> upper`` line equals ``freq_hz``.

    Brackets come from a grid with spacing ``step``; each is refined with
    Brent's method. Sign changes caused by a character swap at an
    anticrossing (a jump, not a root) are discarded.
    """
    if b_max <= b_min:
        raise ValueError("b_max must exceed b_min")
    n = max(int(np.ceil((b_max - b_min) / step)) + 1, 2)
    grid = np.linspace(b_min, b_max, n)
    f = np.array([transition_at(system, lower, upper, b) for b in grid]) - freq_hz

    def resid(b):
        return transition_at(system, lower, upper, b) - freq_hz

    roots = []
    for i in range(n - 1):
        if f[i] == 0.0:
            roots.append(float(grid[i]))
        elif f[i] * f[i + 1] < 0:
            r = brentq(resid, grid[i], grid[i + 1], xtol=1e-12)
            if abs(resid(r)) <= 1e-6 * max(abs(freq_hz), 1.0):
                roots.append(float(r))
    if f[-1] == 0.0:
        roots.append(float(grid[-1]))
    return roots


def transition_slope(system: SpinSystem, lower, upper, field: float, h: float = 1e-5) -> float:
    """``d|E(upper) - E(lower)|/dB`` in Hz/T by central difference."""
    lo = max(field - h, 0.0)
    return (transition_at(system, lower, upper, field + h) - transition_at(system, lower, upper, lo)) / (field + h - lo)
