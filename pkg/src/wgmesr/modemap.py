"""Field sweeps: loading, per-mode tracking and perturbation-site extraction."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal

from .errors import DataError, TrackingWarning, UnfittableError
from .lineshape import FanoParams, Trace, fit_fano, noise_sigma, read_trace_csv, write_trace_csv

DEFAULT_WINDOW_LW = 20.0
DEFAULT_THRESHOLD = 5.0
BASELINE_STEPS = 21
MIN_STEPS = 11
EXTRAPOLATION_POINTS = 5


@dataclass
class SweepMap:
    """Traces recorded at a list of fields, held in ascending field order."""

    steps: list[tuple[float, Trace]]
    step_tesla: float
    direction: str = "up"
    source: Path | None = None

    def __post_init__(self):
        if self.direction not in ("up", "down"):
            raise ValueError("direction must be 'up' or 'down'")
        if not self.step_tesla > 0:
            raise ValueError("step_tesla must be > 0")
        self.steps = sorted(self.steps, key=lambda s: s[0])
        b = [s[0] for s in self.steps]
        if len(set(b)) != len(b):
            raise ValueError("duplicate field values in sweep")

    @property
    def fields(self) -> np.ndarray:
        return np.array([s[0] for s in self.steps])

    def in_sweep_order(self):
        return self.steps if self.direction == "up" else self.steps[::-1]

    def reversed(self) -> "SweepMap":
        return replace(self, direction="down" if self.direction == "up" else "up")


def _trace_name(i: int) -> str:
    return f"b{i:04d}.csv"


def load_sweep(manifest_path) -> SweepMap:
    """Read a sweep manifest and every trace it references.

    Entries repeating the same field and file are merged; the same field
    pointing at different files is an error.
    """
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
    except OSError as exc:
        raise DataError(f"{manifest_path}: cannot read manifest ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest_path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
    if "steps" not in doc or "step_tesla" not in doc:
        raise DataError(f"{manifest_path}: manifest needs 'step_tesla' and 'steps'")
    root = manifest_path.parent
    seen: dict[float, str] = {}
    steps = []
    for k, entry in enumerate(doc["steps"]):
        try:
            b = float(entry["b_tesla"])
            name = str(entry["trace"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{manifest_path}: step {k} is malformed ({exc})") from exc
        if b in seen:
            if seen[b] == name:
                continue
            raise DataError(f"{manifest_path}: duplicate field {b!r} T in steps ({seen[b]}, {name})")
        seen[b] = name
        path = root / name
        if not path.is_file():
            raise DataError(f"{manifest_path}: step {k} references missing trace file {path}")
        meta = {key: v for key, v in entry.items() if key not in ("b_tesla", "trace")}
        meta["b_tesla"] = b
        meta["file"] = name
        steps.append((b, read_trace_csv(path, meta)))
    return SweepMap(steps, float(doc["step_tesla"]), doc.get("direction", "up"), manifest_path)


def save_sweep(sweep: SweepMap, out_dir, manifest_name: str = "manifest.json") -> Path:
    """Write traces and manifest; :func:`load_sweep` of the result round-trips exactly."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (b, tr) in enumerate(sweep.steps):
        name = tr.meta.get("file") or _trace_name(i)
        write_trace_csv(tr, out_dir / name)
        entry = {"b_tesla": b, "trace": name}
        entry.update({k: v for k, v in tr.meta.items() if k not in ("b_tesla", "file")})
        entries.append(entry)
    path = out_dir / manifest_name
    write_manifest(path, sweep.step_tesla, entries, sweep.direction)
    return path


def write_manifest(path, step_tesla, entries, direction="up") -> None:
    doc = {"step_tesla": step_tesla, "direction": direction, "steps": entries}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


@dataclass
class ModeTrace:
    """One mode followed through a sweep; ``None`` entries are lost-lock steps."""

    mode_id: int
    fields: np.ndarray
    params: list
    window_hz: float = float("nan")

    @property
    def f0(self) -> np.ndarray:
        return np.array([np.nan if p is None else p.f0_hz for p in self.params])

    @property
    def gamma(self) -> np.ndarray:
        return np.array([np.nan if p is None else p.gamma_hz for p in self.params])

    @property
    def locked(self) -> np.ndarray:
        return np.array([p is not None for p in self.params])

    @property
    def gaps(self) -> list[tuple[float, float]]:
        out = []
        lost = ~self.locked
        i = 0
        while i < lost.size:
            if lost[i]:
                j = i
                while j + 1 < lost.size and lost[j + 1]:
                    j += 1
                out.append((float(self.fields[i]), float(self.fields[j])))
                i = j + 1
            else:
                i += 1
        return out


def _predict(history, b):
    """Linear extrapolation through the last locked (field, f0) points."""
    pts = history[-EXTRAPOLATION_POINTS:]
    if len(pts) < 2:
        return pts[-1][1]
    x = np.array([p[0] for p in pts])
    y = np.array([p[1] for p in pts])
    if np.ptp(x) == 0:
        return float(y[-1])
    slope, icpt = np.polyfit(x - x[-1], y, 1)
    return float(icpt + slope * (b - x[-1]))


def _relock(trace, centers, window, prev, seed, min_rel_height, min_snr, fit_half_lw):
    """Find and fit the mode near any of ``centers``; None when absent."""
    f, y = trace.freq_hz, trace.s21
    inside = np.zeros(f.size, dtype=bool)
    for c in centers:
        inside |= np.abs(f - c) <= window
    if not inside.any():
        return None
    base = float(np.median(y))
    sign = 1.0 if seed.amp > 0 else -1.0
    z = sign * (y - base)
    thr = max(min_snr * noise_sigma(y), min_rel_height * abs(seed.amp))
    pk, _ = signal.find_peaks(z, height=thr)
    pk = pk[inside[pk]]
    if pk.size == 0:
        return None
    i = pk[np.argmin(np.abs(f[pk] - centers[0]))]
    half = fit_half_lw * prev.gamma_hz
    sub = trace.window(f[i] - half, f[i] + half)
    guess = FanoParams(float(f[i]), prev.gamma_hz, prev.fano_q, prev.amp, base)
    try:
        fitted, _ = fit_fano(sub, guess)
    except (UnfittableError, ValueError):
        return None
    if not any(abs(fitted.f0_hz - c) <= window for c in centers):
        return None
    if not (seed.gamma_hz / 5 <= fitted.gamma_hz <= seed.gamma_hz * 5):
        return None
    if np.sign(fitted.amp) != np.sign(seed.amp):
        return None
    return fitted


def track_modes(
    sweep: SweepMap,
    seeds: Sequence[FanoParams],
    window_hz: float | None = None,
    *,
    window_lw: float = DEFAULT_WINDOW_LW,
    min_rel_height: float = 0.2,
    min_snr: float = 5.0,
    fit_half_lw: float = 10.0,
    threads: int = 1,
) -> list[ModeTrace]:
    """Follow each seeded mode through the sweep.

    At each step the mode is searched within ``±window_hz`` (default
    ``window_lw`` seed linewidths) of the previous centre and refitted. A
    step with no acceptable peak is recorded as lost. While lost, the search
    is centred on a linear extrapolation of the last five locked points,
    and also accepts a peak back near the last locked or the seed frequency.
    """
    ordered = sweep.in_sweep_order()

    def follow(k, seed):
        window = window_hz if window_hz is not None else window_lw * seed.gamma_hz
        params = []
        history = []
        prev = seed
        lost = False
        for b, tr in ordered:
            if not history:
                centers = [seed.f0_hz]
            elif lost:
                centers = [_predict(history, b), history[-1][1], seed.f0_hz]
            else:
                centers = [history[-1][1]]
            got = _relock(tr, centers, window, prev, seed, min_rel_height, min_snr, fit_half_lw)
            params.append(got)
            if got is None:
                lost = True
            else:
                lost = False
                prev = got
                history.append((b, got.f0_hz))
        fields = np.array([b for b, _ in ordered])
        order = np.argsort(fields)
        return ModeTrace(k, fields[order], [params[i] for i in order], float(window))

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(follow, range(len(seeds)), seeds))
    return [follow(k, s) for k, s in enumerate(seeds)]


@dataclass(frozen=True)
class PerturbationSite:
    field: float
    freq: float
    strength: float
    width: float
    mode_id: int

    def to_row(self) -> dict:
        return {
            "mode_id": self.mode_id,
            "b_tesla": self.field,
            "f_hz": self.freq,
            "strength_hz": self.strength,
            "width_tesla": self.width,
        }


def moving_median(values, n: int = BASELINE_STEPS) -> np.ndarray:
    """Centred moving median ignoring NaN; the window is truncated at the ends."""
    v = np.asarray(values, dtype=float)
    h = n // 2
    padded = np.concatenate([np.full(h, np.nan), v, np.full(h, np.nan)])
    windows = np.lib.stride_tricks.sliding_window_view(padded, 2 * h + 1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return np.nanmedian(windows, axis=1)


def _runs(mask):
    i = 0
    while i < mask.size:
        if mask[i]:
            j = i
            while j + 1 < mask.size and mask[j + 1]:
                j += 1
            yield i, j
            i = j + 1
        else:
            i += 1


def extract_sites(
    traces: Sequence[ModeTrace],
    threshold_sigma: float = DEFAULT_THRESHOLD,
    baseline_steps: int = BASELINE_STEPS,
) -> list[PerturbationSite]:
    """Perturbation sites from tracked modes.

    Each trace's centre frequency minus its moving-median baseline is
    compared with ``threshold_sigma`` times the robust scale
    (1.4826 * MAD). A contiguous run of outlying or lost-lock steps is one
    site, placed at the largest deviation (or at the middle of the lost
    steps, where the deviation exceeded the tracking window). Traces shorter
    than 11 steps are skipped with a :class:`TrackingWarning`.
    """
    sites = []
    for mt in traces:
        n = len(mt.fields)
        if n < MIN_STEPS:
            warnings.warn(
                f"mode {mt.mode_id}: {n} steps is too short for a baseline (need {MIN_STEPS})",
                TrackingWarning,
                stacklevel=2,
            )
            continue
        f0 = mt.f0
        if np.all(np.isnan(f0)):
            continue
        base = moving_median(f0, baseline_steps)
        dev = f0 - base
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            mad = np.nanmedian(np.abs(dev - np.nanmedian(dev)))
        scale = max(1.4826 * float(mad), 1e-10 * float(np.nanmedian(np.abs(f0))))
        thr = threshold_sigma * scale
        lost = np.isnan(f0)
        flagged = lost | (np.abs(np.nan_to_num(dev)) > thr)
        step = float(np.median(np.diff(mt.fields))) if n > 1 else 0.0
        # baseline through lost steps, for reporting the mode frequency there
        good = ~np.isnan(base)
        for i, j in _runs(flagged):
            seg = np.arange(i, j + 1)
            obs = seg[~lost[seg]]
            strength = float(np.max(np.abs(dev[obs]))) if obs.size else 0.0
            if lost[seg].any():
                gap = seg[lost[seg]]
                b = float(np.mean(mt.fields[gap]))
                freq = float(np.interp(b, mt.fields[good], base[good]))
                strength = max(strength, thr)
            else:
                k = obs[np.argmax(np.abs(dev[obs]))]
                b = float(mt.fields[k])
                freq = float(f0[k])
            sites.append(PerturbationSite(b, freq, strength, (j - i + 1) * step, mt.mode_id))
    return sorted(sites, key=lambda s: (s.mode_id, s.field))


def write_modes_csv(traces: Sequence[ModeTrace], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("mode_id,b_tesla,f0_hz,gamma_hz,q\n")
        for mt in traces:
            for b, p in zip(mt.fields.tolist(), mt.params):
                if p is None:
                    fh.write(f"{mt.mode_id},{b!r},nan,nan,nan\n")
                else:
                    fh.write(f"{mt.mode_id},{b!r},{float(p.f0_hz)!r},{float(p.gamma_hz)!r},{float(p.fano_q)!r}\n")


def read_modes_csv(path) -> list[ModeTrace]:
    """Inverse of :func:`write_modes_csv`; ``q`` is the Fano parameter.

    Amplitude and offset are not stored, so recovered params carry
    ``amp = 1, offset = 0``.
    """
    rows: dict[int, list] = {}
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"{path}: cannot open ({exc.strerror})") from exc
    with fh:
        reader = csv.DictReader(fh)
        need = {"mode_id", "b_tesla", "f0_hz", "gamma_hz", "q"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise DataError(f"{path}:1: expected columns {sorted(need)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                k = int(row["mode_id"])
                b = float(row["b_tesla"])
                f0, g, q = float(row["f0_hz"]), float(row["gamma_hz"]), float(row["q"])
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            p = None if math.isnan(f0) else FanoParams(f0, g, q)
            rows.setdefault(k, []).append((b, p))
    out = []
    for k in sorted(rows):
        pts = sorted(rows[k], key=lambda r: r[0])
        out.append(ModeTrace(k, np.array([r[0] for r in pts]), [r[1] for r in pts]))
    return out


def write_sites_csv(sites: Sequence[PerturbationSite], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("mode_id,b_tesla,f_hz,strength_hz,width_tesla\n")
        for s in sites:
            fh.write(f"{s.mode_id},{float(s.field)!r},{float(s.freq)!r},{float(s.strength)!r},{float(s.width)!r}\n")


def read_sites_csv(path) -> list[PerturbationSite]:
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"{path}: cannot open ({exc.strerror})") from exc
    out = []
    with fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):
            try:
                out.append(
                    PerturbationSite(
                        float(row["b_tesla"]),
                        float(row["f_hz"]),
                        float(row["strength_hz"]),
                        float(row["width_tesla"]),
                        int(row["mode_id"]),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return out


def seeds_from_first_step(sweep: SweepMap, min_prominence: float | None = None, min_q: float = 0.0) -> list[FanoParams]:
    """Fitted lineshapes of every resonance in the first trace of the sweep."""
    from .lineshape import census

    _, tr = sweep.in_sweep_order()[0]
    if min_prominence is None:
        min_prominence = max(8.0 * noise_sigma(tr.s21), 1e-12)
    return [p for p, _ in census(tr, min_prominence, min_q)]
