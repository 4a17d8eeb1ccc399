"""Synthetic field sweeps with known ground truth.

A scenario holds photon modes, spin lines and a field sweep. Each mode is
drawn as a Fano resonance at its pulled frequency: the bare frequency plus,
for every spin line within ``cutoff_g`` coupling rates of detuning, the
shift of the photon-like normal-mode branch. Pairs are composed
independently. The ground truth is assembled first and the traces are
rendered from it alone, so the two cannot disagree.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .coupling import _branches
from .errors import DataError
from .lineshape import FanoParams, Trace, fano_model, write_trace_csv
from .modemap import _trace_name, write_manifest
from .spinham import SpinSystem, gd_cawo4, ket, resonance_fields, transition_at, transition_slope

DEFAULT_CUTOFF_G = 1e4


@dataclass(frozen=True)
class ModeSpec:
    f0_hz: float
    q_factor: float
    fano_q: float = 0.0
    amp: float = -0.5

    def __post_init__(self):
        if not self.f0_hz > 0:
            raise ValueError("mode f0_hz must be > 0")
        if not self.q_factor > 0:
            raise ValueError("mode q_factor must be > 0")
        if self.amp == 0:
            raise ValueError("mode amp must be nonzero")

    @property
    def gamma_hz(self) -> float:
        return self.f0_hz / self.q_factor


@dataclass(frozen=True)
class SpeciesSpec:
    """A spin species: either a full system with chosen transitions or one straight line."""

    name: str
    g_hz: float
    system: SpinSystem | None = None
    transitions: tuple = ()
    max_delta_sz: int = 1
    intercept_hz: float | None = None
    slope_hz_per_tesla: float | None = None

    def __post_init__(self):
        if self.g_hz < 0:
            raise ValueError(f"species {self.name}: g_hz must be >= 0")
        has_line = self.intercept_hz is not None and self.slope_hz_per_tesla is not None
        if self.system is None and not has_line:
            raise ValueError(f"species {self.name}: give either a system or intercept_hz + slope_hz_per_tesla")
        if self.system is not None and has_line:
            raise ValueError(f"species {self.name}: system and line are mutually exclusive")

    def line_pairs(self):
        if self.system is None:
            return [None]
        if self.transitions:
            return [tuple(float(x) for x in t) for t in self.transitions]
        ms = self.system.m_values
        out = []
        for i, a in enumerate(ms):
            for b in ms[i + 1:]:
                if 1 <= round(abs(a - b)) <= self.max_delta_sz:
                    out.append((float(min(a, b)), float(max(a, b))))
        return out


@dataclass(frozen=True)
class Scenario:
    modes: tuple
    species: tuple = ()
    b_start: float = 0.0
    b_stop: float = 0.0
    step_tesla: float = 1e-3
    direction: str = "up"
    sigma: float = 0.0
    freq_jitter_hz: float = 0.0
    seed: int = 0
    span_lw: float = 50.0
    points_per_mode: int = 1001
    baseline: float = 1.0
    cutoff_g: float = DEFAULT_CUTOFF_G

    def __post_init__(self):
        if not self.step_tesla > 0:
            raise ValueError("step_tesla must be > 0")
        if self.b_stop < self.b_start:
            raise ValueError("sweep stop must be >= start")
        if self.sigma < 0 or self.freq_jitter_hz < 0:
            raise ValueError("noise levels must be >= 0")
        if self.points_per_mode < 3:
            raise ValueError("points_per_mode must be >= 3")
        if self.direction not in ("up", "down"):
            raise ValueError("direction must be 'up' or 'down'")

    @property
    def fields(self) -> np.ndarray:
        n = int(math.floor((self.b_stop - self.b_start) / self.step_tesla + 1e-9)) + 1
        # rounding keeps manifest values free of accumulated float error
        return np.round(self.b_start + self.step_tesla * np.arange(n), 12)

    def replace(self, **kw) -> "Scenario":
        from dataclasses import replace

        return replace(self, **kw)


def _system_from(doc):
    if doc == "gd_cawo4":
        return gd_cawo4()
    if isinstance(doc, str):
        return SpinSystem.from_json(json.loads(Path(doc).read_text()))
    return SpinSystem.from_json(doc)


def scenario_from_json(doc: dict, base_dir=None) -> Scenario:
    """Build a :class:`Scenario` from its JSON form.

    ``species[].system`` may be an inline system, a path (relative to
    ``base_dir``) or the string ``"gd_cawo4"`` for the built-in system.
    Missing or malformed entries raise :class:`DataError`.
    """
    try:
        return _scenario(doc, base_dir)
    except DataError:
        raise
    except KeyError as exc:
        raise DataError(f"scenario: missing key {exc}") from exc
    except (TypeError, ValueError, OSError) as exc:
        raise DataError(f"scenario: {exc}") from exc


def _scenario(doc, base_dir):
    modes = tuple(
        ModeSpec(float(m["f0_hz"]), float(m["q_factor"]), float(m.get("fano_q", 0.0)), float(m.get("amp", -0.5)))
        for m in doc["modes"]
    )
    species = []
    for s in doc.get("species", []):
        system = None
        if "system" in s:
            ref = s["system"]
            if isinstance(ref, str) and ref != "gd_cawo4" and base_dir is not None:
                ref = str(Path(base_dir) / ref)
            system = _system_from(ref)
        species.append(
            SpeciesSpec(
                name=str(s["name"]),
                g_hz=float(s["g_hz"]),
                system=system,
                transitions=tuple(tuple(t) for t in s.get("transitions", ())),
                max_delta_sz=int(s.get("max_delta_sz", 1)),
                intercept_hz=s.get("intercept_hz"),
                slope_hz_per_tesla=s.get("slope_hz_per_tesla"),
            )
        )
    sw = doc.get("sweep", {})
    noise = doc.get("noise", {})
    tr = doc.get("trace", {})
    return Scenario(
        modes=modes,
        species=tuple(species),
        b_start=float(sw.get("start_tesla", 0.0)),
        b_stop=float(sw.get("stop_tesla", sw.get("start_tesla", 0.0))),
        step_tesla=float(sw.get("step_tesla", 1e-3)),
        direction=sw.get("direction", "up"),
        sigma=float(noise.get("sigma", 0.0)),
        freq_jitter_hz=float(noise.get("freq_jitter_hz", 0.0)),
        seed=int(doc.get("seed", 0)),
        span_lw=float(tr.get("span_lw", 50.0)),
        points_per_mode=int(tr.get("points_per_mode", 1001)),
        baseline=float(tr.get("baseline", 1.0)),
        cutoff_g=float(doc.get("cutoff_g", DEFAULT_CUTOFF_G)),
    )


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise DataError(f"{path}: cannot read scenario ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
    try:
        return scenario_from_json(doc, base_dir=path.parent)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from exc


def gd_crossing_scenario(seed: int = 0, *, b_start=0.16, b_stop=0.18, g_hz=1.12e6, sigma=1e-3) -> Scenario:
    """One Q = 6.5e6 mode at 14.934048 GHz crossing the Gd |-5/2>->|-3/2> line.

    Frequency jitter per step is half the linewidth (1.14 kHz).
    """
    mode = ModeSpec(14.934048e9, 6.5e6, 0.0, -0.5)
    gd = SpeciesSpec("Gd3+", g_hz, system=gd_cawo4(), transitions=((-2.5, -1.5),))
    return Scenario(
        modes=(mode,),
        species=(gd,),
        b_start=b_start,
        b_stop=b_stop,
        step_tesla=1e-3,
        sigma=sigma,
        freq_jitter_hz=mode.gamma_hz / 2,
        seed=seed,
    )


def _line_freqs(sp: SpeciesSpec, pair, fields):
    if pair is None:
        return sp.intercept_hz + sp.slope_hz_per_tesla * fields
    lo, up = pair
    return np.array([transition_at(sp.system, lo, up, b) for b in fields])


def _line_name(sp, pair):
    if pair is None:
        return sp.name
    return f"{ket(pair[0])}->{ket(pair[1])}"


def _crossings(sp, pair, fp, b_lo, b_hi):
    if pair is None:
        if sp.slope_hz_per_tesla == 0:
            return []
        b = (fp - sp.intercept_hz) / sp.slope_hz_per_tesla
        return [b] if b_lo <= b <= b_hi else []
    return resonance_fields(sp.system, pair[0], pair[1], fp, b_hi, b_lo, step=min(5e-4, (b_hi - b_lo) / 4))


def photon_shift(fp, fs, g):
    """Shift of the photon-like branch for one spin line (fs > fp pulls it down)."""
    up, lo = _branches(fs, fp, g)
    return np.where(fs >= fp, lo, up) - fp


def ground_truth(sc: Scenario) -> dict:
    """Everything that determines the rendered traces, noise excluded."""
    fields = sc.fields
    pad = max(10 * sc.step_tesla, 1e-3)
    lines = []
    for sp in sc.species:
        for pair in sp.line_pairs():
            lines.append((sp, pair, _line_freqs(sp, pair, fields)))

    modes = []
    crossings = []
    for k, m in enumerate(sc.modes):
        shift = np.zeros(fields.size)
        for sp, pair, fs in lines:
            if sp.g_hz == 0:
                continue
            near = np.abs(fs - m.f0_hz) <= sc.cutoff_g * sp.g_hz
            shift[near] += photon_shift(m.f0_hz, fs[near], sp.g_hz)
            for b in _crossings(sp, pair, m.f0_hz, max(fields[0] - pad, 0.0), fields[-1] + pad):
                if pair is None:
                    slope = sp.slope_hz_per_tesla
                else:
                    slope = transition_slope(sp.system, *pair, b)
                crossings.append(
                    {
                        "mode_id": k,
                        "species": sp.name,
                        "line": _line_name(sp, pair),
                        "field_tesla": float(b),
                        "fp_hz": m.f0_hz,
                        "g_hz": sp.g_hz,
                        "slope_hz_per_tesla": float(slope),
                        "intercept_hz": float(m.f0_hz - slope * b),
                    }
                )
        modes.append(
            {
                "mode_id": k,
                "f0_hz": m.f0_hz,
                "q_factor": m.q_factor,
                "gamma_hz": m.gamma_hz,
                "fano_q": m.fano_q,
                "amp": m.amp,
                "centers_hz": (m.f0_hz + shift).tolist(),
            }
        )
    gammas = sorted((md["f0_hz"], md["gamma_hz"]) for md in modes)
    for (fa, ga), (fb, gb) in zip(gammas, gammas[1:]):
        if fb - fa < 3 * max(ga, gb):
            warnings.warn(f"modes at {fa!r} and {fb!r} Hz are closer than 3 linewidths", UserWarning, stacklevel=2)
    return {
        "fields_tesla": fields.tolist(),
        "step_tesla": sc.step_tesla,
        "direction": sc.direction,
        "modes": modes,
        "crossings": sorted(crossings, key=lambda c: (c["mode_id"], c["field_tesla"])),
        "lines": [
            {
                "species": sp.name,
                "line": _line_name(sp, pair),
                "delta_sz": 1 if pair is None else int(round(pair[1] - pair[0])),
                "g_hz": sp.g_hz,
                "freqs_hz": fs.tolist(),
            }
            for sp, pair, fs in lines
        ],
        "noise": {"sigma": sc.sigma, "freq_jitter_hz": sc.freq_jitter_hz},
        "trace": {"span_lw": sc.span_lw, "points_per_mode": sc.points_per_mode, "baseline": sc.baseline},
        "seed": sc.seed,
    }


def _grid(gt) -> np.ndarray:
    n = gt["trace"]["points_per_mode"]
    segs = [
        m["f0_hz"] + m["gamma_hz"] * gt["trace"]["span_lw"] * np.linspace(-1.0, 1.0, n)
        for m in gt["modes"]
    ]
    return np.unique(np.concatenate(segs)) if segs else np.zeros(0)


def render_step(gt: dict, i: int, rng) -> Trace:
    """Trace at step ``i`` of a ground truth, with noise drawn from ``rng``."""
    f = _grid(gt)
    y = np.full(f.size, gt["trace"]["baseline"])
    jitter = gt["noise"]["freq_jitter_hz"]
    for m in gt["modes"]:
        c = m["centers_hz"][i] + (rng.normal(0.0, jitter) if jitter > 0 else 0.0)
        y = y + fano_model(FanoParams(c, m["gamma_hz"], m["fano_q"], m["amp"], 0.0), f)
    if gt["noise"]["sigma"] > 0:
        y = y + rng.normal(0.0, gt["noise"]["sigma"], f.size)
    # magnitudes stay positive so the dB form exists
    y = np.maximum(y, 1e-12)
    return Trace(f, y, {"b_tesla": gt["fields_tesla"][i]})


def synth_sweep(sc: Scenario, out_dir, threads: int = 1) -> Path:
    """Write traces, ``manifest.json`` and ``ground_truth.json`` to ``out_dir``.

    Each step draws noise from its own stream spawned from the seed, so
    output is byte-identical for a given scenario regardless of ``threads``.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc.strerror}") from exc
    gt = ground_truth(sc)
    n = len(gt["fields_tesla"])
    streams = np.random.SeedSequence(sc.seed).spawn(n)

    def work(i):
        tr = render_step(gt, i, np.random.default_rng(streams[i]))
        name = _trace_name(i)
        write_trace_csv(tr, out_dir / name)
        return {"b_tesla": gt["fields_tesla"][i], "trace": name}

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as ex:
            entries = list(ex.map(work, range(n)))
    else:
        entries = [work(i) for i in range(n)]
    (out_dir / "ground_truth.json").write_text(json.dumps(gt, indent=1, sort_keys=True) + "\n")
    path = out_dir / "manifest.json"
    write_manifest(path, sc.step_tesla, entries, sc.direction)
    return path
