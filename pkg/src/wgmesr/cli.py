"""Command-line entry point: ``wgmesr <subcommand> ...``.

Frequencies are Hz and fields tesla everywhere; nothing is unit-guessed.
JSON (or CSV) results go to ``--out`` or standard output; human-readable
tables go to standard error unless ``--quiet``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 non-convergence.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, constants
from .errors import DataError, DegenerateFitError, UnfittableError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_FIT = 0, 1, 2, 3
CONFIG_ENV = "WGMESR_CONFIG"


class UsageError(Exception):
    pass


class NotConverged(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\nRun '{self.prog} --help' for the options.\n")


@dataclass
class CliConfig:
    constants: dict = field(default_factory=dict)
    threads: int = 1
    seed: int = 0
    format: str = "json"
    tolerances: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.threads < 1:
            raise UsageError("config: threads must be >= 1")
        if self.format not in ("json", "csv"):
            raise UsageError("config: format must be 'json' or 'csv'")
        unknown = set(self.constants) - set(constants._NAMES)
        if unknown:
            raise UsageError(f"config: unknown constant(s) {sorted(unknown)}; known: {list(constants._NAMES)}")


def load_config(path) -> CliConfig:
    if path is None:
        return CliConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise DataError(f"{path}: cannot read config ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{exc.lineno}: invalid JSON in config ({exc.msg})") from exc
    allowed = {"constants", "threads", "seed", "format", "tolerances"}
    extra = set(doc) - allowed
    if extra:
        raise UsageError(f"{path}: unknown config key(s) {sorted(extra)}; allowed: {sorted(allowed)}")
    return CliConfig(**doc)


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=True) + "\n"


class Out:
    def __init__(self, args):
        self.args = args

    def write(self, text: str):
        if getattr(self.args, "out", None):
            Path(self.args.out).write_text(text)
        else:
            sys.stdout.write(text)

    def json(self, obj):
        self.write(_dump(obj))

    def human(self, text: str):
        if not self.args.quiet:
            sys.stderr.write(text.rstrip("\n") + "\n")


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    return buf.getvalue()


def _system(args):
    from .spinham import gd_cawo4, load_system

    if args.system is None:
        return gd_cawo4()
    try:
        return load_system(args.system)
    except OSError as exc:
        raise DataError(f"{args.system}: cannot read spin system ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{args.system}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
    except ValueError as exc:
        raise DataError(f"{args.system}: {exc}") from exc


def _grid(args):
    if not args.bmax > args.bmin:
        raise UsageError(f"empty field range: --bmax ({args.bmax}) must exceed --bmin ({args.bmin})")
    if args.npts < 2:
        raise UsageError("--npts must be >= 2")
    return np.linspace(args.bmin, args.bmax, args.npts)


def cmd_levels(args, cfg, out):
    import warnings

    from .errors import TrackingWarning
    from .spinham import format_m, level_diagram

    system = _system(args)
    grid = _grid(args)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", TrackingWarning)
        d = level_diagram(system, grid)
    for w in caught:
        out.human(f"warning: {w.message}")
    header = ["b_tesla"] + [f"E_{format_m(m)}_hz" for m in d.labels]
    out.write(_csv_text(header, [[b, *e] for b, e in zip(grid, d.energies)]))
    return EXIT_OK


def cmd_transitions(args, cfg, out):
    from .spinham import level_diagram, transitions

    system = _system(args)
    grid = _grid(args)
    lines = transitions(level_diagram(system, grid), args.max_dsz)
    header = ["b_tesla"] + [ln.name for ln in lines]
    out.write(_csv_text(header, [[b, *(ln.freqs[i] for ln in lines)] for i, b in enumerate(grid)]))
    return EXIT_OK


def cmd_zfs(args, cfg, out):
    from .spinham import zfs

    rows = zfs(_system(args))
    out.json([{"pair": k, "zfs_hz": v} for k, v in rows])
    out.human("\n".join(f"{k:>22s}  {v / 1e9:10.4f} GHz" for k, v in rows))
    return EXIT_OK


def _trace(path):
    from .lineshape import read_trace_csv

    return read_trace_csv(path)


def cmd_fit_fano(args, cfg, out):
    from .lineshape import FanoParams, find_peaks, fit_fano, noise_sigma

    tr = _trace(args.trace)
    if args.f0_hz is None:
        prom = args.min_prominence if args.min_prominence is not None else 8.0 * noise_sigma(tr.s21)
        found = find_peaks(tr, max(prom, 1e-12))
        if not found:
            raise DataError(f"{args.trace}: no resonance found; pass --f0-hz and --gamma-hz")
        guess = max(found, key=lambda p: abs(p.amp))
    else:
        if args.gamma_hz is None:
            raise UsageError("--gamma-hz is required with --f0-hz")
        base = float(np.median(tr.s21))
        amp = args.amp if args.amp is not None else float(tr.s21[np.argmin(np.abs(tr.freq_hz - args.f0_hz))] - base)
        guess = FanoParams(args.f0_hz, args.gamma_hz, args.q, amp if amp != 0 else -1e-3, base)
    params, rep = fit_fano(tr, guess, max_iter=args.max_iter)
    out.json({"params": params.to_json(), "quality": rep.to_json()})
    out.human(f"f0 = {params.f0_hz:.6f} Hz  gamma = {params.gamma_hz:.4g} Hz  Q = {rep.q_factor:.4g}  q = {params.fano_q:.4g}")
    if not rep.converged:
        raise NotConverged(f"fit did not converge in {args.max_iter} iterations")
    return EXIT_OK


def cmd_census(args, cfg, out):
    from .lineshape import census, noise_sigma

    tr = _trace(args.trace)
    prom = args.min_prominence if args.min_prominence is not None else 8.0 * noise_sigma(tr.s21)
    res = census(tr, max(prom, 1e-12), args.min_q, threads=cfg.threads)
    rows = [[p.f0_hz, p.gamma_hz, r.q_factor, r.loss_tangent, p.fano_q, r.converged] for p, r in res]
    header = ["f0_hz", "gamma_hz", "q_factor", "loss_tangent", "fano_q", "converged"]
    if cfg.format == "csv":
        out.write(_csv_text(header, rows))
    else:
        out.json([dict(zip(header, r)) for r in rows])
    out.human(f"{len(rows)} mode(s)\n" + "\n".join(f"{r[0] / 1e9:14.9f} GHz  Q = {r[2]:.3e}" for r in rows))
    return EXIT_OK


def _seeds(args, sweep):
    from .lineshape import FanoParams
    from .modemap import seeds_from_first_step

    if args.seeds is None:
        return seeds_from_first_step(sweep, args.min_prominence)
    try:
        doc = json.loads(Path(args.seeds).read_text())
        return [FanoParams(**{k: d[k] for k in ("f0_hz", "gamma_hz", "fano_q", "amp", "offset") if k in d}) for d in doc]
    except (OSError, json.JSONDecodeError, TypeError, KeyError, ValueError) as exc:
        raise DataError(f"{args.seeds}: cannot read seeds ({exc})") from exc


def cmd_track(args, cfg, out):
    from .modemap import load_sweep, track_modes, write_modes_csv

    sweep = load_sweep(args.manifest)
    seeds = _seeds(args, sweep)
    window_lw = cfg.tolerances.get("window_lw", 20.0)
    traces = track_modes(sweep, seeds, args.window_hz, window_lw=window_lw, threads=cfg.threads)
    _write_via(write_modes_csv, traces, args)
    out.human("\n".join(f"mode {t.mode_id}: {int(t.locked.sum())}/{t.locked.size} locked, gaps {t.gaps}" for t in traces))
    return EXIT_OK


def _write_via(writer, items, args):
    if args.out:
        writer(items, args.out)
        return
    import tempfile

    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "out.csv"
        writer(items, p)
        sys.stdout.write(p.read_text())


def cmd_sites(args, cfg, out):
    import warnings

    from .errors import TrackingWarning
    from .modemap import extract_sites, read_modes_csv, write_sites_csv

    traces = read_modes_csv(args.modes)
    thr = args.threshold if args.threshold is not None else cfg.tolerances.get("threshold_sigma", 5.0)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", TrackingWarning)
        sites = extract_sites(traces, thr)
    for w in caught:
        out.human(f"warning: {w.message}")
    _write_via(write_sites_csv, sites, args)
    out.human(f"{len(sites)} site(s)")
    return EXIT_OK


def _points(path):
    """Rows of (b_tesla, f_hz[, mode_id]) from a plain, modes or sites CSV."""
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"{path}: cannot open ({exc.strerror}); check the path") from exc
    with fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        fcol = "f_hz" if "f_hz" in cols else "f0_hz" if "f0_hz" in cols else None
        if "b_tesla" not in cols or fcol is None:
            raise DataError(f"{path}:1: need columns b_tesla and f_hz (or f0_hz); found {cols}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append((float(row["b_tesla"]), float(row[fcol]), int(row.get("mode_id") or 0)))
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return rows


def cmd_identify(args, cfg, out):
    from .species import identify, load_species_db

    try:
        db = load_species_db(args.db)
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise DataError(f"{args.db or 'species db'}: {exc}") from exc
    pts = [(b, f) for b, f, _ in _points(args.sites)]
    tol = args.tol_hz if args.tol_hz is not None else cfg.tolerances.get("ransac_tol_hz", 50e6)
    mi = args.min_inliers if args.min_inliers is not None else cfg.tolerances.get("min_inliers", 4)
    res = identify(pts, db, tol_hz=tol, min_inliers=mi, n_iter=args.iterations, seed=args.seed)
    out.json(res)
    out.human(
        "\n".join(
            f"{ln['label']:<28s} {ln['status']:<12s} g_eff = {ln['line']['g_eff']:.3f}  ZFS = {ln['line']['intercept_hz'] / 1e9:.3f} GHz"
            for ln in res["lines"]
        )
        + f"\n{len(res['unassigned'])} unassigned site(s)"
    )
    return EXIT_OK


def cmd_fit_crossing(args, cfg, out):
    from .coupling import ConcentrationInput, concentration, fit_crossing, guess_crossing

    rows = _points(args.points)
    if args.mode_id is not None:
        rows = [r for r in rows if r[2] == args.mode_id]
    b = np.array([r[0] for r in rows])
    y = np.array([r[1] for r in rows])
    ok = np.isfinite(y)
    if args.half_width_tesla is not None:
        ok &= np.abs(b - args.bc_tesla) <= args.half_width_tesla
    b, y = b[ok], y[ok]
    slope = args.slope_hz_per_tesla
    if slope is None:
        if args.transition is None:
            raise UsageError("give --slope-hz-per-tesla, or --transition=LOWER,UPPER (with --system) to take it from the spin Hamiltonian")
        from .spinham import transition_slope

        slope = transition_slope(_system(args), args.transition[0], args.transition[1], args.bc_tesla)
    if b.size == 0:
        raise DataError(f"{args.points}: no usable points")
    guess = guess_crossing(b, y, args.bc_tesla, slope, args.fp_hz)
    if args.g_hz is not None:
        guess = type(guess)(guess.fp_hz, guess.spin_intercept_hz, guess.spin_slope_hz_per_tesla, args.g_hz)
    fit = fit_crossing(b, y, guess, fix=tuple(args.fix), sigma_hz=args.sigma_hz)
    res = fit.to_json()
    if args.gl is not None:
        n, sn = concentration(
            ConcentrationInput(fit.model.g_hz, fit.model.fp_hz, args.gl, args.xi, g_sigma=fit.stderr["g_hz"])
        )
        res["n_cm3"] = n
        res["n_cm3_stderr"] = sn
    out.json(res)
    out.human(
        f"g = {fit.model.g_hz:.6g} +/- {fit.stderr['g_hz']:.3g} Hz   fp = {fit.model.fp_hz:.3f} Hz   "
        f"Bc = {fit.model.crossing_field:.6f} T"
    )
    if not fit.converged:
        raise NotConverged("crossing fit did not converge")
    return EXIT_OK


def cmd_concentration(args, cfg, out):
    from .coupling import ConcentrationInput, concentration

    try:
        inp = ConcentrationInput(args.g_hz, args.fp_hz, args.gl, args.xi, args.g_sigma, args.fp_sigma, args.gl_sigma, args.xi_sigma)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    n, s = concentration(inp)
    out.json({"n_cm3": n, "n_cm3_stderr": s})
    out.human(f"n = {n:.4g} +/- {s:.3g} cm^-3")
    return EXIT_OK


def cmd_synth(args, cfg, out):
    from .synth import load_scenario, synth_sweep

    sc = load_scenario(args.scenario)
    if args.seed_given:
        sc = sc.replace(seed=args.seed)
    try:
        path = synth_sweep(sc, args.out_dir, threads=cfg.threads)
    except OSError as exc:
        raise DataError(str(exc)) from exc
    out.json({"manifest": str(path), "ground_truth": str(Path(args.out_dir) / "ground_truth.json")})
    return EXIT_OK


def _pair(text):
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected LOWER,UPPER (e.g. -5/2,-3/2), got {text!r}")
    return parts[0].strip(), parts[1].strip()


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--quiet", action="store_true", help="no human-readable tables on stderr")
    common.add_argument("--config", default=None, help=f"JSON config file (default: ${CONFIG_ENV})")
    common.add_argument("--seed", type=int, default=None, help="RNG seed (default: config seed, else 0)")
    common.add_argument("--threads", type=int, default=None)
    common.add_argument("--format", choices=("json", "csv"), default=None)

    p = _Parser(prog="wgmesr", description="Multi-mode microwave ESR analysis.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, fn, help):
        sp = sub.add_parser(name, parents=[common], help=help, description=help)
        sp.set_defaults(func=fn)
        return sp

    def system_args(sp):
        sp.add_argument("--system", default=None, help="spin-system JSON (default: built-in CaWO4:Gd3+)")

    def range_args(sp):
        sp.add_argument("--bmin", type=float, default=0.0, help="tesla")
        sp.add_argument("--bmax", type=float, required=True, help="tesla")
        sp.add_argument("--npts", type=int, default=201)

    sp = add("levels", cmd_levels, "energy levels over a field range (CSV)")
    system_args(sp)
    range_args(sp)
    sp.add_argument("--out")

    sp = add("transitions", cmd_transitions, "transition frequencies over a field range (CSV)")
    system_args(sp)
    range_args(sp)
    sp.add_argument("--max-dsz", type=int, default=None)
    sp.add_argument("--out")

    sp = add("zfs", cmd_zfs, "zero-field splittings (JSON)")
    system_args(sp)
    sp.add_argument("--out")

    sp = add("fit-fano", cmd_fit_fano, "fit one resonance in a trace CSV (freq_hz,s21_db)")
    sp.add_argument("--trace", required=True)
    sp.add_argument("--f0-hz", type=float)
    sp.add_argument("--gamma-hz", type=float)
    sp.add_argument("--q", type=float, default=0.0, help="Fano q guess")
    sp.add_argument("--amp", type=float)
    sp.add_argument("--min-prominence", type=float)
    sp.add_argument("--max-iter", type=int, default=200)
    sp.add_argument("--out")

    sp = add("census", cmd_census, "fit every resonance in a zero-field trace; Q-factor table")
    sp.add_argument("--trace", required=True)
    sp.add_argument("--min-prominence", type=float)
    sp.add_argument("--min-q", type=float, default=0.0)
    sp.add_argument("--out")

    sp = add("track", cmd_track, "track modes through a sweep manifest -> modes.csv")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--seeds", help="JSON list of lineshape guesses (default: all resonances of the first step)")
    sp.add_argument("--window-hz", type=float)
    sp.add_argument("--min-prominence", type=float)
    sp.add_argument("--out")

    sp = add("sites", cmd_sites, "perturbation sites from modes.csv -> sites.csv")
    sp.add_argument("--modes", required=True)
    sp.add_argument("--threshold", type=float, help="sigma multiple (default 5)")
    sp.add_argument("--out")

    sp = add("identify", cmd_identify, "group sites into lines and match species -> identify.json")
    sp.add_argument("--sites", required=True)
    sp.add_argument("--db", help="species database JSON (default: bundled)")
    sp.add_argument("--tol-hz", type=float)
    sp.add_argument("--min-inliers", type=int)
    sp.add_argument("--iterations", type=int, default=2000)
    sp.add_argument("--out")

    sp = add("fit-crossing", cmd_fit_crossing, "fit an avoided crossing to (b_tesla, f_hz) points")
    sp.add_argument("--points", required=True, help="CSV with b_tesla and f_hz (or modes.csv)")
    sp.add_argument("--mode-id", type=int)
    sp.add_argument("--bc-tesla", type=float, required=True, help="crossing field guess")
    sp.add_argument("--slope-hz-per-tesla", type=float)
    system_args(sp)
    sp.add_argument("--transition", type=_pair, metavar="LOWER,UPPER", help="e.g. --transition=-5/2,-3/2")
    sp.add_argument("--fp-hz", type=float)
    sp.add_argument("--g-hz", type=float)
    sp.add_argument("--fix", action="append", default=[], help="parameter held at its guess (repeatable)")
    sp.add_argument("--sigma-hz", type=float)
    sp.add_argument("--half-width-tesla", type=float)
    sp.add_argument("--gl", type=float, help="Lande g; also report the spin density")
    sp.add_argument("--xi", type=float, default=1.0)
    sp.add_argument("--out")

    sp = add("concentration", cmd_concentration, "spin density from a coupling rate")
    sp.add_argument("--g-hz", type=float, required=True)
    sp.add_argument("--fp-hz", type=float, required=True)
    sp.add_argument("--gl", type=float, required=True)
    sp.add_argument("--xi", type=float, default=1.0)
    sp.add_argument("--g-sigma", type=float, default=0.0)
    sp.add_argument("--fp-sigma", type=float, default=0.0)
    sp.add_argument("--gl-sigma", type=float, default=0.0)
    sp.add_argument("--xi-sigma", type=float, default=0.0)
    sp.add_argument("--out")

    sp = add("synth", cmd_synth, "generate a synthetic sweep from a scenario JSON")
    sp.add_argument("--scenario", required=True)
    sp.add_argument("--out-dir", required=True)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config or os.environ.get(CONFIG_ENV) or None)
        if args.threads is not None:
            cfg.threads = args.threads
        if args.format is not None:
            cfg.format = args.format
        if cfg.threads < 1:
            raise UsageError("--threads must be >= 1")
        args.seed_given = args.seed is not None
        if args.seed is None:
            args.seed = cfg.seed
        out = Out(args)
        with constants.override(**cfg.constants):
            return args.func(args, cfg, out)
    except UsageError as exc:
        sys.stderr.write(f"wgmesr {args.command}: error: {exc}\n")
        return EXIT_USAGE
    except (DataError, DegenerateFitError, FileNotFoundError) as exc:
        sys.stderr.write(f"wgmesr {args.command}: data error: {exc}\n")
        return EXIT_DATA
    except (NotConverged, np.linalg.LinAlgError) as exc:
        sys.stderr.write(f"wgmesr {args.command}: not converged: {exc}\n")
        return EXIT_FIT
    except UnfittableError as exc:
        sys.stderr.write(f"wgmesr {args.command}: data error: {exc}\n")
        return EXIT_DATA


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
