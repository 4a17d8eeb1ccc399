"""The synth -> track -> sites -> fit-crossing chain used by end-to-end tests."""
import json

import numpy as np

from wgmesr.coupling import crossing_from_trace
from wgmesr.modemap import extract_sites, load_sweep, seeds_from_first_step, track_modes
from wgmesr.spinham import gd_cawo4, transition_slope
from wgmesr.synth import synth_sweep

GD_LINE = (-2.5, -1.5)


def recover_crossing(sc, out_dir):
    """Fit the strongest site of mode 0; returns (fit, ground_truth dict)."""
    manifest = synth_sweep(sc, out_dir)
    gt = json.loads((out_dir / "ground_truth.json").read_text())
    sweep = load_sweep(manifest)
    (mt,) = track_modes(sweep, seeds_from_first_step(sweep))
    sites = [s for s in extract_sites([mt]) if s.mode_id == 0]
    site = max(sites, key=lambda s: s.strength)
    slope = transition_slope(gd_cawo4(), *GD_LINE, site.field)
    fit = crossing_from_trace(mt.fields, mt.f0, site.field, site.freq, slope)
    return fit, gt


def within(fit, gt, g_rel=0.10, b_abs=2e-3):
    c = gt["crossings"][0]
    g_ok = abs(fit.model.g_hz / c["g_hz"] - 1) <= g_rel
    b_ok = abs(fit.model.crossing_field - c["field_tesla"]) <= b_abs
    return bool(g_ok and b_ok and np.isfinite(fit.stderr["g_hz"]))
