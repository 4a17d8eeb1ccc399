import json
import warnings
from dataclasses import replace

import numpy as np
import pytest

from wgmesr.errors import DataError, TrackingWarning
from wgmesr.lineshape import FanoParams, Trace, write_trace_csv
from wgmesr.modemap import (
    ModeTrace,
    SweepMap,
    extract_sites,
    load_sweep,
    read_modes_csv,
    read_sites_csv,
    save_sweep,
    seeds_from_first_step,
    track_modes,
    write_modes_csv,
    write_sites_csv,
)
from wgmesr.synth import ModeSpec, Scenario, SpeciesSpec, ground_truth, synth_sweep

F0 = 10e9
Q = 1e6
GAMMA = F0 / Q
SLOPE = 28e9


def line(name, bc, g=1e6, slope=SLOPE):
    return SpeciesSpec(name, g, intercept_hz=F0 - slope * bc, slope_hz_per_tesla=slope)


def scenario(species=(), b_start=0.10, b_stop=0.14, sigma=1e-3, seed=0, **kw):
    kw.setdefault("points_per_mode", 401)
    kw.setdefault("span_lw", 30.0)
    return Scenario((ModeSpec(F0, Q),), tuple(species), b_start, b_stop, 1e-3, sigma=sigma, seed=seed, **kw)


def run(sc, tmp_path):
    manifest = synth_sweep(sc, tmp_path)
    sweep = load_sweep(manifest)
    return sweep, track_modes(sweep, seeds_from_first_step(sweep)), json.loads((tmp_path / "ground_truth.json").read_text())


def lorentz_trace(f0, b):
    f = f0 + GAMMA * np.linspace(-30, 30, 301)
    y = 1.0 - 0.5 / (1 + ((f - f0) / (GAMMA / 2)) ** 2)
    return Trace(f, y, {"b_tesla": b})


def write_manual(tmp_path, fields, names=None):
    names = names or [f"t{i}.csv" for i in range(len(fields))]
    for b, name in zip(fields, names):
        if not (tmp_path / name).exists():
            write_trace_csv(lorentz_trace(F0, b), tmp_path / name)
    doc = {"step_tesla": 1e-3, "steps": [{"b_tesla": b, "trace": n} for b, n in zip(fields, names)]}
    p = tmp_path / "manifest.json"
    p.write_text(json.dumps(doc))
    return p


def noisy_trace(seed, n=100, sigma=50.0, offset=0.0):
    rng = np.random.default_rng(seed)
    f0 = F0 + offset + rng.normal(0, sigma, n)
    fields = np.round(0.1 + 1e-3 * np.arange(n), 12)
    return ModeTrace(0, fields, [FanoParams(f, GAMMA) for f in f0])


def test_load_three_steps(tmp_path):
    sweep = load_sweep(write_manual(tmp_path, [0.002, 0.0, 0.001]))
    assert len(sweep.steps) == 3
    assert sweep.fields.tolist() == [0.0, 0.001, 0.002]
    assert sweep.steps[1][1].meta["file"] == "t2.csv"


def test_load_missing_file_names_it(tmp_path):
    p = write_manual(tmp_path, [0.0, 0.001])
    (tmp_path / "t1.csv").unlink()
    with pytest.raises(DataError, match="t1.csv"):
        load_sweep(p)


def test_load_duplicate_field_is_error(tmp_path):
    p = write_manual(tmp_path, [0.0, 0.0], ["t0.csv", "t1.csv"])
    with pytest.raises(DataError, match="duplicate field"):
        load_sweep(p)


def test_load_repeated_identical_entry_is_merged(tmp_path):
    sweep = load_sweep(write_manual(tmp_path, [0.0, 0.0, 0.001], ["t0.csv", "t0.csv", "t1.csv"]))
    assert len(sweep.steps) == 2


def test_load_bad_manifest(tmp_path):
    p = tmp_path / "manifest.json"
    p.write_text("{not json")
    with pytest.raises(DataError, match="manifest.json:1"):
        load_sweep(p)
    with pytest.raises(DataError, match="cannot read"):
        load_sweep(tmp_path / "absent.json")


def test_sweepmap_validation():
    with pytest.raises(ValueError):
        SweepMap([], 0.0)
    with pytest.raises(ValueError):
        SweepMap([(0.0, lorentz_trace(F0, 0.0))] * 2, 1e-3)


def test_synth_sweep_round_trips_bit_identically(tmp_path):
    manifest = synth_sweep(scenario(b_stop=0.104), tmp_path / "a")
    sweep = load_sweep(manifest)
    out = save_sweep(sweep, tmp_path / "b")
    assert out.read_bytes() == manifest.read_bytes()
    for name in sorted(p.name for p in (tmp_path / "a").glob("b*.csv")):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    again = load_sweep(out)
    for (b1, t1), (b2, t2) in zip(sweep.steps, again.steps):
        assert b1 == b2
        assert np.array_equal(t1.s21, t2.s21) and np.array_equal(t1.freq_hz, t2.freq_hz)


def test_unperturbed_mode_tracks_without_gaps(tmp_path):
    sc = scenario(b_start=0.0, b_stop=0.099)
    sweep, traces, _ = run(sc, tmp_path)
    assert len(sweep.steps) == 100
    (mt,) = traces
    assert mt.gaps == []
    assert np.max(np.abs(mt.f0 - F0)) < GAMMA / 10
    assert np.all(mt.gamma > 0)
    assert extract_sites(traces) == []


def test_crossing_excursion_matches_injected_branch(tmp_path):
    sc = scenario([line("X", 0.1205)], sigma=0.0)
    sweep, (mt,), gt = run(sc, tmp_path)
    centers = np.array(gt["modes"][0]["centers_hz"])
    want = centers - F0
    got = mt.f0 - F0
    assert mt.locked.all()
    big = np.abs(want) > GAMMA
    assert big.sum() >= 4
    assert np.allclose(got[big], want[big], rtol=0.05)
    assert np.all(np.abs(got[~big] - want[~big]) < 0.05 * GAMMA)
    # tracking invariants
    assert np.all(np.abs(np.diff(mt.f0)) < mt.window_hz)
    assert np.all(mt.gamma > 0)


def test_empty_seed_list_gives_empty_result(tmp_path):
    sweep = load_sweep(write_manual(tmp_path, [0.0, 0.001]))
    assert track_modes(sweep, []) == []


def test_single_crossing_gives_one_site_near_resonance(tmp_path):
    bc = 0.1203
    sweep, traces, gt = run(scenario([line("X", bc)]), tmp_path)
    sites = extract_sites(traces)
    assert len(sites) == 1
    assert abs(sites[0].field - gt["crossings"][0]["field_tesla"]) <= 2e-3
    assert sites[0].width > 0


def test_unperturbed_traces_rarely_produce_sites():
    clean = sum(extract_sites([noisy_trace(seed)]) == [] for seed in range(1000))
    assert clean >= 990


def test_two_crossings_give_two_ordered_sites(tmp_path):
    sc = scenario([line("X", 0.1302), line("Y", 0.1702)], b_start=0.10, b_stop=0.20)
    _, traces, gt = run(sc, tmp_path)
    sites = extract_sites(traces)
    assert len(sites) == 2
    assert sites[0].field < sites[1].field
    for s, c in zip(sites, gt["crossings"]):
        assert abs(s.field - c["field_tesla"]) <= 2e-3


def test_site_strength_and_width_invariants(tmp_path):
    _, traces, _ = run(scenario([line("X", 0.1203)]), tmp_path)
    sites = extract_sites(traces, threshold_sigma=5.0)
    for s in sites:
        assert s.width > 0
        assert s.strength > 0


def test_short_trace_is_reported():
    mt = ModeTrace(0, np.arange(5) * 1e-3, [FanoParams(F0, GAMMA)] * 5)
    with pytest.warns(TrackingWarning, match="too short"):
        assert extract_sites([mt]) == []


def test_lost_lock_site_sits_in_the_gap():
    mt = noisy_trace(1)
    params = list(mt.params)
    params[40:43] = [None] * 3
    sites = extract_sites([ModeTrace(0, mt.fields, params)])
    assert len(sites) == 1
    assert sites[0].field == pytest.approx(mt.fields[41])
    assert sites[0].width == pytest.approx(3e-3)


def test_sites_invariant_under_frequency_offset():
    for seed in range(20):
        mt = noisy_trace(seed)
        params = list(mt.params)
        params[50] = replace(params[50], f0_hz=params[50].f0_hz - 5e3)
        a = extract_sites([ModeTrace(0, mt.fields, params)])
        b = extract_sites([ModeTrace(0, mt.fields, [replace(p, f0_hz=p.f0_hz + 1e6) for p in params])])
        assert len(a) == len(b) >= 1
        for sa, sb in zip(a, b):
            assert sb.field == sa.field
            assert sb.freq - sa.freq == pytest.approx(1e6, abs=1e-3)
            assert sb.strength == pytest.approx(sa.strength, rel=1e-6)
            assert sb.width == sa.width


def test_reversed_sweep_gives_same_sites(tmp_path):
    sweep, traces, _ = run(scenario([line("X", 0.1203)]), tmp_path)
    rev = sweep.reversed()
    back = track_modes(rev, seeds_from_first_step(rev))
    up, down = extract_sites(traces), extract_sites(back)
    assert len(up) == len(down) >= 1
    for a, b in zip(up, down):
        assert abs(a.field - b.field) <= 1e-3 + 1e-12


def test_tracking_is_deterministic(tmp_path):
    sweep, traces, _ = run(scenario([line("X", 0.1203)]), tmp_path)
    seeds = seeds_from_first_step(sweep)
    again = track_modes(sweep, seeds)
    threaded = track_modes(sweep, seeds, threads=2)
    for a, b, c in zip(traces, again, threaded):
        assert np.array_equal(a.f0, b.f0, equal_nan=True)
        assert np.array_equal(a.f0, c.f0, equal_nan=True)


def test_modes_and_sites_csv_round_trip(tmp_path):
    mt = noisy_trace(3)
    params = list(mt.params)
    params[10] = None
    mt = ModeTrace(2, mt.fields, params)
    write_modes_csv([mt], tmp_path / "modes.csv")
    (back,) = read_modes_csv(tmp_path / "modes.csv")
    assert back.mode_id == 2
    assert np.array_equal(back.f0, mt.f0, equal_nan=True)
    assert back.gaps == mt.gaps
    write_modes_csv([back], tmp_path / "modes2.csv")
    assert (tmp_path / "modes.csv").read_bytes() == (tmp_path / "modes2.csv").read_bytes()

    sites = extract_sites([mt])
    write_sites_csv(sites, tmp_path / "sites.csv")
    assert read_sites_csv(tmp_path / "sites.csv") == sites


def test_modes_csv_errors(tmp_path):
    p = tmp_path / "modes.csv"
    p.write_text("mode_id,b_tesla\n0,0.1\n")
    with pytest.raises(DataError, match="modes.csv:1"):
        read_modes_csv(p)
    p.write_text("mode_id,b_tesla,f0_hz,gamma_hz,q\n0,0.1,x,1,0\n")
    with pytest.raises(DataError, match="modes.csv:2"):
        read_modes_csv(p)


def test_ground_truth_matches_rendered_centres(tmp_path):
    sc = scenario([line("X", 0.1203)], sigma=0.0)
    gt = ground_truth(sc)
    _, (mt,), written = run(sc, tmp_path)
    assert written["modes"][0]["centers_hz"] == gt["modes"][0]["centers_hz"]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert np.allclose(mt.f0, gt["modes"][0]["centers_hz"], rtol=0, atol=1e-3 * GAMMA)
