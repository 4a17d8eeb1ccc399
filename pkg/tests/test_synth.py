import json
import warnings

import numpy as np
import pytest

from pipeline import recover_crossing, within
from wgmesr.errors import DataError
from wgmesr.lineshape import FanoParams, fit_fano
from wgmesr.modemap import load_sweep, seeds_from_first_step, track_modes
from wgmesr.synth import (
    ModeSpec,
    Scenario,
    SpeciesSpec,
    gd_crossing_scenario,
    ground_truth,
    load_scenario,
    photon_shift,
    render_step,
    scenario_from_json,
    synth_sweep,
)

F0 = 10e9


def tree_bytes(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_trivial_scenario_is_flat(tmp_path):
    sc = Scenario((ModeSpec(F0, 1e6),), (), 0.0, 0.009, 1e-3, points_per_mode=401, span_lw=30)
    sweep = load_sweep(synth_sweep(sc, tmp_path))
    assert len(sweep.steps) == 10
    first = sweep.steps[0][1]
    for _, tr in sweep.steps[1:]:
        assert np.array_equal(tr.s21, first.s21)
    (mt,) = track_modes(sweep, seeds_from_first_step(sweep))
    assert np.max(np.abs(mt.f0 / mt.f0[0] - 1)) <= 1e-12


def test_same_seed_gives_byte_identical_tree(tmp_path):
    sc = gd_crossing_scenario(3, b_stop=0.166)
    synth_sweep(sc, tmp_path / "a")
    synth_sweep(sc, tmp_path / "b", threads=4)
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_ground_truth_records_the_crossing():
    gt = ground_truth(gd_crossing_scenario())
    (c,) = gt["crossings"]
    assert c["field_tesla"] == pytest.approx(0.165028, abs=2e-6)
    assert c["g_hz"] == 1.12e6
    assert c["slope_hz_per_tesla"] == pytest.approx(28.68e9, rel=1e-3)
    assert gt["lines"][0]["line"] == "|-5/2>->|-3/2>"


def test_rendered_centre_is_the_ground_truth_centre():
    sc = gd_crossing_scenario(sigma=0.0).replace(freq_jitter_hz=0.0)
    gt = ground_truth(sc)
    m = gt["modes"][0]
    for i in (0, 5, 10):
        tr = render_step(gt, i, np.random.default_rng(0))
        guess = FanoParams(m["centers_hz"][i] + 100.0, m["gamma_hz"] * 1.1, 0.0, -0.4, 1.0)
        fit, _ = fit_fano(tr, guess)
        assert fit.f0_hz == pytest.approx(m["centers_hz"][i], abs=1e-3 * m["gamma_hz"])


def test_photon_shift_sign():
    assert photon_shift(F0, F0 + 10e6, 1e6) < 0
    assert photon_shift(F0, F0 - 10e6, 1e6) > 0
    assert photon_shift(F0, F0 + 10e6, 1e6) == pytest.approx(-1e6**2 / 10e6, rel=0.01)


def test_cutoff_limits_the_pulled_range():
    line = SpeciesSpec("X", 1e6, intercept_hz=F0 - 28e9 * 0.5, slope_hz_per_tesla=28e9)
    sc = Scenario((ModeSpec(F0, 1e6),), (line,), 0.0, 1.0, 1e-2, cutoff_g=100.0)
    c = np.array(ground_truth(sc)["modes"][0]["centers_hz"]) - F0
    fs = F0 + 28e9 * (sc.fields - 0.5)
    assert np.all(c[np.abs(fs - F0) > 100e6] == 0.0)
    assert np.any(c != 0.0)


def test_two_seeds_share_truth_and_agree_within_errors(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    fa, gta = recover_crossing(gd_crossing_scenario(11), tmp_path / "a")
    fb, gtb = recover_crossing(gd_crossing_scenario(12), tmp_path / "b")
    assert {k: v for k, v in gta.items() if k != "seed"} == {k: v for k, v in gtb.items() if k != "seed"}
    assert (tmp_path / "a" / "b0005.csv").read_bytes() != (tmp_path / "b" / "b0005.csv").read_bytes()
    sa, sb = fa.stderr["g_hz"], fb.stderr["g_hz"]
    assert abs(fa.model.g_hz - fb.model.g_hz) <= 2 * np.hypot(sa, sb)
    assert within(fa, gta) and within(fb, gtb)


def test_close_modes_warn():
    sc = Scenario((ModeSpec(F0, 1e6), ModeSpec(F0 + 2e4, 1e6)), (), 0.0, 0.0, 1e-3)
    with pytest.warns(UserWarning, match="closer than 3 linewidths"):
        ground_truth(sc)


def test_separated_modes_do_not_warn():
    sc = Scenario((ModeSpec(F0, 1e6), ModeSpec(F0 + 1e6, 1e6)), (), 0.0, 0.0, 1e-3)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        ground_truth(sc)


@pytest.mark.parametrize(
    "kw",
    [dict(step_tesla=0.0), dict(b_start=1.0, b_stop=0.5), dict(sigma=-1.0), dict(direction="sideways")],
)
def test_invalid_scenario_rejected(kw):
    base = dict(modes=(ModeSpec(F0, 1e6),), b_start=0.0, b_stop=0.01, step_tesla=1e-3)
    base.update(kw)
    with pytest.raises(ValueError):
        Scenario(**base)


def test_invalid_mode_and_species_rejected():
    with pytest.raises(ValueError):
        ModeSpec(F0, 0.0)
    with pytest.raises(ValueError):
        SpeciesSpec("X", 1e6)
    with pytest.raises(ValueError):
        SpeciesSpec("X", -1.0, intercept_hz=0.0, slope_hz_per_tesla=1.0)


def test_scenario_json(tmp_path):
    doc = {
        "modes": [{"f0_hz": 14.934048e9, "q_factor": 6.5e6}],
        "species": [{"name": "Gd3+", "g_hz": 1.12e6, "system": "gd_cawo4", "transitions": [[-2.5, -1.5]]}],
        "sweep": {"start_tesla": 0.16, "stop_tesla": 0.18, "step_tesla": 0.001},
        "noise": {"sigma": 0.001, "freq_jitter_hz": 1148.8},
        "seed": 4,
    }
    p = tmp_path / "sc.json"
    p.write_text(json.dumps(doc))
    sc = load_scenario(p)
    assert sc.fields.size == 21
    assert sc.species[0].line_pairs() == [(-2.5, -1.5)]
    assert ground_truth(sc)["crossings"] == ground_truth(gd_crossing_scenario(4).replace(freq_jitter_hz=1148.8))["crossings"]


def test_scenario_json_errors(tmp_path):
    with pytest.raises(DataError, match="missing key"):
        scenario_from_json({"species": []})
    with pytest.raises(DataError):
        scenario_from_json({"modes": [{"f0_hz": -1.0, "q_factor": 1e6}]})
    p = tmp_path / "bad.json"
    p.write_text("{")
    with pytest.raises(DataError, match="bad.json:1"):
        load_scenario(p)
    with pytest.raises(DataError, match="cannot read"):
        load_scenario(tmp_path / "none.json")


def test_unwritable_output_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    sc = Scenario((ModeSpec(F0, 1e6),), (), 0.0, 0.0, 1e-3)
    with pytest.raises(OSError, match="cannot create output directory"):
        synth_sweep(sc, blocker / "sub")
