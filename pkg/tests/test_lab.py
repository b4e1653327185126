import json
import math

import numpy as np
import pytest

from smol.lab import (
    REAL_DEVICE_VOLUME,
    ExperimentConfig,
    array_scale_for,
    cube_side,
    localization_rate,
    precision_translation_values,
    run_campaign,
    sigma_band_ok,
    speed_rotation_values,
    speed_translation_values,
)
from smol.model import OscillatorParams
from smol.sensors import MM


def _tiny(**kw):
    base = dict(scenario="translation", axis="x", values=(0.0, 1 * MM, 2 * MM), repeats=2, seed=3)
    base.update(kw)
    return ExperimentConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError, match="unknown scenario"):
        ExperimentConfig(scenario="teleport", values=(0.0,))
    with pytest.raises(ValueError, match="sweep range"):
        ExperimentConfig(scenario="translation", values=())
    with pytest.raises(ValueError):
        _tiny(repeats=0)
    with pytest.raises(ValueError):
        run_campaign(_tiny(axis="w"))


def test_value_helpers():
    assert len(speed_translation_values("x")) == 11
    assert np.allclose(np.array(speed_translation_values("z"))[[0, -1]], [-20 * MM, 40 * MM])
    assert len(speed_rotation_values()) == 18
    assert np.allclose(np.diff(precision_translation_values()), 0.2 * MM)


def test_campaign_reproducible_by_seed():
    a = run_campaign(_tiny())
    b = run_campaign(_tiny())
    c = run_campaign(_tiny(seed=4))
    assert a.digest() == b.digest()
    assert a.digest() != c.digest()


def test_parallel_matches_serial():
    assert run_campaign(_tiny(jobs=2)).digest() == run_campaign(_tiny()).digest()


def test_noise_free_translation_exact():
    rep = run_campaign(_tiny(noise_free=True))
    assert rep.summary["mae_diff_mm"] < 0.01  # finite-window filter residual only
    assert rep.summary["r2_min"] > 0.999


def test_report_written(tmp_path):
    rep = run_campaign(_tiny())
    files = rep.write(tmp_path)
    names = {f.name for f in files}
    assert {"translation_rows.jsonl", "translation_report.json", "translation_table.csv"} <= names
    assert len((tmp_path / "translation_rows.jsonl").read_text().splitlines()) == 6
    saved = json.loads((tmp_path / "translation_report.json").read_text())
    assert saved["digest"] == rep.digest()
    assert saved["meta"]["seed"] == 3


def test_rotation_wraps_at_zero():
    vals = tuple(np.radians([350.0, 0.0, 10.0]))
    rep = run_campaign(ExperimentConfig(scenario="rotation", axis="z", values=vals, repeats=1, noise_free=True))
    means = [t["mean_deg"] for t in rep.table]
    assert np.allclose(np.angle(np.exp(1j * np.radians(np.subtract(means, [350, 0, 10])))), 0, atol=1e-3)
    assert rep.summary["mae_diff_deg"] < 1e-2


def test_precision_table_shape():
    rep = run_campaign(ExperimentConfig(scenario="precision_vs_N", values=(1, 2, 4), repeats=3, seed=1))
    f = [t["f_loc_hz"] for t in rep.table]
    assert all(b < a for a, b in zip(f, f[1:]))
    assert [t["n_values"] for t in rep.table] == [50, 90, 170]
    assert len(rep.rows) == 9


def test_localization_rate_formula():
    p = OscillatorParams()
    assert localization_rate(p, 4, overhead=0.0) == pytest.approx(p.f_res / 2)


def test_sigma_band():
    assert sigma_band_ok([1.0, 0.9, 0.95], repeats=20)
    assert not sigma_band_ok([1.0, 2.0], repeats=20)


def test_damping_range_checked():
    with pytest.raises(ValueError, match="0, 35"):
        run_campaign(ExperimentConfig(scenario="damping", values=(40.0,), repeats=1))


def test_scaling_helpers():
    a = cube_side(REAL_DEVICE_VOLUME)
    assert a**3 == pytest.approx(REAL_DEVICE_VOLUME)
    assert array_scale_for(a / 2) == 1.0
    assert array_scale_for(3 * a) == pytest.approx(3.0)


def test_interference_without_tool_moment_is_identity():
    cfg = ExperimentConfig(scenario="interference", values=(80 * MM,), repeats=2, seed=5,
                           options={"scalpel_moment": 0.0})
    rep = run_campaign(cfg)
    t = rep.table[0]
    assert t["smol_change"] == 0.0
    assert t["static_degradation"] == 1.0


def test_superfast_static_hold():
    cfg = ExperimentConfig(scenario="superfast", N_seg=4, seed=2, options={"static": True, "duration_s": 0.8})
    rep = run_campaign(cfg)
    assert rep.summary["outliers"] == 0
    assert rep.summary["segments"] >= 30
    assert math.isfinite(rep.summary["sigma_xyz_first_window_mm"])
    xs = [r["position_mm"][0] for r in rep.rows[:20]]
    assert abs(np.median(xs) - 25.0) < 1.0
