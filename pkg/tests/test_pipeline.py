import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from smol.model import MagnetSpec, OscillatorParams, reference_pose, synthesize_signal
from smol.pipeline import (
    FilterConfig,
    NoiseModel,
    NoSignalError,
    central_difference,
    default_noise_model,
    dft_snr,
    downsample_half_periods,
    estimate_phase_anchor,
    filter_chain,
    inject_noise,
    load_noise_trace,
    moving_mean,
    moving_mean_array,
    nominal_rate,
    saturate_quantize,
    save_noise_trace,
    segment_signal,
    spatial_difference,
)
from smol.sensors import MM, NT, UT, ConfigurationError, SensorArray, SensorSpec, SignalFrame, default_array

FS = 50_000.0


def frame_of(data, fs=FS, t0=0.0, units="T"):
    return SignalFrame(np.atleast_2d(np.asarray(data, dtype=float)), fs, t0, units)


@pytest.fixture(scope="module")
def arr():
    return default_array()


@pytest.fixture(scope="module")
def clean2s(arr):
    return synthesize_signal(reference_pose(), OscillatorParams(), MagnetSpec(), arr, 2.0)


# noise

def test_zero_noise_is_identity(arr):
    fr = synthesize_signal(reference_pose(), OscillatorParams(), MagnetSpec(), arr, 0.05)
    out = inject_noise(fr, NoiseModel(), arr)
    assert np.array_equal(out.data, fr.data)


def test_noise_determinism(arr):
    fr = synthesize_signal(reference_pose(), OscillatorParams(), MagnetSpec(), arr, 0.05)
    nm = default_noise_model(arr, seed=42)
    a = inject_noise(fr, nm, arr)
    b = inject_noise(fr, nm, arr)
    assert np.array_equal(a.data, b.data)
    c = inject_noise(fr, nm.with_seed(43), arr)
    assert not np.array_equal(a.data, c.data)


def test_recorded_trace_too_short(arr, tmp_path):
    fr = synthesize_signal(reference_pose(), OscillatorParams(), MagnetSpec(), arr, 0.01)
    nm = NoiseModel(recorded={0: np.zeros(10)}, recorded_rate=FS)
    with pytest.raises(ValueError):
        inject_noise(fr, nm, arr)


def test_recorded_trace_roundtrip_and_injection(arr, tmp_path):
    rng = np.random.default_rng(1)
    trace = rng.normal(size=2000) * 1e-8
    p = tmp_path / "noise.csv"
    save_noise_trace(p, trace, FS)
    values, rate = load_noise_trace(p)
    assert rate == pytest.approx(FS)
    assert np.array_equal(values, trace)
    fr = frame_of(np.zeros((10, 500)))
    out = inject_noise(fr, NoiseModel(recorded={0: values}, recorded_rate=rate, seed=3), arr)
    # circular shift of the recorded trace, identical on every channel (no gradient)
    assert np.array_equal(out.data[0], out.data[5])
    assert any(np.array_equal(out.data[0], np.roll(trace, -k)[:500]) for k in range(len(trace)))


def test_noise_model_invariants():
    with pytest.raises(ValueError):
        NoiseModel(mains_amp=-1)
    with pytest.raises(ValueError):
        NoiseModel(gradient_factors=(0.0, 0.25))


def test_raw_snr_calibrated(arr, clean2s):
    raw = inject_noise(clean2s, default_noise_model(arr, seed=0), arr)
    assert dft_snr(raw, 103.5) == pytest.approx(1.1, abs=0.11)


# saturation / quantization

def test_saturate_quantize_examples():
    arr = SensorArray((SensorSpec((0, 0, 0), (0, 0, 1)),), FS, (0,))
    out = saturate_quantize(frame_of([[15 * UT, -15 * UT, 0.26 * NT, 3.04 * NT]]), arr)
    assert out.data[0, 0] == pytest.approx(10 * UT)
    assert out.data[0, 1] == pytest.approx(-10 * UT)
    assert out.data[0, 2] == pytest.approx(0.3 * NT, rel=1e-12)


@given(st.lists(st.floats(-9.9e-6, 9.9e-6), min_size=1, max_size=50))
def test_quantization_bound(values):
    arr = SensorArray((SensorSpec((0, 0, 0), (0, 0, 1)),), FS, (0,))
    out = saturate_quantize(frame_of([values]), arr)
    assert np.all(np.abs(out.data[0] - values) <= 0.05 * NT * (1 + 1e-9))


# spatial difference

def test_common_mode_removed(arr):
    rng = np.random.default_rng(0)
    common = rng.normal(size=300)
    sig = rng.normal(size=(10, 300))
    out = spatial_difference(frame_of(sig + common), arr)
    ref = spatial_difference(frame_of(sig), arr)
    assert out.n_channels == 9
    assert 9 not in out.channel_ids
    assert np.allclose(out.data, ref.data, atol=1e-12)


def test_missing_reference_raises(arr):
    fr = SignalFrame(np.zeros((3, 10)), FS, 0.0, "T", (0, 1, 2))
    with pytest.raises(ConfigurationError):
        spatial_difference(fr, arr)


def test_reference_bias_matches_dipole_oracle(arr, clean2s):
    # the far reference still sees the device; the model side subtracts it identically
    ranges = np.ptp(clean2s.data, axis=1)
    ratio = ranges[9] / ranges[:9].max()
    assert 0.05 < ratio < 0.2


@pytest.mark.xfail(strict=True, reason="(-100, -100) mm reference sees ~13% of the strongest channel; see decisions ledger")
def test_reference_bias_below_one_percent(arr, clean2s):
    ranges = np.ptp(clean2s.data, axis=1)
    assert ranges[9] < 0.01 * ranges[:9].max()


def test_spatial_difference_gain(arr, clean2s):
    raw = inject_noise(clean2s, default_noise_model(arr, seed=0), arr)
    s0 = dft_snr(raw, 103.5)
    s1 = dft_snr(spatial_difference(raw, arr), 103.5)
    s2 = dft_snr(filter_chain(raw, arr), 103.5)
    assert s0 < s1 < s2
    assert s1 / s0 == pytest.approx(11.0, rel=0.25)


# moving mean

def test_moving_mean_constant():
    x = np.full((2, 400), 3.7)
    assert np.allclose(moving_mean_array(x), 3.7, rtol=1e-14)


def _gain(f, passes):
    n = 20_000
    t = np.arange(n) / FS
    x = np.sin(2 * math.pi * f * t)
    y = moving_mean_array(x, 50, passes)
    core = slice(1000, n - 1000)
    return np.abs(np.fft.rfft(y[core])).max() / np.abs(np.fft.rfft(x[core])).max()


def _sinc_gain(f, w=50):
    x = math.pi * f / FS
    return abs(math.sin(w * x) / (w * math.sin(x)))


@pytest.mark.parametrize("f", [103.5, 207.0, 1000.0, 5000.0])
def test_moving_mean_sinc_response(f):
    assert _gain(f, 1) == pytest.approx(_sinc_gain(f), abs=2e-3)
    assert _gain(f, 2) == pytest.approx(_sinc_gain(f) ** 2, abs=2e-3)


def test_moving_mean_stopband():
    assert _gain(5000.0, 1) < 0.2


@pytest.mark.xfail(strict=True, reason="window 50 at 50 kS/s attenuates 103.5 Hz by 1.75% per pass; see decisions ledger")
def test_moving_mean_passband_one_percent():
    assert _gain(103.5, 1) > 0.99


def test_two_passes_triangular():
    rng = np.random.default_rng(2)
    x = rng.normal(size=2000)
    w = 50
    y = moving_mean_array(x, w, 2)
    tri = np.convolve(np.ones(w), np.ones(w)) / w**2  # width 2w - 1
    ref = np.convolve(x, tri, mode="full")
    # alternate half-sample offsets put the triangle's peak at lag w // 2 + (w - 1) // 2
    shift = w - 1
    core = np.arange(2 * w, 2000 - 2 * w)
    assert np.allclose(y[core], ref[core + shift], atol=1e-12)


def test_window_longer_than_channel():
    with pytest.raises(ValueError):
        moving_mean(frame_of(np.zeros((1, 10))), 50)


# central difference

def test_central_difference_ramp_and_dc():
    t = np.arange(100) / FS
    out = central_difference(frame_of([2.5 * t, np.full(100, 4.0)]))
    assert np.allclose(out.data[0], 2.5, rtol=1e-9)
    assert np.allclose(out.data[1], 0.0)
    assert out.units == "T/s"


def test_central_difference_sine_response():
    f = 1000.0
    n = 5000
    t = np.arange(n) / FS
    out = central_difference(frame_of(np.sin(2 * math.pi * f * t))).data[0]
    gain = FS * math.sin(2 * math.pi * f / FS)
    expect = gain * np.cos(2 * math.pi * f * t)  # +90 deg
    assert np.allclose(out[1:-1], expect[1:-1], rtol=0, atol=1e-9 * gain)


# SNR

def test_dft_snr_pure_sine():
    t = np.arange(50_000) / FS
    assert dft_snr(frame_of(np.sin(2 * math.pi * 103.0 * t)), 103.0) > 1e3


def test_dft_snr_equal_tones():
    t = np.arange(50_000) / FS
    x = np.sin(2 * math.pi * 103.0 * t) + np.sin(2 * math.pi * 50.0 * t + 1.0)
    assert dft_snr(frame_of(x), 103.0) == pytest.approx(1.0, rel=0.01)


def test_dft_snr_short_frame():
    with pytest.raises(ValueError):
        dft_snr(frame_of(np.zeros(1000)), 103.5)


# phase and anchor

@pytest.mark.parametrize("phi", [0.0, 0.7, -2.0, 3.0])
def test_phase_roundtrip(arr, phi):
    p = OscillatorParams(phi=phi)
    fr = synthesize_signal(reference_pose(), p, MagnetSpec(), arr, 0.3)
    filt = filter_chain(fr, arr)
    # a rough prior (1 rad off) only picks the branch
    est, _ = estimate_phase_anchor(filt, p.f_res, p.eta, p.damping_law, phi_prior=phi + 1.0)
    assert abs(math.remainder(est - phi, 2 * math.pi)) < 0.01
    # without a prior the phase is fixed modulo pi only
    free, _ = estimate_phase_anchor(filt, p.f_res, p.eta, p.damping_law)
    assert abs(math.remainder(free - phi, math.pi)) < 0.01


def test_all_zero_frame_no_signal():
    with pytest.raises(NoSignalError):
        estimate_phase_anchor(frame_of(np.zeros((9, 2000)), units="T/s"), 103.5)


def test_anchor_half_period_shift(arr):
    p = OscillatorParams(eta=0.0)
    half = 1 / (2 * p.f_res)
    filt = filter_chain(synthesize_signal(reference_pose(), p, MagnetSpec(), arr, 0.2), arr)
    delayed = SignalFrame(filt.data, filt.sample_rate, filt.start_time + half, filt.units, filt.channel_ids)
    phi0, a0 = estimate_phase_anchor(filt, p.f_res, phi_prior=0.0, t_min=0.01)
    _, a1 = estimate_phase_anchor(delayed, p.f_res, phi_prior=phi0 - math.pi, t_min=0.01 + half)
    assert a1 - a0 == pytest.approx(half, abs=1e-12)


# down-sampling

def test_downsample_counts():
    fr = frame_of(np.zeros((10, 20_000)))
    obs = downsample_half_periods(fr, 103.5, 1, 0.01)
    assert obs.values.shape == (10, 5)
    obs = downsample_half_periods(fr, 103.5, 20, 0.01)
    assert obs.size == 810


@given(st.integers(1, 30))
def test_downsample_spacing(N):
    fr = frame_of(np.zeros((2, 20_000)))
    obs = downsample_half_periods(fr, 103.5, N, 0.005)
    assert np.allclose(np.diff(obs.timestamps), 1 / (8 * 103.5), rtol=1e-12)
    assert obs.span == pytest.approx(N / (2 * 103.5))


def test_downsample_insufficient_span():
    with pytest.raises(ValueError):
        downsample_half_periods(frame_of(np.zeros((1, 100))), 103.5, 2, 0.0)


def test_downsample_reproduces_bandlimited_samples():
    f = 103.5
    ts_anchor = 0.004
    t = np.arange(5000) / FS
    x = sum(np.cos(2 * math.pi * k * f * t + k) for k in range(1, 5))
    fr = frame_of(x)
    obs = downsample_half_periods(fr, f, 3, ts_anchor)
    exact = sum(np.cos(2 * math.pi * k * f * obs.timestamps + k) for k in range(1, 5))
    # linear interpolation at 50 kS/s: error bounded by (dt^2 / 8) |x''|
    bound = (1 / FS) ** 2 / 8 * sum((2 * math.pi * k * f) ** 2 for k in range(1, 5))
    assert np.all(np.abs(obs.values[0] - exact) <= bound)
    # on-sample timestamps reproduce the samples exactly
    on = frame_of(x)
    k = 200
    obs2 = downsample_half_periods(on, FS / 8 / k * 1.0, 1, 0.0)  # spacing = k samples
    assert np.array_equal(obs2.values[0], x[: 4 * k + 1 : k])


def test_segments_tile():
    fr = frame_of(np.zeros((2, int(1.6 * FS))))
    f = 103.5
    segs = segment_signal(fr, f, 1, 0.02, t_end=1.52)
    assert len(segs) == pytest.approx(310, abs=2)
    for a, b in zip(segs, segs[1:]):
        assert b.timestamps[0] == pytest.approx(a.timestamps[-1], abs=1e-12)
    assert nominal_rate(f, 1) == pytest.approx(207.0)
    assert nominal_rate(f, 4) == pytest.approx(51.75)


# linearity

@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 2**31))
def test_chain_linearity(a, b, seed):
    arr = default_array()
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(10, 400))
    y = rng.normal(size=(10, 400))
    lhs = filter_chain(frame_of(a * x + b * y), arr).data
    rhs = a * filter_chain(frame_of(x), arr).data + b * filter_chain(frame_of(y), arr).data
    scale = max(1.0, np.abs(lhs).max())
    assert np.allclose(lhs, rhs, rtol=0, atol=1e-10 * scale)
    for op in (lambda z: spatial_difference(frame_of(z), arr).data,
               lambda z: moving_mean_array(z, 50, 2),
               lambda z: central_difference(frame_of(z)).data):
        l2 = op(a * x + b * y)
        r2 = a * op(x) + b * op(y)
        assert np.allclose(l2, r2, rtol=0, atol=1e-10 * max(1.0, np.abs(l2).max()))


def test_filter_margin():
    assert FilterConfig().margin == 2 * 26 + 3
