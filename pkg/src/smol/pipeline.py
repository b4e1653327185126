"""Noise injection, sensor nonidealities, the filter chain and down-sampling."""
from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import (
    EXCITATION_BUFFER,
    MagnetSpec,
    OscillatorParams,
    damping,
    reference_pose,
    synthesize_signal,
)
from .sensors import MM, NT, ConfigurationError, SensorArray, SignalFrame, default_array

MOVING_MEAN_WINDOW = 50
MOVING_MEAN_PASSES = 2
SENSOR_NOISE_DENSITY = 17e-12  # T/sqrt(Hz)
REFERENCE_RAW_SNR = 1.1


class NoSignalError(RuntimeError):
    """The frame carries no usable oscillation."""


@dataclass(frozen=True)
class NoiseModel:
    """Common-mode environmental noise plus independent sensor noise.

    Each channel receives ``(1 + g_i) * common(t + shift) + white_i(t)``.
    The common trace is either a sum of tones or a recorded per-direction
    trace; ``shift`` is a random phase (circular time shift) drawn from
    ``seed`` for every injection.
    """

    mains_f: float = 50.0
    mains_amp: float = 0.0
    harmonics: tuple = ()
    white_sigma: float = 0.0
    gradient_factors: tuple = ()
    recorded: dict | None = None
    recorded_rate: float | None = None
    seed: int = 0

    def __post_init__(self):
        amps = [self.mains_amp, self.white_sigma] + [a for _, a in self.harmonics]
        if min(amps) < 0:
            raise ValueError("noise amplitudes must be >= 0")
        if any(abs(g) >= 0.2 for g in self.gradient_factors):
            raise ValueError("gradient factors must satisfy |g| < 0.2")

    def with_seed(self, seed: int) -> "NoiseModel":
        return _replace(self, seed=int(seed))

    def scaled(self, common: float = 1.0, white: float = 1.0) -> "NoiseModel":
        return _replace(
            self,
            mains_amp=self.mains_amp * common,
            harmonics=tuple((f, a * common) for f, a in self.harmonics),
            white_sigma=self.white_sigma * white,
        )


def _replace(nm: NoiseModel, **kw) -> NoiseModel:
    from dataclasses import replace

    return replace(nm, **kw)


def gradient_factors(array: SensorArray, per_pitch: float = 0.03, pitch: float = 50 * MM,
                     direction=(1.0, 1.0)) -> tuple:
    """Per-sensor noise gain from a linear spatial gradient of the noise field.

    The gain changes by ``per_pitch`` over one grid pitch along
    ``direction`` (in-plane) and is zero at the array centroid.
    """
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    xy = array.positions[:, :2]
    offsets = (xy - xy.mean(axis=0)) @ d
    return tuple(float(g) for g in per_pitch * offsets / pitch)


def load_noise_trace(path) -> tuple[np.ndarray, float]:
    """Read a ``time_s,value_T`` CSV; returns (values, sample_rate)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header[:2]] != ["time_s", "value_T"]:
            raise ConfigurationError(f"{path}: expected header time_s,value_T")
        rows = np.array([[float(v) for v in row[:2]] for row in reader])
    return rows[:, 1], 1.0 / float(np.median(np.diff(rows[:, 0])))


def save_noise_trace(path, values, sample_rate: float) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_s", "value_T"])
        for k, v in enumerate(values):
            writer.writerow([repr(k / sample_rate), repr(float(v))])


def _common_trace(nm: NoiseModel, frame: SignalFrame, rng: np.random.Generator, direction) -> np.ndarray:
    n = frame.n_samples
    if nm.recorded is not None:
        trace = np.asarray(nm.recorded[direction], dtype=float)
        if nm.recorded_rate is not None and abs(nm.recorded_rate - frame.sample_rate) > 1e-6 * frame.sample_rate:
            raise ConfigurationError("recorded noise sample rate differs from the frame")
        if len(trace) < n:
            raise ValueError(f"recorded noise trace has {len(trace)} samples, frame needs {n}")
        shift = int(rng.integers(len(trace)))
        return np.roll(trace, -shift)[:n]
    t = frame.times
    out = np.zeros(n)
    tones = [(nm.mains_f, nm.mains_amp)] + list(nm.harmonics)
    phases = rng.uniform(0.0, 2 * math.pi, size=len(tones))
    for (f, a), ph in zip(tones, phases):
        if a > 0:
            out += a * np.cos(2 * math.pi * f * t + ph)
    return out


def inject_noise(frame: SignalFrame, nm: NoiseModel, array: SensorArray | None = None) -> SignalFrame:
    """Add common-mode and white noise; deterministic for a given seed."""
    if frame.units != "T":
        raise ValueError("noise is injected into raw flux-density frames only")
    rng = np.random.default_rng(nm.seed)
    g = np.zeros(frame.n_channels)
    if nm.gradient_factors:
        g = np.asarray(nm.gradient_factors, dtype=float)[list(frame.channel_ids)]
    directions = [0] * frame.n_channels
    if array is not None:
        keys = {}
        for i, sid in enumerate(frame.channel_ids):
            key = tuple(np.round(array.sensors[sid].axis, 6))
            directions[i] = keys.setdefault(key, len(keys))
    commons = {}
    for d in sorted(set(directions)):
        key = d
        if nm.recorded is not None and key not in nm.recorded:
            key = sorted(nm.recorded)[0] if len(nm.recorded) == 1 else key
        commons[d] = _common_trace(nm, frame, rng, key)
    data = frame.data.copy()
    for i in range(frame.n_channels):
        data[i] += (1.0 + g[i]) * commons[directions[i]]
    if nm.white_sigma > 0:
        data += rng.normal(0.0, nm.white_sigma, size=data.shape)
    return frame.with_data(data)


def saturate_quantize(frame: SignalFrame, array: SensorArray) -> SignalFrame:
    ranges = array.ranges[list(frame.channel_ids)][:, None]
    steps = array.quantizations[list(frame.channel_ids)][:, None]
    data = np.clip(frame.data, -ranges, ranges)
    q = np.where(steps > 0, np.round(data / np.where(steps > 0, steps, 1.0)) * steps, data)
    return frame.with_data(q)


def spatial_difference(frame: SignalFrame, array: SensorArray) -> SignalFrame:
    """Subtract each channel's same-direction reference; drop the references."""
    refs = set(array.reference_index)
    keep, rows = [], []
    for i, sid in enumerate(frame.channel_ids):
        if sid in refs:
            continue
        ref = array.reference_for(sid)
        if ref not in frame.channel_ids:
            raise ConfigurationError(f"reference channel {ref} missing from frame")
        rows.append(frame.data[i] - frame.data[frame.channel_ids.index(ref)])
        keep.append(sid)
    return frame.with_data(np.array(rows), channel_ids=tuple(keep))


def _box_mean(x: np.ndarray, left: int, right: int) -> np.ndarray:
    """Mean over ``[k-left, k+right]`` clipped to the valid range."""
    n = x.shape[-1]
    base = x[..., :1]
    c = np.concatenate([np.zeros(x.shape[:-1] + (1,)), np.cumsum(x - base, axis=-1)], axis=-1)
    k = np.arange(n)
    lo = np.maximum(k - left, 0)
    hi = np.minimum(k + right + 1, n)
    return (c[..., hi] - c[..., lo]) / (hi - lo) + base


def moving_mean_array(x: np.ndarray, window: int = MOVING_MEAN_WINDOW, passes: int = MOVING_MEAN_PASSES):
    if window < 1:
        raise ValueError("window must be >= 1")
    if window > x.shape[-1]:
        raise ValueError(f"window {window} exceeds channel length {x.shape[-1]}")
    out = np.asarray(x, dtype=float)
    for k in range(passes):
        # even windows alternate their half-sample offset so the chain stays zero-phase
        left = window // 2 if k % 2 == 0 else (window - 1) // 2
        out = _box_mean(out, left, window - 1 - left)
    return out


def moving_mean(frame: SignalFrame, window: int = MOVING_MEAN_WINDOW, passes: int = MOVING_MEAN_PASSES) -> SignalFrame:
    """Centered moving mean, applied ``passes`` times, shrinking at the edges."""
    return frame.with_data(moving_mean_array(frame.data, window, passes))


def central_difference(frame: SignalFrame) -> SignalFrame:
    if frame.n_samples < 3:
        raise ValueError("central difference needs at least 3 samples")
    return frame.with_data(np.gradient(frame.data, 1.0 / frame.sample_rate, axis=-1), units=frame.units + "/s")


@dataclass(frozen=True)
class FilterConfig:
    window: int = MOVING_MEAN_WINDOW
    passes: int = MOVING_MEAN_PASSES
    spatial: bool = True

    @property
    def margin(self) -> int:
        """Samples on each side affected by edge handling of the chain."""
        return self.passes * (self.window // 2 + 1) + 3


def filter_chain(frame: SignalFrame, array: SensorArray, cfg: FilterConfig = FilterConfig()) -> SignalFrame:
    """Spatial difference, moving mean and central time difference."""
    if cfg.spatial:
        frame = spatial_difference(frame, array)
    return central_difference(moving_mean(frame, cfg.window, cfg.passes))


def _peak(spectrum: np.ndarray, freqs: np.ndarray, f: float, half_width: float = 1.0) -> float:
    sel = np.abs(freqs - f) <= half_width + 1e-9
    if not sel.any():
        sel = np.array([np.argmin(np.abs(freqs - f))])
        return float(spectrum[sel].max())
    return float(spectrum[sel].max())


def channel_peaks(frame: SignalFrame, f: float, half_width: float = 1.0) -> np.ndarray:
    x = frame.data - frame.data.mean(axis=1, keepdims=True)
    spec = np.abs(np.fft.rfft(x, axis=1))
    freqs = np.fft.rfftfreq(frame.n_samples, 1.0 / frame.sample_rate)
    sel = np.abs(freqs - f) <= half_width + 1e-9
    if not sel.any():
        sel = np.zeros_like(freqs, dtype=bool)
        sel[np.argmin(np.abs(freqs - f))] = True
    return spec[:, sel].max(axis=1)


def dft_snr(frame: SignalFrame, f_signal: float, f_noise: float = 50.0, channel: int | None = None) -> float:
    """Ratio of the DFT peak near ``f_signal`` to the one near ``f_noise``.

    ``channel`` is a sensor index; by default the channel with the largest
    signal peak is used.
    """
    periods = frame.duration * min(f_signal, f_noise)
    if periods <= 5:
        raise ValueError("frame must span more than 5 periods of the lower frequency")
    sig = channel_peaks(frame, f_signal)
    noise = channel_peaks(frame, f_noise)
    i = int(np.argmax(sig)) if channel is None else frame.channel_ids.index(channel)
    return float(sig[i] / noise[i]) if noise[i] > 0 else math.inf


def first_extremum_time(phi: float, f_res: float, t_min: float) -> float:
    """Earliest ``t >= t_min`` at which the deflection reaches an extremum."""
    half = 1.0 / (2.0 * f_res)
    t0 = -phi / (2 * math.pi * f_res)
    k = math.ceil((t_min - t0) / half - 1e-9)
    return t0 + k * half


def estimate_phase_anchor(
    frame: SignalFrame,
    f_res: float,
    eta: float = 0.0,
    damping_law: str = "linear",
    phi_prior: float | None = None,
    t_min: float | None = None,
) -> tuple[float, float]:
    """Oscillation phase and first half-period anchor of a filtered frame.

    The phase is obtained from a least-squares projection of every channel
    onto the two quadrature templates ``d/dt[D(t) cos(w t)]`` and
    ``d/dt[D(t) sin(w t)]``. Each channel fixes the phase only modulo pi (the
    sign of its fundamental depends on geometry), so channel estimates are
    combined as doubled angles weighted by their power. ``phi_prior`` selects
    the branch; without it the branch that makes the strongest channel's
    first lobe after the anchor positive is taken. The anchor is the first
    deflection extremum after ``t_min`` (default: frame start plus the
    filter edge margin).
    """
    t = frame.times
    w = 2 * math.pi * f_res
    params = OscillatorParams(f_res=f_res, eta=eta, damping_law=damping_law)
    d = damping(t, params)
    dd = np.gradient(d, t) if len(t) > 2 else np.zeros_like(t)
    g0 = dd * np.cos(w * t) - w * d * np.sin(w * t)
    g1 = dd * np.sin(w * t) + w * d * np.cos(w * t)
    live = d > 0
    if live.sum() < 8:
        raise NoSignalError("no oscillation left in the frame")
    basis = np.vstack([g0[live], g1[live]]).T
    coef, *_ = np.linalg.lstsq(basis, frame.data[:, live].T, rcond=None)
    # channel signal ~ c * (cos(phi) g0 - sin(phi) g1)
    u, v = coef[0], -coef[1]
    power = u * u + v * v
    if not np.any(power > 0) or np.sqrt(power.max()) * np.abs(basis).max() <= 1e-300:
        raise NoSignalError("flat frame: no extremum found")
    resid = frame.data[:, live] - (basis @ coef).T
    strength = np.sqrt(power) * np.linalg.norm(basis, axis=0).mean()
    if strength.max() < 1e-3 * max(np.abs(resid).max(), 1e-300) or not np.isfinite(strength.max()):
        raise NoSignalError("oscillation not visible above the residual")
    z = np.sum(power * np.exp(2j * np.arctan2(v, u)))
    phi = 0.5 * float(np.angle(z))
    if phi_prior is not None:
        if math.cos(phi - phi_prior) < 0:
            phi += math.pi
    else:
        i = int(np.argmax(power))
        if u[i] * math.cos(phi) - v[i] * math.sin(phi) < 0:
            phi += math.pi
    phi = float(np.angle(np.exp(1j * phi)))
    if t_min is None:
        t_min = frame.start_time + FilterConfig().margin / frame.sample_rate
    return phi, first_extremum_time(phi, f_res, t_min)


@dataclass(frozen=True)
class SampledObservations:
    """Down-sampled filtered values, shape (channels, 4N+1), on a shared grid.

    ``grid_start``/``grid_len``/``sample_rate`` describe the raw sample grid
    of the frame the values came from, so the model can be evaluated on the
    identical grid.
    """

    values: np.ndarray
    timestamps: np.ndarray
    N: int
    anchor: float
    channel_ids: tuple
    sample_rate: float
    grid_start: float
    grid_len: int

    def __post_init__(self):
        n = 4 * self.N + 1
        if self.values.shape[-1] != n or len(self.timestamps) != n:
            raise ValueError(f"expected {n} samples per channel")

    @property
    def size(self) -> int:
        return int(self.values.size)

    @property
    def span(self) -> float:
        return float(self.timestamps[-1] - self.timestamps[0])


def half_period_timestamps(f_res: float, N: int, anchor: float) -> np.ndarray:
    return anchor + np.arange(4 * N + 1) / (8.0 * f_res)


def interpolate_frame(frame: SignalFrame, timestamps) -> np.ndarray:
    u = (np.asarray(timestamps) - frame.start_time) * frame.sample_rate
    if u.min() < -1e-9 or u.max() > frame.n_samples - 1 + 1e-9:
        raise ValueError("timestamps fall outside the frame")
    i = np.clip(np.floor(u).astype(int), 0, frame.n_samples - 2)
    frac = u - i
    return frame.data[:, i] * (1.0 - frac) + frame.data[:, i + 1] * frac


def downsample_half_periods(frame: SignalFrame, f_res: float, N: int, anchor: float) -> SampledObservations:
    """4N+1 equidistant, linearly interpolated samples over N half periods."""
    if N < 1:
        raise ValueError("N must be >= 1")
    ts = half_period_timestamps(f_res, N, anchor)
    t_last = frame.start_time + (frame.n_samples - 1) / frame.sample_rate
    if ts[0] < frame.start_time - 1e-12 or ts[-1] > t_last + 1e-12:
        raise ValueError(
            f"frame [{frame.start_time:.6f}, {t_last:.6f}] s does not span {N} half periods from {anchor:.6f} s"
        )
    return SampledObservations(
        interpolate_frame(frame, ts), ts, N, anchor, frame.channel_ids,
        frame.sample_rate, frame.start_time, frame.n_samples,
    )


def segment_signal(frame: SignalFrame, f_res: float, N_seg: int, anchor: float,
                   t_end: float | None = None) -> list[SampledObservations]:
    """Consecutive, non-overlapping N_seg-half-period segments from ``anchor``."""
    if N_seg < 1:
        raise ValueError("N_seg must be >= 1")
    seg = N_seg / (2.0 * f_res)
    t_last = frame.start_time + (frame.n_samples - 1) / frame.sample_rate
    if t_end is not None:
        t_last = min(t_last, t_end)
    out = []
    k = 0
    while True:
        a = anchor + k * seg
        if a + seg > t_last + 1e-12:
            break
        out.append(downsample_half_periods(frame, f_res, N_seg, a))
        k += 1
    return out


def nominal_rate(f_res: float, N_seg: int) -> float:
    return 2.0 * f_res / N_seg


def default_white_sigma(sample_rate: float = 50_000.0, density: float = SENSOR_NOISE_DENSITY) -> float:
    """Per-sample sigma of white noise with the given one-sided density."""
    return density * math.sqrt(sample_rate / 2.0)


@functools.lru_cache(maxsize=8)
def _calibrated_mains(sample_rate: float, white_sigma: float, harmonic_ratio: float, per_pitch: float) -> float:
    array = default_array(sample_rate)
    frame = synthesize_signal(reference_pose(), OscillatorParams(), MagnetSpec(), array, 2.0)
    g = np.asarray(gradient_factors(array, per_pitch))
    sig = channel_peaks(frame, OscillatorParams().f_res)
    meas = array.measurement_channels()
    i = meas[int(np.argmax(sig[meas]))]
    # an on-bin tone of amplitude A has DFT magnitude A * n / 2
    return float(sig[i] / (REFERENCE_RAW_SNR * (1.0 + g[i]) * frame.n_samples / 2.0))


def default_noise_model(array: SensorArray | None = None, seed: int = 0,
                        harmonic_ratio: float = 0.3, per_pitch: float = 0.03,
                        white_sigma: float | None = None) -> NoiseModel:
    """Synthetic stand-in for recorded lab noise.

    50 Hz + 150 Hz common-mode tones whose amplitude is calibrated so that the
    raw whole-signal SNR at the reference scenario (device at z = 80 mm,
    default array, 2 s ring-down) equals 1.1, a linear spatial noise gradient
    and white sensor noise.
    """
    array = default_array() if array is None else array
    if white_sigma is None:
        white_sigma = default_white_sigma(array.sample_rate)
    amp = _calibrated_mains(array.sample_rate, white_sigma, harmonic_ratio, per_pitch)
    return NoiseModel(
        mains_f=50.0,
        mains_amp=amp,
        harmonics=((150.0, harmonic_ratio * amp),),
        white_sigma=white_sigma,
        gradient_factors=gradient_factors(array, per_pitch),
        seed=seed,
    )


def acquire(frame: SignalFrame, array: SensorArray, nm: NoiseModel | None, interference=None) -> SignalFrame:
    """Turn a clean frame into what the sensors report."""
    if interference is not None:
        frame = frame.with_data(frame.data + interference)
    if nm is not None:
        frame = inject_noise(frame, nm, array)
    return saturate_quantize(frame, array)
