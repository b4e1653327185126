"""Forward model of an oscillating dipole on a damped cantilever.

World frame: the sensor plane is ``z = 0`` and ``+z`` points toward the
device. Device frame: the rest moment points along intrinsic ``+x``, the
cantilever along intrinsic ``+z``; the beam deflects in the intrinsic x-z
plane.

The separation vector is taken as ``r = sensor - dipole``. The dipole field
is even in ``r`` so the opposite convention gives identical readings.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .rotations import normalize_quaternion, quat_rotation_matrix, rot_y
from .sensors import MM, SensorArray, SensorSpec, SignalFrame

MU0 = 4e-7 * math.pi
_KM = MU0 / (4.0 * math.pi)
MIN_DISTANCE = 1e-6

LINEAR = "linear"
EXPONENTIAL = "exponential"
EXCITATION_BUFFER = 0.020


class SingularityError(ValueError):
    """Field evaluated (almost) at the dipole position."""


@dataclass(frozen=True)
class Pose:
    """Rotation-center position (m) and orientation quaternion (scalar first)."""

    position: np.ndarray
    quaternion: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        q = np.asarray(self.quaternion, dtype=float).reshape(4)
        object.__setattr__(self, "quaternion", normalize_quaternion(q))

    @property
    def rotation(self) -> np.ndarray:
        return quat_rotation_matrix(self.quaternion)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.quaternion])

    @classmethod
    def from_vector(cls, v) -> "Pose":
        v = np.asarray(v, dtype=float)
        return cls(v[:3], v[3:7])

    def moved(self, delta) -> "Pose":
        return Pose(self.position + np.asarray(delta, dtype=float), self.quaternion)


@dataclass(frozen=True)
class OscillatorParams:
    f_res: float = 103.5
    theta_max: float = math.radians(17.8)
    eta: float = 1.1
    phi: float = 0.0
    l0: float = 1.5 * MM
    damping_law: str = LINEAR

    def __post_init__(self):
        if self.f_res <= 0:
            raise ValueError("f_res must be > 0")
        if not 0 < self.theta_max < math.pi / 2:
            raise ValueError("theta_max must lie in (0, pi/2)")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.l0 <= 0:
            raise ValueError("l0 must be > 0")
        if self.damping_law not in (LINEAR, EXPONENTIAL):
            raise ValueError(f"unknown damping law {self.damping_law!r}")

    def replace(self, **changes) -> "OscillatorParams":
        return replace(self, **changes)


@dataclass(frozen=True)
class MagnetSpec:
    """Permanent magnet described by remanence (T) and volume (m^3)."""

    remanence: float = 1.424
    volume: float = math.pi * (0.5 * MM) ** 2 * (1.0 * MM)

    def __post_init__(self):
        if self.remanence <= 0 or self.volume <= 0:
            raise ValueError("remanence and volume must be > 0")

    @property
    def moment(self) -> float:
        return self.remanence * self.volume / MU0

    @classmethod
    def from_moment(cls, moment: float, remanence: float = 1.424) -> "MagnetSpec":
        return cls(remanence, moment * MU0 / remanence)

    def scaled(self, factor: float) -> "MagnetSpec":
        return MagnetSpec(self.remanence, self.volume * factor)


def magnetic_torque(m, b_ext) -> np.ndarray:
    return np.cross(np.asarray(m, dtype=float), np.asarray(b_ext, dtype=float))


def damping(t, p: OscillatorParams):
    t = np.asarray(t, dtype=float)
    if p.damping_law == LINEAR:
        return np.clip(1.0 - p.eta * t, 0.0, 1.0)
    return np.exp(-p.eta * t)


def deflection_angle(t, p: OscillatorParams):
    """Cantilever deflection (rad) at time ``t`` after the excitation ends."""
    t = np.asarray(t, dtype=float)
    return p.theta_max * np.cos(2.0 * math.pi * p.f_res * t + p.phi) * damping(t, p)


def dipole_field(m, r, min_distance: float = MIN_DISTANCE) -> np.ndarray:
    """Flux density (T) of an ideal dipole ``m`` at offset ``r`` from it."""
    m = np.asarray(m, dtype=float)
    r = np.asarray(r, dtype=float)
    d = np.linalg.norm(r)
    if d < min_distance:
        raise SingularityError(f"|r| = {d:.3g} m is below the minimum distance {min_distance:.3g} m")
    rh = r / d
    return _KM / d**3 * (3.0 * rh * np.dot(rh, m) - m)


def magnet_state(t: float, pose: Pose, p: OscillatorParams, mag: MagnetSpec):
    """Dipole position (m) and moment vector (A m^2) at time ``t``."""
    theta = float(deflection_angle(t, p))
    R = pose.rotation
    position = pose.position + p.l0 * R @ np.array([math.sin(theta), 0.0, math.cos(theta)])
    moment = R @ rot_y(theta) @ np.array([mag.moment, 0.0, 0.0])
    return position, moment


def sensor_reading(t: float, pose: Pose, p: OscillatorParams, mag: MagnetSpec, s: SensorSpec) -> float:
    dipole_pos, moment = magnet_state(t, pose, p, mag)
    return float(np.dot(dipole_field(moment, s.position - dipole_pos), s.axis))


def polar_reading(t: float, pose: Pose, p: OscillatorParams, mag: MagnetSpec, s: SensorSpec) -> float:
    """Reading from the radial/tangential decomposition of the dipole field.

    Used as an independent cross-check of :func:`sensor_reading`: the field is
    ``k m / d^3 (2 cos(a) e_r + sin(a) e_a)`` where ``a`` is the angle between
    the moment and the separation vector and ``e_a`` is the in-plane unit
    vector perpendicular to ``e_r`` pointing away from the moment side.
    """
    dipole_pos, moment = magnet_state(t, pose, p, mag)
    r = s.position - dipole_pos
    d = np.linalg.norm(r)
    e_r = r / d
    m_hat = moment / np.linalg.norm(moment)
    cos_a = float(np.dot(m_hat, e_r))
    perp = e_r * cos_a - m_hat
    sin_a = float(np.linalg.norm(perp))
    e_a = perp / sin_a if sin_a > 0 else np.zeros(3)
    b = _KM * np.linalg.norm(moment) / d**3 * (2.0 * cos_a * e_r + sin_a * e_a)
    return float(np.dot(b, s.axis))


def clean_channels(times, pose: Pose, p: OscillatorParams, moment: float, positions, axes) -> np.ndarray:
    """Noise-free readings, shape (sensors, times), for a fixed pose.

    Every geometric quantity is a linear combination of ``cos(theta(t))``
    and ``sin(theta(t))`` with per-sensor coefficients, which keeps the
    evaluation to a handful of array operations.
    """
    times = np.asarray(times, dtype=float)
    theta = deflection_angle(times, p)
    c = np.cos(theta)[None, :]
    s = np.sin(theta)[None, :]
    R = pose.rotation
    a, b = R[:, 0], R[:, 2]
    w = np.asarray(positions, dtype=float) - pose.position
    e = np.asarray(axes, dtype=float)
    l0 = p.l0

    aw = (w @ a)[:, None]
    bw = (w @ b)[:, None]
    ew = np.einsum("ij,ij->i", e, w)[:, None]
    ea = (e @ a)[:, None]
    eb = (e @ b)[:, None]
    ww = np.einsum("ij,ij->i", w, w)[:, None]

    e_r = ew - l0 * (s * ea + c * eb)
    a_r = aw - l0 * s
    b_r = bw - l0 * c
    m_r = c * a_r - s * b_r
    e_m = c * ea - s * eb
    d2 = ww + l0 * l0 - 2.0 * l0 * (s * aw + c * bw)
    if np.any(d2 < MIN_DISTANCE**2):
        raise SingularityError("a sensor coincides with the dipole position")
    inv_d2 = 1.0 / d2
    inv_d3 = inv_d2 * np.sqrt(inv_d2)
    return (_KM * moment) * inv_d3 * (3.0 * e_r * m_r * inv_d2 - e_m)


def static_dipole_channels(dipole_positions, moments, positions, axes) -> np.ndarray:
    """Readings of a dipole that moves arbitrarily in time.

    ``dipole_positions`` and ``moments`` have shape (T, 3) (or (3,) for a
    fixed value); the result has shape (sensors, T).
    """
    dp = np.atleast_2d(np.asarray(dipole_positions, dtype=float))
    mv = np.atleast_2d(np.asarray(moments, dtype=float))
    r = np.asarray(positions, dtype=float)[:, None, :] - dp[None, :, :]
    d2 = np.einsum("stk,stk->st", r, r)
    if np.any(d2 < MIN_DISTANCE**2):
        raise SingularityError("a sensor coincides with the dipole position")
    m_r = np.einsum("stk,tk->st", r, np.broadcast_to(mv, dp.shape))
    e = np.asarray(axes, dtype=float)
    e_r = np.einsum("sk,stk->st", e, r)
    e_m = e @ np.broadcast_to(mv, dp.shape).T
    inv_d2 = 1.0 / d2
    return _KM * inv_d2 * np.sqrt(inv_d2) * (3.0 * e_r * m_r * inv_d2 - e_m)


def synthesize_signal(
    pose: Pose,
    p: OscillatorParams,
    mag: MagnetSpec,
    array: SensorArray,
    duration: float,
    mode: str = "signal-only",
    start_time: float = 0.0,
    excitation_time: float = 0.05,
    buffer: float = EXCITATION_BUFFER,
) -> SignalFrame:
    """Clean multi-channel signal of the device at ``pose``.

    In ``"signal-only"`` mode the frame covers ``[start_time, start_time +
    duration)`` of the ring-down. ``"with-excitation"`` prepends an
    excitation window and the coil-ringdown buffer, both filled with
    saturated (full-range) placeholder samples, so that the ring-down still
    starts at ``start_time``.
    """
    if duration <= 0:
        raise ValueError("duration must be > 0")
    fs = array.sample_rate
    n = int(round(duration * fs))
    times = start_time + np.arange(n) / fs
    data = clean_channels(times, pose, p, mag.moment, array.positions, array.axes)
    if mode == "signal-only":
        return SignalFrame(data, fs, start_time, "T")
    if mode != "with-excitation":
        raise ValueError(f"unknown synthesis mode {mode!r}")
    n_pre = int(round((excitation_time + buffer) * fs))
    pre = np.repeat(array.ranges[:, None], n_pre, axis=1)
    return SignalFrame(np.hstack([pre, data]), fs, start_time - n_pre / fs, "T")


def synthesize_trajectory(
    plateaus, p: OscillatorParams, mag: MagnetSpec, array: SensorArray, duration: float, start_time: float = 0.0
) -> SignalFrame:
    """Clean signal of a device stepping through ``(t_start, Pose)`` plateaus.

    The pose is piecewise constant and changes instantaneously at each
    plateau start; the oscillation itself is continuous.
    """
    fs = array.sample_rate
    n = int(round(duration * fs))
    times = start_time + np.arange(n) / fs
    data = np.empty((len(array), n))
    plateaus = sorted(plateaus, key=lambda tp: tp[0])
    starts = [tp[0] for tp in plateaus] + [np.inf]
    for (t0, pose), t1 in zip(plateaus, starts[1:]):
        sel = (times >= t0) & (times < t1)
        if not sel.any():
            continue
        data[:, sel] = clean_channels(times[sel], pose, p, mag.moment, array.positions, array.axes)
    first = times < starts[0]
    if first.any():
        data[:, first] = clean_channels(times[first], plateaus[0][1], p, mag.moment, array.positions, array.axes)
    return SignalFrame(data, fs, start_time, "T")


def reference_orientation() -> np.ndarray:
    """Cantilever along world +y, beam oscillating in the world x-y plane."""
    h = math.sqrt(0.5)
    return np.array([h, -h, 0.0, 0.0])


def reference_pose(z: float = 80 * MM) -> Pose:
    return Pose(np.array([0.0, 0.0, z]), reference_orientation())
