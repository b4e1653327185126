"""Levenberg-Marquardt pose recovery, calibration, superfast and static baselines."""
from __future__ import annotations

import itertools
import json
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .metrics import UndefinedStatisticError, sse_tss_r2
from .model import (
    EXCITATION_BUFFER,
    EXPONENTIAL,
    LINEAR,
    MagnetSpec,
    OscillatorParams,
    Pose,
    clean_channels,
    static_dipole_channels,
)
from .pipeline import (
    FilterConfig,
    NoSignalError,
    SampledObservations,
    central_difference,
    downsample_half_periods,
    estimate_phase_anchor,
    filter_chain,
    interpolate_frame,
    moving_mean_array,
    segment_signal,
)
from .rotations import quat_from_axis_angle, quat_from_matrix, quat_multiply
from .sensors import MM, SensorArray, SignalFrame

MIN_SIGNAL = 1e-12  # T/s; below this a filtered frame counts as empty


class CalibrationRequiredError(RuntimeError):
    pass


@dataclass(frozen=True)
class FitContext:
    """Everything the model side needs to mirror the measurement processing."""

    params: OscillatorParams = field(default_factory=OscillatorParams)
    magnet: MagnetSpec = field(default_factory=MagnetSpec)
    array: SensorArray | None = None
    filters: FilterConfig = field(default_factory=FilterConfig)
    fit_phi: bool = False
    calibrated: bool = True
    eval_start: float = EXCITATION_BUFFER

    def __post_init__(self):
        if self.array is None:
            from .sensors import default_array

            object.__setattr__(self, "array", default_array())

    def with_params(self, **changes) -> "FitContext":
        return replace(self, params=self.params.replace(**changes))


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 200
    lambda_init: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    lambda_max: float = 1e16
    rel_sse_tol: float = 1e-10
    step_tol: float = 1e-12
    fd_step_position: float = 1e-6
    fd_step_quaternion: float = 1e-6
    fd_step_other: float = 1e-6
    cold_xy_half: float = 40 * MM
    cold_z: tuple = (40 * MM, 140 * MM)
    cold_pitch: float = 20 * MM
    cold_keep: int = 3

    def __post_init__(self):
        tols = [self.lambda_init, self.rel_sse_tol, self.step_tol, self.fd_step_position,
                self.fd_step_quaternion, self.fd_step_other, self.cold_pitch]
        if min(tols) <= 0 or self.lambda_up <= 1 or self.lambda_down <= 1:
            raise ValueError("solver tolerances and steps must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class LocalizationResult:
    pose: Pose
    sse: float
    r2: float
    iterations: int
    converged: bool
    timestamp: float
    wall_time: float
    phi: float = 0.0
    message: str = ""

    def to_record(self) -> dict:
        R = self.pose.rotation
        return {
            "timestamp_s": self.timestamp,
            "position_mm": [float(v) for v in self.pose.position / MM],
            "quaternion": [float(v) for v in self.pose.quaternion],
            "euler_zyx_deg": [float(v) for v in np.degrees(_euler_zyx(R))],
            "sse": self.sse,
            "r2": self.r2,
            "iterations": self.iterations,
            "converged": self.converged,
            "wall_time_s": self.wall_time,
        }


def _euler_zyx(R) -> np.ndarray:
    yaw = math.atan2(R[1, 0], R[0, 0])
    pitch = math.asin(max(-1.0, min(1.0, -R[2, 0])))
    roll = math.atan2(R[2, 1], R[2, 2])
    return np.array([roll, pitch, yaw])


def write_jsonl(results, path, extra: Callable | None = None) -> None:
    with open(path, "w") as fh:
        for k, r in enumerate(results):
            rec = r.to_record()
            if extra is not None:
                rec.update(extra(k, r))
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------- LM core


@dataclass
class LMResult:
    params: np.ndarray
    sse: float
    iterations: int
    converged: bool
    jacobian: np.ndarray | None = None
    residual: np.ndarray | None = None


def forward_jacobian(fun, x, r0, steps) -> np.ndarray:
    J = np.empty((r0.size, x.size))
    for k in range(x.size):
        xk = x.copy()
        xk[k] += steps[k]
        J[:, k] = (fun(xk) - r0) / steps[k]
    return J


def levenberg_marquardt(
    fun: Callable,
    x0,
    cfg: SolverConfig = SolverConfig(),
    steps=None,
    jac: Callable | None = None,
    project: Callable | None = None,
) -> LMResult:
    """Minimize ``sum(fun(x)**2)`` with a Marquardt-scaled LM iteration.

    The damping parameter grows by ``lambda_up`` after a rejected step and
    shrinks by ``lambda_down`` after an accepted one. The Jacobian comes from
    forward differences with per-parameter ``steps`` unless ``jac`` is
    given. ``project`` maps accepted parameter vectors back onto the
    feasible set (used for quaternion renormalization).
    """
    x = np.array(x0, dtype=float)
    if project is not None:
        x = project(x)
    steps = np.full(x.size, cfg.fd_step_other) if steps is None else np.asarray(steps, dtype=float)
    r = np.asarray(fun(x), dtype=float)
    sse = float(r @ r)
    if sse == 0.0:
        return LMResult(x, 0.0, 0, True, None, r)
    lam = cfg.lambda_init
    converged = False
    it = 0
    J = None
    while it < cfg.max_iterations:
        it += 1
        J = jac(x) if jac is not None else forward_jacobian(fun, x, r, steps)
        A = J.T @ J
        g = J.T @ r
        d = np.diag(A).copy()
        d[d <= 0] = max(float(d.max()), 1.0) * 1e-12
        accepted = False
        while lam <= cfg.lambda_max:
            try:
                delta = np.linalg.solve(A + lam * np.diag(d), -g)
            except np.linalg.LinAlgError:
                lam *= cfg.lambda_up
                continue
            xn = x + delta
            if project is not None:
                xn = project(xn)
            try:
                rn = np.asarray(fun(xn), dtype=float)
                ssen = float(rn @ rn)
            except (ValueError, ArithmeticError):
                ssen = math.inf
            if np.isfinite(ssen) and ssen < sse:
                accepted = True
                break
            lam *= cfg.lambda_up
        if not accepted:
            converged = True  # no descent direction left at machine precision
            break
        reduction = (sse - ssen) / sse
        step = float(np.linalg.norm(xn - x))
        x, r, sse = xn, rn, ssen
        lam = max(lam / cfg.lambda_down, 1e-300)
        if sse == 0.0 or reduction < cfg.rel_sse_tol or step < cfg.step_tol:
            converged = True
            break
    return LMResult(x, sse, it, converged, J, r)


# ---------------------------------------------------------------- model side


def _chain_kernel(filters: FilterConfig, fs: float) -> tuple[np.ndarray, int]:
    """Impulse response of moving mean + central difference, and its center."""
    reach = filters.passes * filters.window + 4
    imp = np.zeros(2 * reach + 1)
    imp[reach] = 1.0
    y = moving_mean_array(imp[None, :], filters.window, filters.passes)[0] if filters.passes else imp
    return np.gradient(y, 1.0 / fs), reach


class ObservationOperator:
    """Linear map from raw samples on a sub-grid to the sampled filtered values.

    Built from the impulse response of the filter chain; valid when all
    output samples are far enough from the edges of the measured frame that
    edge shrinking never reaches them. Otherwise the chain is run directly.
    """

    def __init__(self, ctx: FitContext, obs: SampledObservations):
        fs = obs.sample_rate
        self.fs = fs
        self.filters = ctx.filters
        u = (obs.timestamps - obs.grid_start) * fs
        i0 = np.clip(np.floor(u + 1e-9).astype(int), 0, obs.grid_len - 2)
        frac = u - i0
        kernel, reach = _chain_kernel(ctx.filters, fs)
        lo = int(i0.min()) - reach
        hi = int(i0.max()) + 1 + reach
        self.direct = lo < 0 or hi > obs.grid_len - 1
        if self.direct:
            lo = max(lo, 0)
            hi = min(hi, obs.grid_len - 1)
        self.lo, self.hi = lo, hi
        self.times = obs.grid_start + np.arange(lo, hi + 1) / fs
        self.timestamps = obs.timestamps
        if self.direct:
            return
        T = hi - lo + 1
        M = np.zeros((len(u), T))
        offs = np.arange(-reach, reach + 1)
        for k, (i, fr) in enumerate(zip(i0, frac)):
            # output at sample n takes input j with weight kernel[n - j + reach]
            for n, w in ((i, 1.0 - fr), (i + 1, fr)):
                if w == 0.0:
                    continue
                cols = n - lo - offs
                M[k, cols] += w * kernel
        self.M = M.T.copy()

    def apply(self, raw: np.ndarray) -> np.ndarray:
        if not self.direct:
            return raw @ self.M
        frame = SignalFrame(raw, self.fs, float(self.times[0]))
        y = moving_mean_array(frame.data, self.filters.window, self.filters.passes) if self.filters.passes else frame.data
        y = central_difference(frame.with_data(y))
        return interpolate_frame(y, self.timestamps)


def _spatial_rows(ctx: FitContext, channel_ids) -> tuple[list, list]:
    rows = list(channel_ids)
    refs = [ctx.array.reference_for(c) for c in rows] if ctx.filters.spatial else []
    return rows, refs


def model_observations(pose: Pose, ctx: FitContext, obs: SampledObservations,
                       params: OscillatorParams | None = None, operator: ObservationOperator | None = None):
    """Predicted filtered, sampled values for ``pose``, shape like ``obs.values``."""
    op = operator if operator is not None else ObservationOperator(ctx, obs)
    p = ctx.params if params is None else params
    arr = ctx.array
    raw = clean_channels(op.times, pose, p, ctx.magnet.moment, arr.positions, arr.axes)
    out = op.apply(raw)
    rows, refs = _spatial_rows(ctx, obs.channel_ids)
    pred = out[rows]
    if refs:
        pred = pred - out[refs]
    return pred


# ---------------------------------------------------------------- localization


def _project_pose(x: np.ndarray) -> np.ndarray:
    x = x.copy()
    n = np.linalg.norm(x[3:7])
    if n > 0:
        x[3:7] /= n
    return x


def _pose_steps(cfg: SolverConfig, extra: int = 0) -> np.ndarray:
    return np.array([cfg.fd_step_position] * 3 + [cfg.fd_step_quaternion] * 4 + [cfg.fd_step_other] * extra)


def _check_signal(obs: SampledObservations) -> None:
    if not np.all(np.isfinite(obs.values)):
        raise NoSignalError("observations contain non-finite values")
    if np.max(np.abs(obs.values)) < MIN_SIGNAL:
        raise NoSignalError("observations are (near) zero: no oscillation detected")


def canonical_orientations() -> list[np.ndarray]:
    """The 24 rotations of the cube, as quaternions."""
    out = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1, -1), repeat=3):
            R = np.zeros((3, 3))
            for r, (c, s) in enumerate(zip(perm, signs)):
                R[r, c] = s
            if np.linalg.det(R) > 0:
                out.append(quat_from_matrix(R))
    return out


def cold_start(obs: SampledObservations, ctx: FitContext, cfg: SolverConfig = SolverConfig()) -> list[Pose]:
    """Best seeds from a coarse position grid times the 24 cube orientations."""
    op = ObservationOperator(ctx, obs)
    xs = np.arange(-cfg.cold_xy_half, cfg.cold_xy_half + 1e-12, cfg.cold_pitch)
    zs = np.arange(cfg.cold_z[0], cfg.cold_z[1] + 1e-12, cfg.cold_pitch)
    scored = []
    for q in canonical_orientations():
        for x, y, z in itertools.product(xs, xs, zs):
            pose = Pose(np.array([x, y, z]), q)
            try:
                pred = model_observations(pose, ctx, obs, operator=op)
            except ValueError:
                continue
            # optimal amplitude scale removes most of the distance bias
            a = float(np.vdot(pred, obs.values)) / max(float(np.vdot(pred, pred)), 1e-300)
            scored.append((float(np.sum((obs.values - max(a, 0.0) * pred) ** 2)) if a > 0 else math.inf,
                           float(np.sum((obs.values - pred) ** 2)), pose))
    scored.sort(key=lambda s: (s[0], s[1]))
    return [s[2] for s in scored[: cfg.cold_keep]]


def localize(obs: SampledObservations, ctx: FitContext, init: Pose | None = None,
             cfg: SolverConfig = SolverConfig()) -> LocalizationResult:
    """Unweighted least-squares pose fit over position and a 4-component quaternion."""
    t0 = time.perf_counter()
    if not ctx.calibrated:
        raise CalibrationRequiredError(
            "device parameters are not calibrated; run the calibration protocol first"
        )
    _check_signal(obs)
    seeds = [init] if init is not None else cold_start(obs, ctx, cfg)
    op = ObservationOperator(ctx, obs)
    y = obs.values.ravel()
    best = None
    for seed in seeds:
        if ctx.fit_phi:
            def fun(v):
                p = ctx.params.replace(phi=float(v[7]))
                return (model_observations(Pose(v[:3], v[3:7]), ctx, obs, p, op)).ravel() - y

            x0 = np.concatenate([seed.as_vector(), [ctx.params.phi]])
            steps = _pose_steps(cfg, 1)
        else:
            def fun(v):
                return (model_observations(Pose(v[:3], v[3:7]), ctx, obs, None, op)).ravel() - y

            x0 = seed.as_vector()
            steps = _pose_steps(cfg)
        res = levenberg_marquardt(fun, x0, cfg, steps=steps, project=_project_pose)
        if best is None or res.sse < best.sse:
            best = res
    x = best.params
    try:
        _, _, r2 = sse_tss_r2(y, y + best.residual)
    except UndefinedStatisticError:
        r2 = math.nan
    phi = float(x[7]) if ctx.fit_phi else ctx.params.phi
    return LocalizationResult(
        Pose(x[:3], x[3:7]), best.sse, r2, best.iterations, best.converged,
        obs.anchor, time.perf_counter() - t0, phi,
    )


def prepare_observations(frame: SignalFrame, ctx: FitContext, N: int, t_min: float | None = None,
                         filtered: bool = False) -> SampledObservations:
    """Filter a raw frame, find the half-period anchor and down-sample."""
    filt = frame if filtered else filter_chain(frame, ctx.array, ctx.filters)
    if t_min is None:
        t_min = max(ctx.eval_start, frame.start_time + ctx.filters.margin / frame.sample_rate)
    p = ctx.params
    _, anchor = estimate_phase_anchor(filt, p.f_res, p.eta, p.damping_law, phi_prior=p.phi, t_min=t_min)
    return downsample_half_periods(filt, p.f_res, N, anchor)


def localize_frame(frame: SignalFrame, ctx: FitContext, N: int, init: Pose | None = None,
                   cfg: SolverConfig = SolverConfig()) -> LocalizationResult:
    return localize(prepare_observations(frame, ctx, N), ctx, init, cfg)


# ---------------------------------------------------------------- calibration


@dataclass
class CalibrationResult:
    params: OscillatorParams
    pose: Pose
    sse: float
    r2: float
    iterations: int
    converged: bool
    z_theta_correlation: float
    identifiable: bool


def _posterior_correlation(J: np.ndarray, i: int, j: int) -> float:
    cov = np.linalg.pinv(J.T @ J, rcond=1e-12)
    return float(cov[i, j] / math.sqrt(abs(cov[i, i] * cov[j, j])))


def calibrate(frames, ctx: FitContext, z_known: float | None, N: int = 60,
              init: Pose | None = None, damping_law: str | None = None,
              cfg: SolverConfig = SolverConfig(), correlation_limit: float = 0.9) -> CalibrationResult:
    """Fit theta_max, eta and phi together with the pose at a known height.

    ``frames`` are raw recordings of the device resting at planar (0, 0)
    and height ``z_known``. The amplitude and the height are degenerate to
    first order (the field scales like theta_max / z^3), so the height must
    be supplied. The returned ``z_theta_correlation`` is the posterior
    correlation of z and theta_max in a fit where z is also free; values
    near +-1 mean the two cannot be separated from the data.
    """
    if z_known is None:
        raise ValueError("calibration needs the known device height z (theta_max and z are degenerate)")
    if isinstance(frames, SignalFrame):
        frames = [frames]
    law = damping_law or ctx.params.damping_law
    base = ctx.params.replace(damping_law=law)
    cctx = replace(ctx, params=base)
    obs_list = [prepare_observations(f, cctx, N) for f in frames]
    for o in obs_list:
        _check_signal(o)
    ops = [ObservationOperator(cctx, o) for o in obs_list]
    y = np.concatenate([o.values.ravel() for o in obs_list])
    seed = init if init is not None else Pose(np.array([0.0, 0.0, z_known]), _default_q())

    def params_of(v):
        return base.replace(theta_max=float(np.clip(v[0], 1e-4, 1.5)), eta=float(max(v[1], 0.0)), phi=float(v[2]))

    def predict(pose, p):
        return np.concatenate([model_observations(pose, cctx, o, p, op).ravel() for o, op in zip(obs_list, ops)])

    # parameters: x, y, q0..q3, theta_max, eta, phi
    def fun(v):
        pose = Pose(np.array([v[0], v[1], z_known]), v[2:6])
        return predict(pose, params_of(v[6:9])) - y

    def project(v):
        v = v.copy()
        v[2:6] /= np.linalg.norm(v[2:6])
        return v

    x0 = np.concatenate([seed.position[:2], seed.quaternion, [base.theta_max, base.eta, base.phi]])
    steps = np.array([cfg.fd_step_position] * 2 + [cfg.fd_step_quaternion] * 4 + [1e-6, 1e-4, 1e-6])
    res = levenberg_marquardt(fun, x0, cfg, steps=steps, project=project)
    v = res.params
    pose = Pose(np.array([v[0], v[1], z_known]), v[2:6])
    params = params_of(v[6:9])

    # identifiability probe: Jacobian with z free as well
    def fun_z(w):
        return predict(Pose(w[:3], w[3:7]), params_of(w[7:10])) - y

    w0 = np.concatenate([pose.position, pose.quaternion, [params.theta_max, params.eta, params.phi]])
    stz = np.array([cfg.fd_step_position] * 3 + [cfg.fd_step_quaternion] * 4 + [1e-6, 1e-4, 1e-6])
    Jz = forward_jacobian(fun_z, w0, fun_z(w0), stz)
    rho = _posterior_correlation(Jz, 2, 7)
    try:
        _, _, r2 = sse_tss_r2(y, y + res.residual)
    except UndefinedStatisticError:
        r2 = math.nan
    return CalibrationResult(params, pose, res.sse, r2, res.iterations, res.converged, rho,
                             abs(rho) <= correlation_limit)


def _default_q() -> np.ndarray:
    from .model import reference_orientation

    return reference_orientation()


# ---------------------------------------------------------------- superfast


def localize_superfast(frame: SignalFrame, ctx: FitContext, N_seg: int, init: Pose | None = None,
                       t_end: float | None = None, cfg: SolverConfig = SolverConfig()) -> list[LocalizationResult]:
    """Independent fits of consecutive N_seg-half-period segments of one ring-down."""
    filt = filter_chain(frame, ctx.array, ctx.filters)
    p = ctx.params
    t_min = max(ctx.eval_start, frame.start_time + ctx.filters.margin / frame.sample_rate)
    _, anchor = estimate_phase_anchor(filt, p.f_res, p.eta, p.damping_law, phi_prior=p.phi, t_min=t_min)
    t_stop = frame.start_time + (frame.n_samples - 1 - ctx.filters.margin) / frame.sample_rate
    if t_end is not None:
        t_stop = min(t_stop, t_end)
    segs = segment_signal(filt, p.f_res, N_seg, anchor, t_end=t_stop)
    out = []
    prev = init
    for obs in segs:
        try:
            r = localize(obs, ctx, prev, cfg)
        except (NoSignalError, ValueError) as exc:
            pose = prev if prev is not None else Pose(np.zeros(3))
            r = LocalizationResult(pose, math.nan, math.nan, 0, False, obs.anchor, 0.0, p.phi, str(exc))
        out.append(r)
        if r.converged and np.isfinite(r.sse):
            prev = r.pose
    return out


def nominal_rate(f_res: float, N_seg: int) -> float:
    return 2.0 * f_res / N_seg


# ---------------------------------------------------------------- static 5-DoF baseline


@dataclass
class StaticResult:
    position: np.ndarray
    direction: np.ndarray
    sse: float
    r2: float
    iterations: int
    converged: bool


def _direction(polar: float, azimuth: float) -> np.ndarray:
    return np.array([math.sin(polar) * math.cos(azimuth), math.sin(polar) * math.sin(azimuth), math.cos(polar)])


def static_predict(position, direction, moment: float, array: SensorArray, channel_ids, spatial: bool = True):
    m = moment * np.asarray(direction, dtype=float)
    vals = static_dipole_channels(np.asarray(position, dtype=float)[None, :], m[None, :],
                                  array.positions, array.axes)[:, 0]
    rows = list(channel_ids)
    out = vals[rows]
    if spatial:
        out = out - vals[[array.reference_for(c) for c in rows]]
    return out


def static_localize(dc_values, array: SensorArray, init_position, init_direction, moment: float,
                    channel_ids=None, spatial: bool = True, cfg: SolverConfig = SolverConfig()) -> StaticResult:
    """Five-parameter fit of a static dipole of known moment magnitude."""
    y = np.asarray(dc_values, dtype=float)
    ids = array.measurement_channels() if channel_ids is None else list(channel_ids)
    d0 = np.asarray(init_direction, dtype=float)
    d0 = d0 / np.linalg.norm(d0)
    x0 = np.concatenate([np.asarray(init_position, dtype=float),
                         [math.acos(np.clip(d0[2], -1, 1)), math.atan2(d0[1], d0[0])]])

    def fun(v):
        return static_predict(v[:3], _direction(v[3], v[4]), moment, array, ids, spatial) - y

    steps = np.array([cfg.fd_step_position] * 3 + [1e-6, 1e-6])
    res = levenberg_marquardt(fun, x0, cfg, steps=steps)
    v = res.params
    try:
        _, _, r2 = sse_tss_r2(y, y + res.residual)
    except UndefinedStatisticError:
        r2 = math.nan
    return StaticResult(v[:3].copy(), _direction(v[3], v[4]), res.sse, r2, res.iterations, res.converged)


def perturbed_pose(pose: Pose, rng: np.random.Generator, distance: float = 2 * MM, angle: float = math.radians(5)) -> Pose:
    """A start pose at a fixed distance and rotation angle from ``pose`` in random directions."""
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    a = rng.normal(size=3)
    dq = quat_from_axis_angle(a, angle)
    return Pose(pose.position + distance * d, quat_multiply(pose.quaternion, dq))
