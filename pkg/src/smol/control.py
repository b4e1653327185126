"""Gradient-coil actuation of a SMOL millirobot, alternating with localization."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.special import ellipe, ellipk

from .model import MU0, OscillatorParams, Pose, reference_orientation
from .pipeline import NoSignalError, default_noise_model
from .rotations import quat_from_matrix
from .sensors import MM, default_array
from .solver import FitContext, localize, perturbed_pose, prepare_observations
from .lab import clean_frame, trial_rng
from .pipeline import acquire


class InfeasiblePairError(ValueError):
    """The two coil fields cannot be combined into the requested direction."""


class ArrivedError(ValueError):
    """Start and goal coincide; there is no direction to move in."""


# ---------------------------------------------------------------- coils


def loop_field(points, center, axis, radius: float, turns: int = 1, current: float = 1.0) -> np.ndarray:
    """Field of a circular current loop at ``points`` (n, 3), exact off-axis form."""
    p = np.atleast_2d(np.asarray(points, dtype=float)) - np.asarray(center, dtype=float)
    n = np.asarray(axis, dtype=float)
    n = n / np.linalg.norm(n)
    z = p @ n
    radial = p - z[:, None] * n
    rho = np.linalg.norm(radial, axis=1)
    a = radius
    alpha2 = (a - rho) ** 2 + z**2
    beta2 = (a + rho) ** 2 + z**2
    m = 4.0 * a * rho / beta2
    K = ellipk(m)
    E = ellipe(m)
    c = MU0 * turns * current / (2.0 * math.pi)
    bz = c / np.sqrt(beta2) * (K + (a * a - rho**2 - z**2) / alpha2 * E)
    with np.errstate(invalid="ignore", divide="ignore"):
        brho = np.where(rho > 1e-12, c * z / (rho * np.sqrt(beta2)) * (-K + (a * a + rho**2 + z**2) / alpha2 * E), 0.0)
        rhat = np.where(rho[:, None] > 1e-12, radial / np.maximum(rho, 1e-300)[:, None], 0.0)
    return bz[:, None] * n + brho[:, None] * rhat


@dataclass
class CoilModel:
    """Four loops on a square, with per-coil field maps on a regular grid.

    Coil ``j`` sits at ``centers[j]`` with its axis pointing from the
    workspace center towards the coil, so a positive current produces a
    field (and pulling force) towards that coil.
    """

    centers: np.ndarray
    axes: np.ndarray
    radius: float = 25 * MM
    turns: int = 200
    grid_step: float = 0.5 * MM
    xy_half: float = 35 * MM
    z_range: tuple = (76 * MM, 84 * MM)
    interpolators: list = field(default_factory=list, repr=False)

    @classmethod
    def square(cls, opposing_distance: float = 84 * MM, plane_z: float = 80 * MM, **kw) -> "CoilModel":
        h = opposing_distance / 2
        centers = np.array([[h, 0, plane_z], [0, h, plane_z], [-h, 0, plane_z], [0, -h, plane_z]])
        axes = np.array([[1.0, 0, 0], [0, 1.0, 0], [-1.0, 0, 0], [0, -1.0, 0]])
        kw.setdefault("z_range", (plane_z - 4 * MM, plane_z + 4 * MM))
        model = cls(centers, axes, **kw)
        model.build_maps()
        return model

    @property
    def grid(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = int(round(2 * self.xy_half / self.grid_step))
        xs = np.linspace(-self.xy_half, self.xy_half, n + 1)
        nz = int(round((self.z_range[1] - self.z_range[0]) / self.grid_step))
        zs = np.linspace(self.z_range[0], self.z_range[1], nz + 1)
        return xs, xs, zs

    def build_maps(self) -> None:
        xs, ys, zs = self.grid
        X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
        pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
        self.maps = []
        self.interpolators = []
        for c, a in zip(self.centers, self.axes):
            B = loop_field(pts, c, a, self.radius, self.turns).reshape(X.shape + (3,))
            if not np.all(np.isfinite(B)):
                raise ValueError("coil field map is not finite over the working volume")
            self.maps.append(B)
            self.interpolators.append(RegularGridInterpolator((xs, ys, zs), B, method="linear"))

    def unit_fields(self, position) -> np.ndarray:
        """Field per ampere of each coil at ``position``, shape (4, 3)."""
        p = np.asarray(position, dtype=float).reshape(1, 3)
        return np.array([f(p)[0] for f in self.interpolators])

    def field(self, position, currents) -> np.ndarray:
        return np.asarray(currents, dtype=float) @ self.unit_fields(position)

    def gradient_norm(self, position, currents, h: float = 0.25 * MM) -> np.ndarray:
        """Planar gradient of |B| from the maps (central differences)."""
        g = np.zeros(3)
        for k in range(2):
            e = np.zeros(3)
            e[k] = h
            g[k] = (np.linalg.norm(self.field(position + e, currents))
                    - np.linalg.norm(self.field(position - e, currents))) / (2 * h)
        return g


# ---------------------------------------------------------------- control law


@dataclass(frozen=True)
class ControlConfig:
    I_min: float = 6.0
    I_max: float = 8.0
    p_thr: float = 3 * MM
    t_min: float = 0.030
    t_max: float = 0.080
    arrival: float = 0.8 * MM
    sharp_turn_deg: float = 30.0
    N: int = 10
    plane_z: float = 80 * MM
    force_per_tesla: float = 1.0  # N/T, force proxy gain
    use_gradient: bool = False
    sensing_overhead: float = 0.080  # excitation plus ring-down buffer, s
    compute_latency: float = 0.050
    stall_cycles: int = 80
    max_cycles: int = 3000
    retries: int = 2
    plane_tolerance: float = 3 * MM
    r2_min: float = 0.95
    substep: float = 0.002

    def __post_init__(self):
        if not self.I_min < self.I_max:
            raise ValueError("I_min must be below I_max")
        if not self.t_min <= self.t_max:
            raise ValueError("t_min must not exceed t_max")
        if min(self.p_thr, self.arrival, self.sharp_turn_deg, self.substep) <= 0:
            raise ValueError("thresholds must be > 0")


@dataclass(frozen=True)
class RobotState:
    position: np.ndarray
    u: np.ndarray
    mobility: float = 5.0  # m/s per N
    moment: float = 8.9e-4
    tau: float = 0.010  # heading relaxation time, s

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float).reshape(2)
        n = np.linalg.norm(u)
        if n == 0:
            raise ValueError("heading must be non-zero")
        object.__setattr__(self, "u", u / n)
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        if self.mobility <= 0:
            raise ValueError("mobility must be > 0")

    def pose(self) -> Pose:
        """Device pose: magnetic moment along the heading, cantilever in-plane."""
        x = np.array([self.u[0], self.u[1], 0.0])
        z = np.cross([0.0, 0.0, 1.0], x)
        y = np.cross(z, x)
        return Pose(self.position, quat_from_matrix(np.column_stack([x, y, z])))


def heading_of(pose: Pose) -> np.ndarray:
    x = pose.rotation[:, 0]
    v = x[:2]
    n = np.linalg.norm(v)
    return v / n if n > 0 else np.array([1.0, 0.0])


def desired_direction(p_i, p_goal) -> np.ndarray:
    d = np.asarray(p_goal, dtype=float)[:2] - np.asarray(p_i, dtype=float)[:2]
    n = np.linalg.norm(d)
    if n == 0:
        raise ArrivedError("current position equals the goal")
    return d / n


def drive_current(distance: float, cfg: ControlConfig = ControlConfig()) -> float:
    if distance < 0:
        raise ValueError("distance must be >= 0")
    return min(cfg.I_max, cfg.I_min + (cfg.I_max - cfg.I_min) * distance / cfg.p_thr)


def _cross(a, b) -> float:
    return float(a[0] * b[1] - a[1] * b[0])


def coil_pair_ratio(B_j, B_k, D, eps: float = 1e-12) -> float:
    """Share of coil j in the unit-sum combination parallel to D."""
    cj = _cross(B_j, D)
    ck = _cross(B_k, D)
    den = cj - ck
    scale = max(np.linalg.norm(B_j[:2]), np.linalg.norm(B_k[:2]), 1e-300) * np.linalg.norm(D[:2])
    if abs(den) <= eps * scale:
        raise InfeasiblePairError("coil fields are parallel to each other but not to D")
    return -ck / den


def coil_pair_currents(lam: float, I_i: float) -> tuple[float, float]:
    """Currents (I_j, I_k) realizing the ratio ``lam : 1 - lam`` with max(I) = I_i."""
    if lam < 0 or lam > 1:
        raise InfeasiblePairError(f"lambda {lam:.4f} outside [0, 1]: needs a negative current")
    if lam == 1.0:
        return I_i, 0.0
    if lam == 0.0:
        return 0.0, I_i
    if lam < 0.5:
        return I_i * lam / (1.0 - lam), I_i
    if lam > 0.5:
        return I_i, I_i * (1.0 - lam) / lam
    return I_i, I_i


def choose_currents(unit_fields: np.ndarray, D, I_i: float, tol: float = 1e-9) -> np.ndarray:
    """Best feasible coil pair for direction D; returns the four coil currents."""
    D = np.asarray(D, dtype=float)[:2]
    best, best_score = None, -math.inf
    n = len(unit_fields)
    for j in range(n):
        Bj = unit_fields[j][:2]
        if _cross(Bj, D) == 0 and Bj @ D > 0:
            score = float(Bj @ D)
            if score > best_score:
                cur = np.zeros(n)
                cur[j] = I_i
                best, best_score = cur, score
        for k in range(j + 1, n):
            Bk = unit_fields[k][:2]
            try:
                lam = coil_pair_ratio(Bj, Bk, D)
            except InfeasiblePairError:
                continue
            if lam < -tol or lam > 1 + tol:
                continue
            lam = min(1.0, max(0.0, lam))
            comp = lam * Bj + (1 - lam) * Bk
            along = float(comp @ D)
            if along <= 0:
                continue
            score = along / max(lam, 1 - lam)
            if score > best_score:
                Ij, Ik = coil_pair_currents(lam, I_i)
                cur = np.zeros(n)
                cur[j], cur[k] = Ij, Ik
                best, best_score = cur, score
    if best is None:
        raise InfeasiblePairError("no coil pair can produce the requested direction")
    return best


def actuation_time(alpha_deg: float, cfg: ControlConfig = ControlConfig()) -> float:
    a = abs(alpha_deg)
    if a > 180:
        raise ValueError("|alpha| must be <= 180 deg")
    if a <= cfg.sharp_turn_deg:
        return cfg.t_min
    return cfg.t_min + (cfg.t_max - cfg.t_min) * a / 180.0


def step_robot(state: RobotState, B, dt: float, force_per_tesla: float = 1.0, force=None) -> RobotState:
    """Overdamped translation along the field; heading relaxes to the field direction."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    B = np.asarray(B, dtype=float)
    F = force_per_tesla * B if force is None else np.asarray(force, dtype=float)
    F = np.array([F[0], F[1], 0.0])
    if not np.any(F) and not np.any(B[:2]):
        return state
    pos = state.position + state.mobility * F * dt
    u = state.u
    b2 = B[:2]
    if np.linalg.norm(b2) > 0:
        target = b2 / np.linalg.norm(b2)
        w = 1.0 - math.exp(-dt / state.tau)
        u = u + w * (target - u)
        if np.linalg.norm(u) < 1e-12:
            u = target
    return replace(state, position=pos, u=u)


# ---------------------------------------------------------------- paths


def load_path(path) -> np.ndarray:
    """Waypoints (m) from a CSV with header x_mm,y_mm."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        if header[:2] != ["x_mm", "y_mm"]:
            raise ValueError(f"{path}: expected header x_mm,y_mm")
        pts = [[float(r[0]), float(r[1])] for r in reader if r]
    return np.asarray(pts) * MM


def r_path_file() -> Path:
    return Path(str(resources.files("smol") / "data" / "r_path.csv"))


def load_r_path() -> np.ndarray:
    return load_path(r_path_file())


# ---------------------------------------------------------------- closed loop


EXCITATION_AXES = (np.array([1.0, 0.0]), np.array([0.0, 1.0]))
EXCITATION_MIN_EFFICIENCY = 0.5


def excitation_amplitude(theta_max: float, heading, coil: int) -> float:
    """Deflection reached by one excitation coil; full only with enough torque."""
    e = abs(_cross(heading, EXCITATION_AXES[coil]))
    if e >= EXCITATION_MIN_EFFICIENCY:
        return theta_max
    return theta_max * (e / EXCITATION_MIN_EFFICIENCY) ** 2


@dataclass
class ClosedLoopLog:
    cycles: list
    completed: bool
    missed_waypoints: int
    sim_time: float
    waypoints: int

    @property
    def errors(self) -> np.ndarray:
        return np.array([c["error_mm"] for c in self.cycles if c["error_mm"] is not None])

    def summary(self) -> dict:
        e = self.errors
        return {
            "completed": self.completed, "cycles": len(self.cycles), "waypoints": self.waypoints,
            "missed_waypoints": self.missed_waypoints, "sim_time_s": self.sim_time,
            "rate_hz": len(self.cycles) / self.sim_time if self.sim_time > 0 else 0.0,
            "mean_error_mm": float(e.mean()) if e.size else math.nan,
            "std_error_mm": float(e.std(ddof=1)) if e.size > 1 else 0.0,
            "retries": int(sum(c["retries"] for c in self.cycles)),
        }

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for c in self.cycles:
                fh.write(json.dumps(c, sort_keys=True) + "\n")


def _sense(robot: RobotState, ctx: FitContext, cfg: ControlConfig, nm, rng, init: Pose | None, coil: int):
    p = ctx.params.replace(theta_max=excitation_amplitude(ctx.params.theta_max, robot.u, coil))
    true_ctx = replace(ctx, params=p)
    frame = clean_frame(robot.pose(), true_ctx, cfg.N)
    raw = acquire(frame, ctx.array, nm.with_seed(int(rng.integers(2**63))) if nm is not None else None)
    obs = prepare_observations(raw, ctx, cfg.N)
    return localize(obs, ctx, init)


def _plausible(result, cfg: ControlConfig) -> bool:
    return (result.converged and result.r2 >= cfg.r2_min
            and abs(result.pose.position[2] - cfg.plane_z) <= cfg.plane_tolerance)


def run_closed_loop(waypoints, robot: RobotState, coils: CoilModel, ctx: FitContext | None = None,
                    cfg: ControlConfig = ControlConfig(), seed: int = 0, noise=True) -> ClosedLoopLog:
    """Sense, decide, act until every waypoint is reached or the robot stalls."""
    ctx = ctx or FitContext()
    nm = (default_noise_model(ctx.array) if noise is True else noise) if noise is not None and noise is not False else None
    wps = np.asarray(waypoints, dtype=float)
    rng = trial_rng(seed, 0)
    est_pose = None
    coil = int(rng.integers(2))
    idx = 0
    since_progress = 0
    cycles = []
    sim_time = 0.0
    prev_D = None
    while idx < len(wps) and len(cycles) < cfg.max_cycles:
        # sense
        tries = 0
        res = None
        for attempt in range(cfg.retries + 1):
            init = est_pose if est_pose is not None else perturbed_pose(robot.pose(), rng)
            try:
                res = _sense(robot, ctx, cfg, nm, rng, init, coil)
            except (NoSignalError, ValueError):
                res = None
            sim_time += cfg.sensing_overhead + cfg.N / (2 * ctx.params.f_res) + cfg.compute_latency
            if res is not None and _plausible(res, cfg):
                break
            tries += 1
            coil = 1 - coil  # the other excitation coil
            res = None
        if res is None:
            cycles.append({"cycle": len(cycles), "failed": True, "retries": tries, "error_mm": None,
                           "true_mm": list(robot.position / MM), "t_s": sim_time})
            since_progress += 1
            if since_progress > cfg.stall_cycles:
                break
            continue
        est_pose = res.pose
        est = res.pose.position
        u_est = heading_of(res.pose)
        # excitation for the next fix: the coil most perpendicular to the moment
        coil = int(np.argmax([abs(_cross(u_est, a)) for a in EXCITATION_AXES]))
        # waypoint latching
        goal = np.array([wps[idx][0], wps[idx][1]])
        new_goal = False
        while np.linalg.norm(goal - est[:2]) <= cfg.arrival:
            idx += 1
            since_progress = 0
            new_goal = True
            if idx >= len(wps):
                break
            goal = np.array([wps[idx][0], wps[idx][1]])
        err = float(np.linalg.norm(est - robot.position) / MM)
        record = {
            "cycle": len(cycles), "failed": False, "retries": tries, "waypoint": idx,
            "true_mm": [float(v) for v in robot.position / MM], "est_mm": [float(v) for v in est / MM],
            "error_mm": err, "r2": float(res.r2),
        }
        if idx >= len(wps):
            record.update({"currents_A": [0.0] * 4, "t_act_s": 0.0, "t_s": sim_time})
            cycles.append(record)
            break
        # decide
        D = desired_direction(est, goal)
        dist = float(np.linalg.norm(goal - est[:2]))
        I_i = drive_current(dist, cfg)
        alpha = math.degrees(math.atan2(_cross(u_est, D), float(u_est @ D)))
        t_act = actuation_time(alpha, cfg) if (new_goal or prev_D is None or abs(alpha) > cfg.sharp_turn_deg) else cfg.t_min
        currents = choose_currents(coils.unit_fields(est), D, I_i)
        # act
        t = 0.0
        while t < t_act - 1e-12:
            dt = min(cfg.substep, t_act - t)
            B = coils.field(robot.position, currents)
            force = robot.moment * coils.gradient_norm(robot.position, currents) if cfg.use_gradient else None
            robot = step_robot(robot, B, dt, cfg.force_per_tesla, force)
            t += dt
        sim_time += t_act
        prev_D = D
        since_progress += 1
        record.update({"currents_A": [float(c) for c in currents], "t_act_s": t_act, "alpha_deg": alpha,
                       "direction": [float(v) for v in D], "t_s": sim_time})
        cycles.append(record)
        if since_progress > cfg.stall_cycles:
            break
    completed = idx >= len(wps)
    return ClosedLoopLog(cycles, completed, len(wps) - idx, sim_time, len(wps))


def default_robot(start_xy, heading=(0.0, 1.0), plane_z: float = 80 * MM, coils: CoilModel | None = None,
                  speed: float = 10 * MM, current: float = 8.0) -> RobotState:
    """Robot whose mobility gives ``speed`` under one coil at ``current`` at the center."""
    coils = coils or CoilModel.square(plane_z=plane_z)
    b = np.linalg.norm(coils.unit_fields([0.0, 0.0, plane_z])[0]) * current
    return RobotState(np.array([start_xy[0], start_xy[1], plane_z]), np.asarray(heading), mobility=speed / b)
