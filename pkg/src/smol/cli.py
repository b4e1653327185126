"""Command-line entry point: ``smol <command> [config] --out DIR``.

Configs are TOML or JSON. Lengths are mm, angles deg, frequencies Hz and
field values uT at this boundary; everything inside the package is SI.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .model import EXPONENTIAL, LINEAR, MagnetSpec, OscillatorParams, Pose, reference_orientation
from .pipeline import NoSignalError, NoiseModel, acquire, default_noise_model
from .sensors import MM, UT, SignalFrame, default_array, load_layout
from .solver import CalibrationRequiredError, FitContext, calibrate, localize_frame, write_jsonl

OUT_ENV = "SMOL_OUT_DIR"
COMMANDS = ("simulate", "localize", "calibrate", "sweep", "superfast", "interference", "control", "version")


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field."""

    def __init__(self, field_name: str, msg: str):
        super().__init__(f"{field_name}: {msg}")
        self.field = field_name


# ---------------------------------------------------------------- config


def load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    text = p.read_bytes()
    if p.suffix.lower() == ".json":
        cfg = json.loads(text)
    else:
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        cfg = tomllib.loads(text.decode())
    if not isinstance(cfg, dict):
        raise ConfigError("<root>", "config must be a table/object")
    cfg["_base_dir"] = str(p.parent.resolve())
    return cfg


def config_hash(cfg: dict) -> str:
    clean = {k: v for k, v in cfg.items() if not k.startswith("_")}
    return hashlib.sha256(json.dumps(clean, sort_keys=True, default=str).encode()).hexdigest()


def _section(cfg: dict, name: str) -> dict:
    s = cfg.get(name, {})
    if not isinstance(s, dict):
        raise ConfigError(name, "must be a table")
    return s


def _num(sec: dict, key: str, default, where: str, positive: bool = False, integer: bool = False):
    v = sec.get(key, default)
    if v is None:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{where}.{key}", f"expected a number, got {v!r}")
    if integer and int(v) != v:
        raise ConfigError(f"{where}.{key}", f"expected an integer, got {v!r}")
    if positive and v <= 0:
        raise ConfigError(f"{where}.{key}", f"must be > 0, got {v!r}")
    return int(v) if integer else float(v)


def _vec(sec: dict, key: str, default, n: int, where: str):
    v = sec.get(key, default)
    try:
        arr = np.asarray(v, dtype=float).reshape(n)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}.{key}", f"expected {n} numbers, got {v!r}") from None
    return arr


def _path(cfg: dict, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else Path(cfg.get("_base_dir", ".")) / p


def device_from_config(cfg: dict) -> tuple[OscillatorParams, MagnetSpec, bool]:
    """Oscillator, magnet and calibration state from the ``device`` table or a device file."""
    sec = dict(_section(cfg, "device"))
    if "file" in sec:
        f = _path(cfg, sec.pop("file"))
        if not f.is_file():
            raise FileNotFoundError(f"device file not found: {f}")
        sec = {**json.loads(f.read_text()), **sec}
    w = "device"
    law = sec.get("damping_law", LINEAR)
    if law not in (LINEAR, EXPONENTIAL):
        raise ConfigError(f"{w}.damping_law", f"expected 'linear' or 'exponential', got {law!r}")
    try:
        params = OscillatorParams(
            f_res=_num(sec, "f_res_hz", 103.5, w, positive=True),
            theta_max=math.radians(_num(sec, "theta_max_deg", 17.8, w, positive=True)),
            eta=_num(sec, "eta_per_s", 1.1, w),
            phi=math.radians(_num(sec, "phi_deg", 0.0, w)),
            l0=_num(sec, "l0_mm", 1.5, w, positive=True) * MM,
            damping_law=law,
        )
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(w, str(e)) from None
    if "moment_Am2" in sec:
        magnet = MagnetSpec.from_moment(_num(sec, "moment_Am2", None, w, positive=True))
    else:
        magnet = MagnetSpec(_num(sec, "remanence_T", 1.424, w, positive=True),
                            _num(sec, "volume_mm3", MagnetSpec().volume / MM**3, w, positive=True) * MM**3)
    calibrated = sec.get("calibrated", True)
    if not isinstance(calibrated, bool):
        raise ConfigError(f"{w}.calibrated", "expected true or false")
    return params, magnet, calibrated


def array_from_config(cfg: dict):
    sec = _section(cfg, "array")
    if "layout" in sec:
        return load_layout(_path(cfg, sec["layout"]))
    return default_array(sample_rate=_num(sec, "sample_rate_hz", 50_000.0, "array", positive=True),
                         pitch=_num(sec, "pitch_mm", 50.0, "array", positive=True) * MM)


def noise_from_config(cfg: dict, array, seed: int) -> NoiseModel | None:
    sec = _section(cfg, "noise")
    if not sec.get("enabled", True):
        return None
    w = "noise"
    white = sec.get("white_uT")
    nm = default_noise_model(array, seed=seed,
                             harmonic_ratio=_num(sec, "harmonic_ratio", 0.3, w),
                             per_pitch=_num(sec, "gradient_per_pitch", 0.03, w),
                             white_sigma=None if white is None else _num(sec, "white_uT", None, w) * UT)
    if "mains_uT" in sec:
        from dataclasses import replace

        nm = replace(nm, mains_amp=_num(sec, "mains_uT", None, w) * UT)
    return nm


def pose_from_config(cfg: dict) -> Pose:
    sec = _section(cfg, "pose")
    pos = _vec(sec, "position_mm", [0.0, 0.0, 80.0], 3, "pose") * MM
    q = _vec(sec, "quaternion", reference_orientation(), 4, "pose")
    if pos[2] <= 0:
        raise ConfigError("pose.position_mm", "z must be > 0 (device above the sensor plane)")
    return Pose(pos, q)


def seed_of(cfg: dict, override: int | None) -> int:
    if override is not None:
        return override
    s = cfg.get("seed", 0)
    if isinstance(s, bool) or not isinstance(s, int):
        raise ConfigError("seed", f"expected an integer, got {s!r}")
    return s


def context_from_config(cfg: dict) -> FitContext:
    params, magnet, calibrated = device_from_config(cfg)
    return FitContext(params=params, magnet=magnet, array=array_from_config(cfg), calibrated=calibrated)


# ---------------------------------------------------------------- manifest


class Run:
    """Collects output files and writes the run manifest."""

    def __init__(self, command: str, cfg: dict, seed: int, out: Path):
        self.command, self.cfg, self.seed, self.out = command, cfg, seed, out
        self.files: list[Path] = []
        self.started = time.time()
        out.mkdir(parents=True, exist_ok=True)

    def add(self, *paths) -> None:
        self.files.extend(Path(p) for p in paths)

    def finish(self, status: str, extra: dict | None = None) -> Path:
        manifest = {
            "command": self.command,
            "config_sha256": config_hash(self.cfg),
            "config_path": self.cfg.get("_path"),
            "seed": self.seed,
            "version": __version__,
            "started": self.started,
            "finished": time.time(),
            "status": status,
            "outputs": sorted(str(p.relative_to(self.out)) for p in self.files),
        }
        if extra:
            manifest.update(extra)
        p = self.out / "manifest.json"
        p.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return p


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n")
    return path


# ---------------------------------------------------------------- commands


def _channel_groups(array) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {}
    for i, a in enumerate(array.axes):
        k = int(np.argmax(np.abs(a)))
        name = "xyz"[k] + ("p" if a[k] > 0 else "n")
        groups.setdefault(name, []).append(i)
    return groups


def cmd_simulate(cfg: dict, out: Path, seed: int, args) -> int:
    from .lab import eval_window

    ctx = context_from_config(cfg)
    pose = pose_from_config(cfg)
    sec = _section(cfg, "simulate")
    N = _num(sec, "N", 2, "simulate", positive=True, integer=True)
    t0, dur = eval_window(ctx.params, N, ctx.eval_start, ctx.filters, ctx.array.sample_rate)
    dur = _num(sec, "duration_s", dur, "simulate", positive=True)
    from .model import synthesize_signal

    frame = synthesize_signal(pose, ctx.params, ctx.magnet, ctx.array, dur, start_time=t0)
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    nm = noise_from_config(cfg, ctx.array, seed)
    raw = acquire(frame, ctx.array, nm.with_seed(int(rng.integers(2**63))) if nm else None)
    run = Run("simulate", cfg, seed, out)
    for name, ids in _channel_groups(ctx.array).items():
        p = out / f"frame_{name}.csv"
        SignalFrame(raw.data[ids], raw.sample_rate, raw.start_time, raw.units, tuple(ids)).to_csv(p)
        run.add(p)
    run.add(_write_json(out / "truth.json", {"position_mm": list(pose.position / MM),
                                             "quaternion": list(pose.quaternion), "N": N}))
    run.finish("ok")
    return 0


def _read_frames(cfg: dict, key: str, where: str) -> SignalFrame:
    files = cfg.get(key)
    if files is None:
        raise ConfigError(f"{where}.{key}", "missing; give a frame CSV path or a list of them")
    if isinstance(files, str):
        files = [files]
    parts = []
    for f in files:
        p = _path(cfg["_root"], f)
        if not p.is_file():
            raise FileNotFoundError(f"frame file not found: {p}")
        parts.append(SignalFrame.from_csv(p))
    if len(parts) == 1:
        return parts[0]
    ids = sum((list(fr.channel_ids) for fr in parts), [])
    order = np.argsort(ids)
    data = np.vstack([fr.data for fr in parts])[order]
    return SignalFrame(data, parts[0].sample_rate, parts[0].start_time, parts[0].units, tuple(np.array(ids)[order]))


def cmd_localize(cfg: dict, out: Path, seed: int, args) -> int:
    ctx = context_from_config(cfg)
    sec = dict(_section(cfg, "localize"), _root=cfg)
    if not ctx.calibrated:
        raise CalibrationRequiredError(
            "device is not calibrated: run the calibration protocol (`smol calibrate`, device resting "
            "at a known height) and point device.file at the written parameters")
    N = _num(sec, "N", 2, "localize", positive=True, integer=True)
    frame = _read_frames(sec, "frames", "localize")
    init = None
    if "init_position_mm" in sec:
        init = Pose(_vec(sec, "init_position_mm", None, 3, "localize") * MM,
                    _vec(sec, "init_quaternion", reference_orientation(), 4, "localize"))
    res = localize_frame(frame, ctx, N, init)
    run = Run("localize", cfg, seed, out)
    p = out / "localization.jsonl"
    write_jsonl([res], p)
    run.add(p)
    run.finish("ok")
    print(json.dumps(res.to_record(), sort_keys=True, default=float))
    return 0


def cmd_calibrate(cfg: dict, out: Path, seed: int, args) -> int:
    params, magnet, _ = device_from_config(cfg)
    ctx = FitContext(params=params, magnet=magnet, array=array_from_config(cfg))
    sec = dict(_section(cfg, "calibrate"), _root=cfg)
    if "z_mm" not in sec:
        raise ConfigError("calibrate.z_mm", "missing; the device height must be known for calibration")
    z = _num(sec, "z_mm", None, "calibrate", positive=True) * MM
    N = _num(sec, "N", 60, "calibrate", positive=True, integer=True)
    law = sec.get("damping_law", params.damping_law)
    if law not in (LINEAR, EXPONENTIAL):
        raise ConfigError("calibrate.damping_law", f"unknown law {law!r}")
    if "frames" in sec:
        frames = [_read_frames(sec, "frames", "calibrate")]
    else:
        # synthetic protocol run with the configured device as ground truth
        from .lab import clean_frame

        truth = FitContext(params=params.replace(damping_law=law), magnet=magnet, array=ctx.array)
        pose = Pose(np.array([0.0, 0.0, z]), reference_orientation())
        rng = np.random.default_rng(np.random.SeedSequence([seed]))
        nm = noise_from_config(cfg, ctx.array, seed)
        frame = clean_frame(pose, truth, N)
        frames = [acquire(frame, ctx.array, nm.with_seed(int(rng.integers(2**63))) if nm else None)]
        guess = _section(cfg, "calibrate").get("initial_scale", 1.1)
        ctx = ctx.with_params(theta_max=min(params.theta_max * guess, 1.5), eta=params.eta * guess)
    res = calibrate(frames, ctx, z, N=N, damping_law=law)
    run = Run("calibrate", cfg, seed, out)
    device = {
        "f_res_hz": res.params.f_res, "theta_max_deg": math.degrees(res.params.theta_max),
        "eta_per_s": res.params.eta, "phi_deg": math.degrees(res.params.phi), "l0_mm": res.params.l0 / MM,
        "damping_law": res.params.damping_law, "remanence_T": magnet.remanence,
        "volume_mm3": magnet.volume / MM**3, "calibrated": True,
    }
    run.add(_write_json(out / "device.json", device))
    run.add(_write_json(out / "calibration.json", {
        "sse": res.sse, "r2": res.r2, "iterations": res.iterations, "converged": res.converged,
        "z_theta_correlation": res.z_theta_correlation, "identifiable_with_free_z": res.identifiable,
        "position_mm": list(res.pose.position / MM), "quaternion": list(res.pose.quaternion),
    }))
    run.finish("ok" if res.converged else "not-converged")
    print(json.dumps(device, sort_keys=True))
    return 0 if res.converged else 1


def _sweep_values(scenario: str, axis: str, sec: dict):
    from . import lab

    vals = sec.get("values")
    if vals is None:
        if scenario == "precision_vs_N":
            return (1, 2, 4, 6, 10, 20)
        if scenario == "translation":
            return lab.speed_translation_values(axis)
        if scenario == "rotation":
            return lab.speed_rotation_values()
        if scenario == "damping":
            return tuple(np.arange(0.0, 26.0, 2.5))
        if scenario == "scaling":
            return tuple(np.array([0.6, 0.8, 1.0, 1.2, 1.5]) * lab.cube_side(lab.REAL_DEVICE_VOLUME))
        if scenario == "interference":
            return tuple(np.arange(80, 101, 5) * MM)
        return ()
    if not isinstance(vals, list) or not all(isinstance(v, (int, float)) for v in vals):
        raise ConfigError("sweep.values", "expected a list of numbers")
    unit = {"translation": MM, "rotation": math.pi / 180, "scaling": MM, "interference": MM}.get(scenario, 1.0)
    return tuple(float(v) * unit for v in vals)


def _campaign(command: str, cfg: dict, out: Path, seed: int, args, scenario: str | None = None) -> int:
    from .lab import ExperimentConfig, run_campaign

    sec = _section(cfg, command)
    scenario = scenario or sec.get("scenario")
    if scenario is None:
        raise ConfigError(f"{command}.scenario", "missing")
    axis = sec.get("axis", "x")
    params, magnet, _ = device_from_config(cfg)
    array = array_from_config(cfg)
    nm = noise_from_config(cfg, array, seed)
    options = sec.get("options", {})
    if not isinstance(options, dict):
        raise ConfigError(f"{command}.options", "must be a table")
    try:
        ec = ExperimentConfig(
            scenario=scenario, axis=axis, values=_sweep_values(scenario, axis, sec),
            repeats=_num(sec, "repeats", 20, command, positive=True, integer=True),
            N=_num(sec, "N", 2, command, positive=True, integer=True),
            N_seg=_num(sec, "N_seg", 4, command, positive=True, integer=True),
            z=_num(sec, "z_mm", 80.0, command, positive=True) * MM,
            seed=seed, params=params, magnet=magnet, array=array, noise=nm, noise_free=nm is None,
            jobs=args.jobs, options=options,
        )
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(command, str(e)) from None
    report = run_campaign(ec)
    run = Run(command, cfg, seed, out)
    run.add(*report.write(out))
    failures = sum(1 for r in report.rows if isinstance(r, dict) and r.get("converged") is False)
    status = "ok" if failures == 0 else f"{failures} flagged points"
    run.finish(status, {"summary": report.summary, "digest": report.digest()})
    print(json.dumps(report.summary, sort_keys=True, default=float))
    if failures and not args.partial:
        print(f"error: {failures} campaign points did not converge (use --partial to accept)", file=sys.stderr)
        return 1
    return 0


def cmd_sweep(cfg, out, seed, args) -> int:
    return _campaign("sweep", cfg, out, seed, args)


def cmd_superfast(cfg, out, seed, args) -> int:
    return _campaign("superfast", cfg, out, seed, args, scenario="superfast")


def cmd_interference(cfg, out, seed, args) -> int:
    return _campaign("interference", cfg, out, seed, args, scenario="interference")


def cmd_control(cfg: dict, out: Path, seed: int, args) -> int:
    from .control import CoilModel, ControlConfig, default_robot, load_path, load_r_path, run_closed_loop

    sec = _section(cfg, "control")
    params, magnet, calibrated = device_from_config(cfg)
    if not calibrated:
        raise CalibrationRequiredError("device is not calibrated: run the calibration protocol first")
    ctx = FitContext(params=params, magnet=magnet, array=array_from_config(cfg))
    path = sec.get("path", "r_path")
    wps = load_r_path() if path == "r_path" else load_path(_path(cfg, path))
    plane = _num(sec, "plane_z_mm", 80.0, "control", positive=True) * MM
    ccfg = ControlConfig(N=_num(sec, "N", 10, "control", positive=True, integer=True), plane_z=plane,
                         use_gradient=bool(sec.get("use_gradient", False)),
                         stall_cycles=_num(sec, "stall_cycles", 80, "control", positive=True, integer=True))
    coils = CoilModel.square(plane_z=plane)
    start = wps[0] + _vec(sec, "start_offset_mm", [0.0, -2.0], 2, "control") * MM
    robot = default_robot(start, plane_z=plane, coils=coils,
                          speed=_num(sec, "speed_mm_s", 10.0, "control", positive=True) * MM)
    nm = noise_from_config(cfg, ctx.array, seed)
    log = run_closed_loop(wps, robot, coils, ctx, ccfg, seed=seed, noise=nm)
    run = Run("control", cfg, seed, out)
    p = out / "trajectory.jsonl"
    log.write_jsonl(p)
    run.add(p)
    summary = log.summary()
    run.add(_write_json(out / "control_summary.json", summary))
    run.finish("ok" if log.completed else "incomplete", {"summary": summary})
    print(json.dumps(summary, sort_keys=True, default=float))
    return 0 if log.completed or args.partial else 1


HANDLERS = {
    "simulate": cmd_simulate, "localize": cmd_localize, "calibrate": cmd_calibrate, "sweep": cmd_sweep,
    "superfast": cmd_superfast, "interference": cmd_interference, "control": cmd_control,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="smol", description="Magneto-oscillatory localization simulator and solver.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        if name == "version":
            continue
        sp.add_argument("config", nargs="?", help="TOML or JSON config")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./smol_out/<command>)")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--jobs", type=int, default=1, help="parallel trial workers")
        sp.add_argument("--partial", action="store_true", help="exit 0 even if some points were flagged")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "version":
        print(__version__)
        return 0
    try:
        cfg = load_config(args.config)
        cfg["_path"] = args.config
        seed = seed_of(cfg, args.seed)
        if args.jobs < 1:
            raise ConfigError("--jobs", "must be >= 1")
        out = Path(args.out or os.environ.get(OUT_ENV) or Path("smol_out") / args.command)
        return HANDLERS[args.command](cfg, out, seed, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except CalibrationRequiredError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except NoSignalError as e:
        print(f"error: no signal: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
