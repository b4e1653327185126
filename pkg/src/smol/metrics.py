"""Fit-quality, accuracy and circular statistics."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np


class UndefinedStatisticError(ValueError):
    """A statistic is undefined for the given input (constant data, zero resultant)."""


def sse_tss_r2(data, fit) -> tuple[float, float, float]:
    d = np.ravel(np.asarray(data, dtype=float))
    f = np.ravel(np.asarray(fit, dtype=float))
    if d.shape != f.shape or d.size < 2:
        raise ValueError("data and fit must have equal lengths >= 2")
    sse = float(np.sum((d - f) ** 2))
    tss = float(np.sum((d - d.mean()) ** 2))
    if tss == 0.0:
        raise UndefinedStatisticError("R^2 undefined: data are constant")
    return sse, tss, 1.0 - sse / tss


def mae(measured, truth) -> float:
    m = np.asarray(measured, dtype=float)
    t = np.asarray(truth, dtype=float)
    if m.size == 0:
        raise ValueError("empty input")
    return float(np.mean(np.abs(m - np.broadcast_to(t, m.shape))))


def mae_diff(measured, truth, reference_mean: float) -> float:
    """MAE after shifting the ground truth by the reference dataset mean."""
    return mae(measured, np.asarray(truth, dtype=float) + reference_mean)


def stddev(datasets) -> float:
    """Pooled deviation from each dataset's own mean, normalized by kn - 1."""
    sets = [np.ravel(np.asarray(d, dtype=float)) for d in datasets]
    total = sum(s.size for s in sets)
    if total < 2:
        raise ValueError("need at least two values")
    ss = sum(float(np.sum((s - s.mean()) ** 2)) for s in sets)
    return math.sqrt(ss / (total - 1))


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    return np.angle(np.exp(1j * np.asarray(a, dtype=float)))


def _resultant(angles) -> complex:
    a = np.ravel(np.asarray(angles, dtype=float))
    if a.size == 0:
        raise ValueError("empty input")
    if not np.all(np.isfinite(a)):
        raise ValueError("angles must be finite")
    return complex(np.sum(np.exp(1j * a)))


def circ_mean(angles) -> float:
    z = _resultant(angles)
    if abs(z) < 1e-12 * np.size(angles):
        raise UndefinedStatisticError("circular mean undefined: zero resultant")
    return float(np.angle(z))


def circ_std(datasets) -> float:
    """Circular deviation about each dataset's circular mean.

    The resultant length is normalized by the total count, which keeps the
    result real and non-negative.
    """
    if np.ndim(datasets[0]) == 0:
        datasets = [datasets]
    devs = [wrap_angle(circ_mean(d) - np.asarray(d, dtype=float)) for d in datasets]
    allv = np.concatenate([np.ravel(v) for v in devs])
    r = abs(_resultant(allv)) / allv.size
    return math.sqrt(max(0.0, -2.0 * math.log(min(1.0, r)))) if r > 0 else math.inf


def circ_mae_diff(measured, truth, reference_mean: float = 0.0) -> float:
    """Circular mean of absolute wrapped errors against truth + reference mean."""
    err = np.abs(wrap_angle(np.asarray(measured, dtype=float) - (np.asarray(truth, dtype=float) + reference_mean)))
    return circ_mean(err)


def linear_fit(x, y) -> tuple[float, float, float]:
    """Least-squares line; returns (slope, intercept, R^2)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    _, _, r2 = sse_tss_r2(y, slope * x + intercept)
    return float(slope), float(intercept), r2


@dataclass
class AxisStats:
    axis: str
    mae: float
    sigma: float
    unit: str


@dataclass
class AccuracyReport:
    """Per-axis differential MAE and pooled deviation of a sweep."""

    axes: list
    sigma_xyz: float | None
    repeats: int
    n_points: int
    trend_r2: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def axis(self, name: str) -> AxisStats:
        for a in self.axes:
            if a.axis == name:
                return a
        raise KeyError(name)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["axis", "mae", "sigma", "unit", "repeats", "points"])
            for a in self.axes:
                w.writerow([a.axis, repr(a.mae), repr(a.sigma), a.unit, self.repeats, self.n_points])


def translation_report(estimates, truths, ref_index: int, axes=("x", "y", "z"), meta=None) -> AccuracyReport:
    """Differential accuracy of a translation sweep.

    ``estimates`` has shape (points, repeats, 3) in mm and ``truths`` shape
    (points, 3) as offsets from the sweep's reference point.
    """
    est = np.asarray(estimates, dtype=float)
    tru = np.asarray(truths, dtype=float)
    stats = []
    sig = []
    for k, name in enumerate(axes):
        ref_mean = float(est[ref_index, :, k].mean())
        m = mae_diff(est[:, :, k], tru[:, None, k], ref_mean)
        s = stddev(list(est[:, :, k]))
        stats.append(AxisStats(name, m, s, "mm"))
        sig.append(s)
    return AccuracyReport(stats, float(np.mean(sig)), est.shape[1], est.shape[0], meta=dict(meta or {}))


def rotation_report(estimates_deg, truths_deg, ref_index: int, axes=("a", "b", "c"), meta=None) -> AccuracyReport:
    """Differential circular accuracy of a rotation sweep (degrees at the interface)."""
    est = np.radians(np.asarray(estimates_deg, dtype=float))
    tru = np.radians(np.asarray(truths_deg, dtype=float))
    if est.ndim == 2:
        est = est[:, :, None]
        tru = tru[:, None]
    stats = []
    for k, name in enumerate(axes[: est.shape[2]]):
        ref_mean = circ_mean(est[ref_index, :, k])
        m = circ_mae_diff(est[:, :, k], tru[:, None, k], ref_mean)
        s = circ_std(list(est[:, :, k]))
        stats.append(AxisStats(name, math.degrees(m), math.degrees(s), "deg"))
    return AccuracyReport(stats, None, est.shape[1], est.shape[0], meta=dict(meta or {}))
