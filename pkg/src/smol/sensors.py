"""Sensor array description and multi-channel signal frames."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

MM = 1e-3
UT = 1e-6
NT = 1e-9


class ConfigurationError(ValueError):
    """Raised for an inconsistent array layout or pipeline configuration."""


@dataclass(frozen=True)
class SensorSpec:
    """A single-axis magnetometer.

    Attributes
    ----------
    position : (3,) sensor position in m, world frame.
    axis : (3,) unit measurement direction.
    range : symmetric full-scale range in T.
    quantization : output resolution in T.
    """

    position: np.ndarray
    axis: np.ndarray
    range: float = 10 * UT
    quantization: float = 0.1 * NT

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float).reshape(3)
        axis = np.asarray(self.axis, dtype=float).reshape(3)
        n = np.linalg.norm(axis)
        if n == 0:
            raise ConfigurationError("sensor axis must be non-zero")
        if abs(n - 1.0) > 1e-9:
            axis = axis / n
        if self.range <= 0 or self.quantization < 0:
            raise ConfigurationError("sensor range must be > 0 and quantization >= 0")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "axis", axis)


def _direction_key(axis: np.ndarray) -> tuple:
    return tuple(np.round(axis, 6))


@dataclass(frozen=True)
class SensorArray:
    """A set of single-axis sensors sampled synchronously.

    ``reference_index`` maps each represented measurement direction to the
    index of the sensor used for the spatial difference. It may be given as a
    single int (one direction only) or as a sequence with one entry per
    direction.
    """

    sensors: tuple
    sample_rate: float = 50_000.0
    reference_index: tuple = ()

    def __post_init__(self):
        sensors = tuple(self.sensors)
        if not sensors:
            raise ConfigurationError("sensor array is empty")
        if self.sample_rate <= 0:
            raise ConfigurationError("sample_rate must be > 0")
        ref = self.reference_index
        if isinstance(ref, (int, np.integer)):
            ref = (int(ref),)
        ref = tuple(int(r) for r in ref)
        object.__setattr__(self, "sensors", sensors)
        object.__setattr__(self, "reference_index", ref)
        seen = {}
        for r in ref:
            if not 0 <= r < len(sensors):
                raise ConfigurationError(f"reference_index {r} out of range")
            key = _direction_key(sensors[r].axis)
            if key in seen:
                raise ConfigurationError(
                    f"sensors {seen[key]} and {r} are both references for direction {key}"
                )
            seen[key] = r

    def __len__(self) -> int:
        return len(self.sensors)

    @property
    def positions(self) -> np.ndarray:
        return np.array([s.position for s in self.sensors])

    @property
    def axes(self) -> np.ndarray:
        return np.array([s.axis for s in self.sensors])

    @property
    def ranges(self) -> np.ndarray:
        return np.array([s.range for s in self.sensors])

    @property
    def quantizations(self) -> np.ndarray:
        return np.array([s.quantization for s in self.sensors])

    def reference_for(self, i: int) -> int:
        """Index of the reference sensor sharing sensor ``i``'s direction."""
        key = _direction_key(self.sensors[i].axis)
        for r in self.reference_index:
            if _direction_key(self.sensors[r].axis) == key:
                return r
        raise ConfigurationError(
            f"no reference sensor for measurement direction {key} (sensor {i})"
        )

    def measurement_channels(self) -> list[int]:
        """Indices of non-reference sensors, in array order."""
        refs = set(self.reference_index)
        return [i for i in range(len(self.sensors)) if i not in refs]

    def scaled(self, factor: float) -> "SensorArray":
        """Copy with every sensor position multiplied by ``factor``."""
        sensors = tuple(replace(s, position=s.position * factor) for s in self.sensors)
        return replace(self, sensors=sensors)

    def permuted(self, order: Sequence[int]) -> "SensorArray":
        order = list(order)
        inverse = {old: new for new, old in enumerate(order)}
        sensors = tuple(self.sensors[i] for i in order)
        return SensorArray(sensors, self.sample_rate, tuple(inverse[r] for r in self.reference_index))

    def to_layout(self) -> dict:
        return {
            "sample_rate_hz": self.sample_rate,
            "reference_index": list(self.reference_index),
            "sensors": [
                {
                    "position_mm": [float(v) for v in s.position / MM],
                    "axis": [float(v) for v in s.axis],
                    "range_uT": s.range / UT,
                    "quantization_nT": s.quantization / NT,
                }
                for s in self.sensors
            ],
        }

    @classmethod
    def from_layout(cls, layout: dict) -> "SensorArray":
        try:
            entries = layout["sensors"]
            sensors = tuple(
                SensorSpec(
                    position=np.asarray(e["position_mm"], dtype=float) * MM,
                    axis=e["axis"],
                    range=float(e.get("range_uT", 10.0)) * UT,
                    quantization=float(e.get("quantization_nT", 0.1)) * NT,
                )
                for e in entries
            )
            return cls(sensors, float(layout.get("sample_rate_hz", 50_000.0)), layout["reference_index"])
        except KeyError as exc:
            raise ConfigurationError(f"layout is missing field {exc.args[0]!r}") from None


def default_array(sample_rate: float = 50_000.0, pitch: float = 50 * MM) -> SensorArray:
    """3x3 grid of z-axis sensors plus one corner reference sensor (last)."""
    sensors = [
        SensorSpec(position=(ix * pitch, iy * pitch, 0.0), axis=(0, 0, 1))
        for iy in (-1, 0, 1)
        for ix in (-1, 0, 1)
    ]
    sensors.append(SensorSpec(position=(-2 * pitch, -2 * pitch, 0.0), axis=(0, 0, 1)))
    return SensorArray(tuple(sensors), sample_rate, (len(sensors) - 1,))


def load_layout(path) -> SensorArray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"sensor layout file not found: {path}")
    with open(path) as fh:
        return SensorArray.from_layout(json.load(fh))


def save_layout(array: SensorArray, path) -> None:
    with open(path, "w") as fh:
        json.dump(array.to_layout(), fh, indent=2)


@dataclass(frozen=True)
class SignalFrame:
    """Time-aligned multi-channel series.

    ``data`` has shape (channels, samples); sample ``k`` is taken at
    ``start_time + k / sample_rate``. ``channel_ids`` are sensor indices into
    the originating array.
    """

    data: np.ndarray
    sample_rate: float
    start_time: float = 0.0
    units: str = "T"
    channel_ids: tuple = field(default=())

    def __post_init__(self):
        data = np.atleast_2d(np.asarray(self.data, dtype=float))
        object.__setattr__(self, "data", data)
        ids = tuple(self.channel_ids) if len(self.channel_ids) else tuple(range(data.shape[0]))
        if len(ids) != data.shape[0]:
            raise ValueError("channel_ids length does not match number of channels")
        object.__setattr__(self, "channel_ids", ids)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be > 0")

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate

    @property
    def times(self) -> np.ndarray:
        return self.start_time + np.arange(self.n_samples) / self.sample_rate

    def with_data(self, data, units: str | None = None, channel_ids=None) -> "SignalFrame":
        return SignalFrame(
            data,
            self.sample_rate,
            self.start_time,
            self.units if units is None else units,
            self.channel_ids if channel_ids is None else channel_ids,
        )

    def channel(self, sensor_index: int) -> np.ndarray:
        return self.data[self.channel_ids.index(sensor_index)]

    def window(self, t0: float | None = None, t1: float | None = None) -> "SignalFrame":
        """Samples with ``t0 <= t < t1`` (either bound may be omitted)."""
        k0 = 0 if t0 is None else max(0, int(np.ceil((t0 - self.start_time) * self.sample_rate - 1e-9)))
        k1 = self.n_samples if t1 is None else min(
            self.n_samples, int(np.ceil((t1 - self.start_time) * self.sample_rate - 1e-9))
        )
        return SignalFrame(
            self.data[:, k0:k1],
            self.sample_rate,
            self.start_time + k0 / self.sample_rate,
            self.units,
            self.channel_ids,
        )

    def to_csv(self, path) -> None:
        """One column per channel, preceded by a time column."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time_s"] + [f"ch{c}_{self.units}" for c in self.channel_ids])
            for t, row in zip(self.times, self.data.T):
                writer.writerow([repr(float(t))] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path, sample_rate: float | None = None) -> "SignalFrame":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = np.array([[float(v) for v in row] for row in reader])
        times = rows[:, 0]
        if sample_rate is None:
            sample_rate = 1.0 / np.median(np.diff(times))
        ids, units = [], "T"
        for name in header[1:]:
            tag, _, units = name.partition("_")
            ids.append(int(tag[2:]))
        return cls(rows[:, 1:].T, sample_rate, float(times[0]), units or "T", tuple(ids))
