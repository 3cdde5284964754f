"""Annealing schedules A(s), B(s) and reverse-anneal waveforms s(t).

A schedule is a table of (s, A, B) rows in GHz with A strictly decreasing and
B strictly increasing, interpolated piecewise-linearly.  The dimensionless
transverse-field strength is Gamma(s) = A(s)/B(s).

Two synthetic device schedules are built in closed form,

    A(s) = 25 (1 - s)^a,    B(s) = 10 (0.05 + 0.95 s^2),

with the exponent ``a`` solved per device so that Gamma(0.57) hits 0.104
(low-noise) or 0.052 (high-noise).  That puts Gamma near 1 at s = 0.4 and
drives it below 1e-3 past s = 0.8, a steep tail like a physical annealer's.
The low-noise device keeps more transverse field everywhere in (0, 1).

Waveforms are piecewise-linear s(t) with |ds/dt| capped at 0.2 per
microsecond, the device ramp limit.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

MAX_RAMP_RATE = 0.2          # |ds/dt| cap, 1/us
_GRID_POINTS = 1001
_RATE_TOL = 1e-12


class Device(Enum):
    LOW_NOISE = "low_noise"
    HIGH_NOISE = "high_noise"


class ScheduleError(ValueError):
    """Malformed schedule table or out-of-range query."""


@dataclass(frozen=True)
class ScheduleTable:
    """Sampled annealing schedule with monotone piecewise-linear interpolation."""

    s: np.ndarray
    a_ghz: np.ndarray
    b_ghz: np.ndarray
    device_label: str

    def __post_init__(self):
        s, a, b = (np.asarray(x, dtype=np.float64) for x in (self.s, self.a_ghz, self.b_ghz))
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "a_ghz", a)
        object.__setattr__(self, "b_ghz", b)
        if s.size < 2:
            raise ScheduleError("schedule needs at least 2 rows")
        if not (s.size == a.size == b.size):
            raise ScheduleError("column length mismatch")
        if s[0] < 0.0 or s[-1] > 1.0:
            raise ScheduleError("s must lie in [0, 1]")
        if not (np.diff(s) > 0).all():
            raise ScheduleError("s must be strictly increasing")
        if not (np.diff(a) < 0).all():
            raise ScheduleError("A(s) must be strictly decreasing")
        if not (np.diff(b) > 0).all():
            raise ScheduleError("B(s) must be strictly increasing")
        if (a < 0).any() or (b <= 0).any():
            raise ScheduleError("A must be >= 0 and B > 0")

    @property
    def gammas(self) -> np.ndarray:
        return self.a_ghz / self.b_ghz

    def a(self, s: float) -> float:
        return float(np.interp(self._check_s(s), self.s, self.a_ghz))

    def b(self, s: float) -> float:
        return float(np.interp(self._check_s(s), self.s, self.b_ghz))

    def _check_s(self, s: float) -> float:
        if not self.s[0] <= s <= self.s[-1]:
            raise ScheduleError(f"s = {s} outside table range [{self.s[0]}, {self.s[-1]}]")
        return float(s)

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["s", "A_GHz", "B_GHz"])
            for row in zip(self.s, self.a_ghz, self.b_ghz):
                w.writerow([repr(float(x)) for x in row])


def load_schedule(path, device_label: "str | None" = None) -> ScheduleTable:
    """Read a schedule CSV with header ``s,A_GHz,B_GHz``."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["s", "A_GHz", "B_GHz"]:
            raise ScheduleError(f"expected header 's,A_GHz,B_GHz', got {header}")
        rows = [[float(x) for x in row] for row in reader if row]
    if len(rows) < 2:
        raise ScheduleError("schedule needs at least 2 rows")
    arr = np.asarray(rows, dtype=np.float64)
    return ScheduleTable(arr[:, 0], arr[:, 1], arr[:, 2],
                         device_label or path.stem)


_SYNTH_A0 = 25.0
_SYNTH_B0 = 10.0
_SYNTH_BC = 0.05
_ANCHOR_S = 0.57
_ANCHOR_GAMMA = {Device.LOW_NOISE: 0.104, Device.HIGH_NOISE: 0.052}


def _synth_b(s: np.ndarray) -> np.ndarray:
    return _SYNTH_B0 * (_SYNTH_BC + (1.0 - _SYNTH_BC) * s * s)


def synthetic_schedule(device: Device) -> ScheduleTable:
    """Closed-form schedule for one of the two synthetic devices.

    1001-point grid on [0, 1]; the anchor s = 0.57 is a grid node, so the
    anchor value of Gamma is exact up to rounding.
    """
    device = Device(device)
    target = _ANCHOR_GAMMA[device]
    b_anchor = float(_synth_b(np.asarray(_ANCHOR_S)))
    # solve 8 (1 - s)^a = target * B(s) at the anchor
    exponent = math.log(target * b_anchor / _SYNTH_A0) / math.log(1.0 - _ANCHOR_S)
    s = np.linspace(0.0, 1.0, _GRID_POINTS)
    a = _SYNTH_A0 * (1.0 - s) ** exponent
    return ScheduleTable(s, a, _synth_b(s), device.value)


def gamma(table: ScheduleTable, s: float) -> float:
    """Dimensionless transverse-field strength A(s)/B(s)."""
    return table.a(s) / table.b(s)


def s_of_gamma(table: ScheduleTable, g: float) -> float:
    """Inverse of ``gamma``: the s at which A(s)/B(s) equals ``g``.

    Exact on the piecewise-linear interpolant (round-trips to ~1e-9).
    """
    gs = table.gammas
    if not gs[-1] <= g <= gs[0]:
        raise ScheduleError(f"gamma = {g} outside schedule range [{gs[-1]}, {gs[0]}]")
    # gammas decrease with s; find the bracketing segment
    k = int(np.searchsorted(-gs, -g, side="right")) - 1
    k = min(max(k, 0), gs.size - 2)
    a0, b0 = table.a_ghz[k], table.b_ghz[k]
    da = table.a_ghz[k + 1] - a0
    db = table.b_ghz[k + 1] - b0
    denom = da - g * db
    if denom == 0.0:
        t = 0.0
    else:
        t = (g * b0 - a0) / denom
    t = min(max(t, 0.0), 1.0)
    return float(table.s[k] + t * (table.s[k + 1] - table.s[k]))


# ---------------------------------------------------------------------------
# waveforms


@dataclass(frozen=True)
class Waveform:
    """Piecewise-linear s(t); times in microseconds."""

    segments: tuple   # of (t_start, t_end, s_start, s_end)

    def __post_init__(self):
        segs = tuple(tuple(float(x) for x in seg) for seg in self.segments)
        object.__setattr__(self, "segments", segs)
        if not segs:
            raise ScheduleError("waveform needs at least one segment")
        if segs[0][0] != 0.0:
            raise ScheduleError("waveform must start at t = 0")
        prev_t, prev_s = None, None
        for t0, t1, s0, s1 in segs:
            if t1 <= t0:
                raise ScheduleError("segment must have positive duration")
            if prev_t is not None and (t0 != prev_t or s0 != prev_s):
                raise ScheduleError("segments must be contiguous in t and s")
            rate = abs(s1 - s0) / (t1 - t0)
            if rate > MAX_RAMP_RATE + _RATE_TOL:
                raise ScheduleError(
                    f"|ds/dt| = {rate:.6g} exceeds the ramp limit {MAX_RAMP_RATE}/us")
            prev_t, prev_s = t1, s1

    @property
    def total_time(self) -> float:
        return self.segments[-1][1]

    def s_at(self, t: float) -> float:
        if not 0.0 <= t <= self.total_time:
            raise ScheduleError(f"t = {t} outside [0, {self.total_time}]")
        for t0, t1, s0, s1 in self.segments:
            if t <= t1:
                if t1 == t0:
                    return s1
                return s0 + (s1 - s0) * (t - t0) / (t1 - t0)
        return self.segments[-1][3]

    def to_json_dict(self) -> dict:
        return {"segments": [list(seg) for seg in self.segments],
                "total_time_us": self.total_time}


def reverse_waveform(s_star: float, tau_us: float, rate: float = MAX_RAMP_RATE) -> Waveform:
    """Reverse-anneal protocol: ramp 1 -> s*, hold tau, ramp s* -> 1.

    Ramps run at ``rate`` (default: the device limit), so each takes
    (1 - s*)/rate microseconds; a zero hold is omitted.
    """
    if not 0.0 <= s_star <= 1.0:
        raise ScheduleError(f"s_star = {s_star} outside [0, 1]")
    if not 0.0 < rate <= MAX_RAMP_RATE + _RATE_TOL:
        raise ScheduleError(f"ramp rate must lie in (0, {MAX_RAMP_RATE}]")
    if tau_us < 0.0:
        raise ScheduleError("hold time must be non-negative")
    segments = []
    t = 0.0
    if s_star < 1.0:
        ramp = (1.0 - s_star) / rate
        segments.append((t, t + ramp, 1.0, s_star))
        t += ramp
    if tau_us > 0.0:
        segments.append((t, t + tau_us, s_star, s_star))
        t += tau_us
    if s_star < 1.0:
        ramp = (1.0 - s_star) / rate
        segments.append((t, t + ramp, s_star, 1.0))
    if not segments:
        raise ScheduleError("degenerate waveform: s_star = 1 with zero hold")
    return Waveform(tuple(segments))


def sample_waveform(waveform: Waveform, n_steps: int) -> "tuple[np.ndarray, np.ndarray]":
    """Times and s values on a uniform grid merged with all segment endpoints.

    Refining n_steps only inserts points; shared times keep identical s.
    """
    if n_steps < 1:
        raise ScheduleError("n_steps must be >= 1")
    total = waveform.total_time
    ts = set(np.linspace(0.0, total, n_steps + 1).tolist())
    for t0, t1, _, _ in waveform.segments:
        ts.add(t0)
        ts.add(t1)
    t = np.array(sorted(ts), dtype=np.float64)
    s = np.array([waveform.s_at(x) for x in t], dtype=np.float64)
    return t, s
