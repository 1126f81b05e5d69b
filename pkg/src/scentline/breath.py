"""Nasal-pressure traces: synthesis with ground truth, and event detection.

Convention: negative pressure = inhalation. Detection is deliberately
scale-free: the hysteresis band is a fraction of the smoothed trace RMS and
the sniff criterion is relative to the median inhale peak, so uniformly
rescaling a trace yields the same events.

Gulps in the source observations were visual; here a brief near-zero-flow
gap inside a breath phase stands in for them, and the detector labels the
construct ``gulp_candidate`` to avoid overclaiming.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

SNIFF_DURATION = 0.3  # s, inserted transient length
SNIFF_GAIN = 3.0  # sniff peak as a multiple of base amplitude
PAUSE_DURATION = 0.5  # s, inserted flow pause (gulp surrogate)

_BINARY_MAGIC = b"BRTH"
_BINARY_VERSION = 1


class BreathKind(Enum):
    INHALE = "inhale"
    EXHALE = "exhale"
    SNIFF = "sniff"
    GULP_CANDIDATE = "gulp_candidate"


@dataclass(frozen=True)
class BreathEvent:
    kind: BreathKind
    t_start: float
    t_end: float
    peak_amplitude: float

    def __post_init__(self):
        if self.t_end <= self.t_start:
            raise ValueError("t_end must be after t_start")

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start


@dataclass
class PressureTrace:
    sample_rate: float
    left: np.ndarray
    right: np.ndarray
    units: str = "arbitrary"

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        self.left = np.asarray(self.left, dtype=np.float64)
        self.right = np.asarray(self.right, dtype=np.float64)
        if self.left.shape != self.right.shape or self.left.ndim != 1:
            raise ValueError("left/right must be 1-d arrays of equal length")

    def __len__(self) -> int:
        return len(self.left)

    @property
    def duration(self) -> float:
        return len(self.left) / self.sample_rate

    def summed(self) -> np.ndarray:
        return self.left + self.right

    def scaled(self, factor: float) -> "PressureTrace":
        return PressureTrace(
            self.sample_rate, self.left * factor, self.right * factor, self.units
        )


def synthesize_breathing(
    rate: float,
    amplitude: float,
    noise_sd: float,
    sniff_times: list[float],
    pause_times: list[float],
    duration: float,
    seed: int,
    sample_rate: float = 100.0,
) -> tuple[PressureTrace, list[BreathEvent]]:
    """Sinusoidal breathing with inserted sniffs and flow pauses.

    Sniffs are 0.3 s inhalation transients at 3x amplitude, overwriting the
    base signal; pauses are 0.5 s of near-zero flow. Insertions may not
    overlap each other. Ground-truth events come back alongside the trace;
    place sniffs inside exhale phases and pauses inside inhale phases (see
    ``suggest_insertion_times``) or the truth labels will not match what
    any detector can recover. Deterministic per seed.
    """
    if rate <= 0:
        raise ValueError("rate must be positive")
    if duration <= 0:
        raise ValueError("duration must be positive")
    if amplitude < 0 or noise_sd < 0:
        raise ValueError("amplitude and noise_sd must be >= 0")

    insertions = sorted(
        [(t0, SNIFF_DURATION, BreathKind.SNIFF) for t0 in sniff_times]
        + [(t0, PAUSE_DURATION, BreathKind.GULP_CANDIDATE) for t0 in pause_times]
    )
    for (a0, ad, _), (b0, _, _) in zip(insertions, insertions[1:]):
        if b0 < a0 + ad:
            raise ValueError(f"overlapping insertions at t={a0:.3g}s and t={b0:.3g}s")
    for t0, d, _ in insertions:
        if t0 < 0 or t0 + d > duration:
            raise ValueError(f"insertion at t={t0:.3g}s does not fit in the trace")

    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    frequency = rate / 60.0
    signal = -amplitude * np.sin(2.0 * np.pi * frequency * t)

    for t0, d, kind in insertions:
        mask = (t >= t0) & (t < t0 + d)
        if kind is BreathKind.SNIFF:
            signal[mask] = -SNIFF_GAIN * amplitude * np.sin(np.pi * (t[mask] - t0) / d)
        else:
            signal[mask] = 0.0

    truth = _ground_truth(rate, amplitude, duration, insertions)

    rng = np.random.default_rng(seed)
    if noise_sd > 0:
        signal = signal + rng.normal(0.0, noise_sd, n)
    half = signal / 2.0
    trace = PressureTrace(sample_rate=sample_rate, left=half, right=half.copy())
    return trace, truth


def _ground_truth(
    rate: float,
    amplitude: float,
    duration: float,
    insertions: list[tuple[float, float, BreathKind]],
    min_fragment: float = 0.05,
) -> list[BreathEvent]:
    """Base half-period phases, split wherever an insertion overwrote them."""
    events: list[BreathEvent] = []
    half_period = 30.0 / rate
    k = 0
    while k * half_period < duration:
        start = k * half_period
        end = min((k + 1) * half_period, duration)
        kind = BreathKind.INHALE if k % 2 == 0 else BreathKind.EXHALE
        cursor = start
        for t0, d, _ in insertions:
            i0, i1 = t0, t0 + d
            if i1 <= cursor or i0 >= end:
                continue
            if i0 - cursor >= min_fragment and amplitude > 0:
                events.append(BreathEvent(kind, cursor, i0, amplitude))
            cursor = max(cursor, i1)
        if end - cursor >= min_fragment and amplitude > 0:
            events.append(BreathEvent(kind, cursor, end, amplitude))
        k += 1
    for t0, d, kind in insertions:
        peak = SNIFF_GAIN * amplitude if kind is BreathKind.SNIFF else 0.0
        if kind is BreathKind.SNIFF and amplitude == 0:
            continue
        events.append(BreathEvent(kind, t0, t0 + d, peak))
    events.sort(key=lambda e: (e.t_start, e.kind.value))
    return events


def suggest_insertion_times(
    rate: float,
    duration: float,
    n_sniffs: int,
    n_pauses: int,
    rng: np.random.Generator,
) -> tuple[list[float], list[float]]:
    """Pick insertion times centered in suitable phases, one per phase.

    Sniffs go mid-exhale (so they segment as their own short inhalation)
    and pauses mid-inhale; phases are drawn without replacement.
    """
    half_period = 30.0 / rate
    n_half = int(duration / half_period)
    inhale_slots = [k for k in range(n_half) if k % 2 == 0]
    exhale_slots = [k for k in range(n_half) if k % 2 == 1]
    if n_sniffs > len(exhale_slots) or n_pauses > len(inhale_slots):
        raise ValueError("not enough breath phases for the requested insertions")
    sniff_slots = rng.choice(len(exhale_slots), size=n_sniffs, replace=False)
    pause_slots = rng.choice(len(inhale_slots), size=n_pauses, replace=False)
    sniff_times = sorted(
        exhale_slots[int(i)] * half_period + (half_period - SNIFF_DURATION) / 2.0
        for i in sniff_slots
    )
    pause_times = sorted(
        inhale_slots[int(i)] * half_period + (half_period - PAUSE_DURATION) / 2.0
        for i in pause_slots
    )
    return sniff_times, pause_times


@dataclass(frozen=True)
class DetectorParams:
    """Tuning for ``detect_breath_events``; defaults fit 8-20 bpm traces.

    ``hysteresis`` is a fraction of the smoothed-trace RMS, not an absolute
    pressure, so detection is invariant to trace scaling. ``pause_min_dur``
    must exceed the sub-threshold dwell of a normal zero crossing
    (about 2*asin(hysteresis * rms / peak) / angular frequency) or every
    breath transition shows up as a gulp.
    """

    smooth_window: float = 0.2  # s, moving-average width
    hysteresis: float = 0.2  # fraction of smoothed-trace RMS
    sniff_max_dur: float = 0.5  # s
    sniff_amp_factor: float = 2.0  # multiple of median inhale peak
    pause_min_dur: float = 0.3  # s


def detect_breath_events(
    trace: PressureTrace, params: DetectorParams | None = None
) -> list[BreathEvent]:
    """Segment a trace into inhale/exhale/sniff/gulp_candidate events.

    Channels are summed, smoothed with a centered moving average, then
    segmented by hysteresis around zero. Phase boundaries are placed at the
    midpoint of the dead zone between phases, which lands them on the
    underlying zero crossings. Short high-amplitude inhalations reclassify
    as sniffs; a near-zero run of at least ``pause_min_dur`` inside a phase
    closes it, emits a gulp candidate, and reopens the phase.
    """
    params = params or DetectorParams()
    fs = trace.sample_rate
    window = int(round(params.smooth_window * fs))
    if window < 1:
        raise ValueError(
            f"sample rate {fs} Hz too low for smooth_window {params.smooth_window}s"
        )
    signal = trace.summed()
    if len(signal) == 0:
        raise ValueError("trace is empty")
    kernel = np.ones(window) / window
    smoothed = np.convolve(signal, kernel, mode="same")
    rms = float(np.sqrt(np.mean(smoothed * smoothed)))
    if rms == 0.0:
        return []
    threshold = params.hysteresis * rms

    sign = np.zeros(len(smoothed), dtype=np.int8)
    sign[smoothed > threshold] = 1  # exhale (positive pressure)
    sign[smoothed < -threshold] = -1  # inhale

    events: list[BreathEvent] = []
    current: int | None = None
    start_t = 0.0
    peak = 0.0
    last_active = 0  # index of last sample inside the current phase
    zero_start: int | None = None

    def close(end_t: float) -> None:
        if current is not None and end_t > start_t:
            kind = BreathKind.INHALE if current < 0 else BreathKind.EXHALE
            events.append(BreathEvent(kind, start_t, end_t, peak))

    for n, s in enumerate(sign):
        if s == 0:
            if current is not None and zero_start is None:
                zero_start = n
            continue
        if current is None:
            current = int(s)
            start_t = n / fs
            peak = abs(smoothed[n])
            last_active = n
            zero_start = None
            continue
        if s == current:
            if (
                zero_start is not None
                and (n - zero_start) / fs >= params.pause_min_dur
            ):
                # Flow pause inside a phase: close, emit the gulp candidate,
                # and resume the phase as a fresh event.
                close(zero_start / fs)
                events.append(
                    BreathEvent(
                        BreathKind.GULP_CANDIDATE,
                        zero_start / fs,
                        n / fs,
                        float(np.max(np.abs(smoothed[zero_start:n]))),
                    )
                )
                start_t = n / fs
                peak = 0.0
            zero_start = None
            peak = max(peak, abs(float(smoothed[n])))
            last_active = n
        else:
            mid = ((last_active + n) / 2.0) / fs
            close(mid)
            current = int(s)
            start_t = mid
            peak = abs(float(smoothed[n]))
            last_active = n
            zero_start = None
    close((last_active + 1) / fs)

    inhale_peaks = [e.peak_amplitude for e in events if e.kind is BreathKind.INHALE]
    if inhale_peaks:
        median_peak = float(np.median(inhale_peaks))
        if median_peak > 0:
            events = [
                (
                    BreathEvent(BreathKind.SNIFF, e.t_start, e.t_end, e.peak_amplitude)
                    if e.kind is BreathKind.INHALE
                    and e.duration < params.sniff_max_dur
                    and e.peak_amplitude > params.sniff_amp_factor * median_peak
                    else e
                )
                for e in events
            ]
    return events


@dataclass(frozen=True)
class AlignmentStats:
    """Fractions of delivery windows containing a sniff / gulp onset.

    ``None`` when there are no windows: absent is not the same as zero.
    """

    n_windows: int
    sniff_fraction: float | None
    gulp_fraction: float | None


def delivery_alignment_stats(
    events: list[BreathEvent], windows: list[tuple[float, float]]
) -> AlignmentStats:
    """Count windows whose span contains an event onset, per construct."""
    ordered = sorted(windows)
    for (a0, a1), (b0, _) in zip(ordered, ordered[1:]):
        if b0 < a1:
            raise ValueError("delivery windows must not overlap")
    if not windows:
        return AlignmentStats(0, None, None)

    def fraction(kind: BreathKind) -> float:
        onsets = [e.t_start for e in events if e.kind is kind]
        hit = sum(
            1 for w0, w1 in ordered if any(w0 <= onset <= w1 for onset in onsets)
        )
        return hit / len(ordered)

    return AlignmentStats(
        n_windows=len(ordered),
        sniff_fraction=fraction(BreathKind.SNIFF),
        gulp_fraction=fraction(BreathKind.GULP_CANDIDATE),
    )


# --- trace I/O ---------------------------------------------------------------


def write_csv(trace: PressureTrace, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "left", "right"])
        for i in range(len(trace)):
            writer.writerow(
                [repr(i / trace.sample_rate), repr(trace.left[i]), repr(trace.right[i])]
            )


def read_csv(path: str | Path) -> PressureTrace:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [c.strip() for c in header] != ["t", "left", "right"]:
            raise ValueError(f"unexpected CSV header {header}")
        t: list[float] = []
        left: list[float] = []
        right: list[float] = []
        for row in reader:
            t.append(float(row[0]))
            left.append(float(row[1]))
            right.append(float(row[2]))
    if len(t) < 2:
        raise ValueError("trace CSV needs at least two samples")
    sample_rate = (len(t) - 1) / (t[-1] - t[0])
    return PressureTrace(sample_rate, np.array(left), np.array(right))


def write_binary(trace: PressureTrace, path: str | Path) -> None:
    """Compact form: 'BRTH', u16 version, f64 rate, u64 n, then left/right f64s.

    All fields little-endian.
    """
    with open(path, "wb") as fh:
        fh.write(_BINARY_MAGIC)
        fh.write(struct.pack("<Hdq", _BINARY_VERSION, trace.sample_rate, len(trace)))
        fh.write(trace.left.astype("<f8").tobytes())
        fh.write(trace.right.astype("<f8").tobytes())


def read_binary(path: str | Path) -> PressureTrace:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _BINARY_MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {_BINARY_MAGIC!r}")
        version, rate, n = struct.unpack("<Hdq", fh.read(18))
        if version != _BINARY_VERSION:
            raise ValueError(f"unsupported trace version {version}")
        left = np.frombuffer(fh.read(8 * n), dtype="<f8")
        right = np.frombuffer(fh.read(8 * n), dtype="<f8")
    if len(left) != n or len(right) != n:
        raise ValueError("truncated trace file")
    return PressureTrace(rate, left.copy(), right.copy())
