"""Odor compositions: the semantic layer on top of the MIDI wire format.

A NoteOn/NoteOff pair on (channel, note) becomes one timed OdorEvent on
(device address, odor channel), velocity mapped to a concentration fraction.
Compositions carry named cues and are checked against a safety policy before
anything is allowed near a dispatch timeline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Mapping

from scentline.midi import (
    DEFAULT_TEMPO,
    MessageKind,
    MidiMessage,
    SmfScore,
    note_off,
    note_on,
    ticks_to_seconds,
)

LOG_CURVE_SPAN = 2.0  # decades of concentration mapped onto velocities 0..127


class VelocityCurve(Enum):
    LINEAR = "linear"
    LOGARITHMIC = "log"


def concentration_from_velocity(
    velocity: int, curve: VelocityCurve, span: float = LOG_CURVE_SPAN
) -> float:
    """Map velocity 1..127 to a concentration fraction; both curves hit 1.0 at 127."""
    if curve is VelocityCurve.LINEAR:
        return velocity / 127.0
    value = 10.0 ** ((velocity - 127) / 127.0 * span)
    return min(max(value, 0.0), 1.0)


def velocity_from_concentration(
    concentration: float, curve: VelocityCurve, span: float = LOG_CURVE_SPAN
) -> int:
    """Inverse of the velocity curve, clamped to the drivable range 1..127."""
    if concentration <= 0.0:
        return 1
    if curve is VelocityCurve.LINEAR:
        raw = concentration * 127.0
    else:
        raw = 127.0 + 127.0 * math.log10(concentration) / span
    return min(127, max(1, round(raw)))


@dataclass(frozen=True)
class OdorantSpec:
    """Metadata for a loadable odorant; constituents are data, not chemistry."""

    name: str
    constituents: tuple[str, ...] = ()
    detection_threshold_span: float = 0.0  # orders of magnitude, informational

    def __post_init__(self):
        if not self.name:
            raise ValueError("odorant name must be non-empty")


CADE = OdorantSpec(
    name="cade",
    constituents=(
        "delta-cadinene",
        "torreyol",
        "epicubenol",
        "zonarene",
        "beta-caryophyllene",
    ),
    detection_threshold_span=6.0,
)


@dataclass(frozen=True)
class OdorEvent:
    device_address: int
    odor_channel: int
    concentration: float
    onset: float
    duration: float
    label: str | None = None

    def __post_init__(self):
        if not 0 <= self.device_address <= 15:
            raise ValueError(f"device_address {self.device_address} out of range 0-15")
        if not 0 <= self.odor_channel <= 127:
            raise ValueError(f"odor_channel {self.odor_channel} out of range 0-127")
        if not 0.0 <= self.concentration <= 1.0:
            raise ValueError(f"concentration {self.concentration} outside [0, 1]")
        if self.onset < 0:
            raise ValueError(f"onset {self.onset} must be >= 0")
        if self.duration <= 0:
            raise ValueError(f"duration {self.duration} must be > 0")

    @property
    def end(self) -> float:
        return self.onset + self.duration


@dataclass
class OdorComposition:
    """Events sorted by onset plus named cue groups (label -> event indices)."""

    name: str
    events: list[OdorEvent] = field(default_factory=list)
    cues: dict[str, list[int]] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        onsets = [e.onset for e in self.events]
        if onsets != sorted(onsets):
            raise ValueError("events must be sorted by onset")
        for label, indices in self.cues.items():
            for i in indices:
                if not 0 <= i < len(self.events):
                    raise ValueError(f"cue {label!r} references missing event {i}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "events": [
                {
                    "device_address": e.device_address,
                    "odor_channel": e.odor_channel,
                    "concentration": e.concentration,
                    "onset": e.onset,
                    "duration": e.duration,
                    "label": e.label,
                }
                for e in self.events
            ],
            "cues": {label: list(ids) for label, ids in self.cues.items()},
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, data: dict) -> OdorComposition:
        events = [
            OdorEvent(
                device_address=int(e["device_address"]),
                odor_channel=int(e["odor_channel"]),
                concentration=float(e["concentration"]),
                onset=float(e["onset"]),
                duration=float(e["duration"]),
                label=e.get("label"),
            )
            for e in data.get("events", [])
        ]
        return cls(
            name=str(data.get("name", "untitled")),
            events=events,
            cues={k: [int(i) for i in v] for k, v in data.get("cues", {}).items()},
            warnings=[str(w) for w in data.get("warnings", [])],
        )


@dataclass(frozen=True)
class SafetyPolicy:
    approved_odorants: frozenset[str]
    max_concentration: float = 1.0
    max_single_exposure: float = 60.0
    min_inter_stimulus: float = 10.0
    max_cumulative_exposure: float = 300.0

    def __post_init__(self):
        if not 0 < self.max_concentration <= 1.0:
            raise ValueError("max_concentration must be in (0, 1]")
        for name in ("max_single_exposure", "min_inter_stimulus", "max_cumulative_exposure"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


DEFAULT_POLICY = SafetyPolicy(approved_odorants=frozenset({"cade"}))


def from_midi(
    score: SmfScore,
    mapping: VelocityCurve = VelocityCurve.LINEAR,
    name: str = "untitled",
    span: float = LOG_CURVE_SPAN,
) -> OdorComposition:
    """Pair NoteOn/NoteOff events into odor events.

    NoteOn with velocity 0 counts as NoteOff (folded here, not in the
    codec). Unpaired NoteOns are closed at the composition end and orphan
    NoteOffs ignored, both with a warning record instead of an error.
    """
    open_notes: dict[tuple[int, int], tuple[float, int]] = {}
    raw_events: list[OdorEvent] = []
    warnings: list[str] = []

    def close(key: tuple[int, int], t: float, note: str | None = None) -> None:
        onset, velocity = open_notes.pop(key)
        duration = t - onset
        if duration <= 0:
            warnings.append(
                f"zero-length note ch{key[0]} n{key[1]} at t={onset:.6g}s dropped"
            )
            return
        raw_events.append(
            OdorEvent(
                device_address=key[0],
                odor_channel=key[1],
                concentration=concentration_from_velocity(velocity, mapping, span),
                onset=onset,
                duration=duration,
                label=note,
            )
        )

    end_time = 0.0
    for tick, msg in score.events:
        t = ticks_to_seconds(tick, score)
        end_time = max(end_time, t)
        key = (msg.channel, msg.data1)
        if msg.kind is MessageKind.NOTE_ON and msg.data2 > 0:
            if key in open_notes:
                warnings.append(
                    f"retrigger on ch{key[0]} n{key[1]} at t={t:.6g}s closes previous note"
                )
                close(key, t)
            open_notes[key] = (t, msg.data2)
        elif msg.kind is MessageKind.NOTE_OFF or (
            msg.kind is MessageKind.NOTE_ON and msg.data2 == 0
        ):
            if key in open_notes:
                close(key, t)
            else:
                warnings.append(f"orphan NoteOff ch{key[0]} n{key[1]} at t={t:.6g}s ignored")
        # ControlChange / passthrough kinds carry no odor semantics here.

    for key in sorted(open_notes):
        warnings.append(
            f"unpaired NoteOn ch{key[0]} n{key[1]} closed at composition end"
        )
        close(key, end_time)

    raw_events.sort(key=lambda e: e.onset)
    return OdorComposition(name=name, events=raw_events, warnings=warnings)


def to_midi(
    comp: OdorComposition,
    ticks_per_quarter: int = 480,
    tempo: int = DEFAULT_TEMPO,
    mapping: VelocityCurve = VelocityCurve.LINEAR,
    span: float = LOG_CURVE_SPAN,
) -> SmfScore:
    """Render a composition back to a single-tempo score.

    Onsets and durations quantize to the tick grid (error at most half a
    tick); cue labels do not survive, MIDI has nowhere to put them.
    """

    def to_tick(seconds: float) -> int:
        return round(seconds * 1_000_000 * ticks_per_quarter / tempo)

    records: list[tuple[int, int, MidiMessage]] = []  # (tick, off-first rank, msg)
    for e in comp.events:
        on_tick = to_tick(e.onset)
        off_tick = max(to_tick(e.end), on_tick + 1)
        velocity = velocity_from_concentration(e.concentration, mapping, span)
        records.append((on_tick, 1, note_on(e.device_address, e.odor_channel, velocity)))
        records.append((off_tick, 0, note_off(e.device_address, e.odor_channel)))
    records.sort(key=lambda r: (r[0], r[1]))
    return SmfScore(
        ticks_per_quarter=ticks_per_quarter,
        tempo_map=[(0, tempo)],
        events=[(tick, msg) for tick, _, msg in records],
    )


@dataclass(frozen=True)
class Violation:
    rule: str
    event_index: int
    measured: object
    limit: object
    message: str

    def as_dict(self) -> dict:
        return {
            "rule": self.rule,
            "event_index": self.event_index,
            "measured": self.measured,
            "limit": self.limit,
            "message": self.message,
        }


def validate(
    comp: OdorComposition,
    policy: SafetyPolicy,
    odorant_by_channel: Mapping[tuple[int, int], str],
) -> list[Violation]:
    """Check a composition against the policy; violations are data, not errors.

    ``odorant_by_channel`` maps (device address, odor channel) to the loaded
    odorant name; channels missing from the map cannot be approved.
    """
    violations: list[Violation] = []
    for i, e in enumerate(comp.events):
        odorant = odorant_by_channel.get((e.device_address, e.odor_channel))
        if odorant is None or odorant not in policy.approved_odorants:
            violations.append(
                Violation(
                    rule="unapproved-odorant",
                    event_index=i,
                    measured=odorant or "<unmapped>",
                    limit=",".join(sorted(policy.approved_odorants)),
                    message=f"event {i}: odorant {odorant or 'unmapped'} not approved",
                )
            )
        if e.concentration > policy.max_concentration:
            violations.append(
                Violation(
                    rule="over-concentration",
                    event_index=i,
                    measured=e.concentration,
                    limit=policy.max_concentration,
                    message=f"event {i}: concentration {e.concentration:.4g} over limit",
                )
            )
        if e.duration > policy.max_single_exposure:
            violations.append(
                Violation(
                    rule="over-duration",
                    event_index=i,
                    measured=e.duration,
                    limit=policy.max_single_exposure,
                    message=f"event {i}: exposure {e.duration:.4g}s over single-event limit",
                )
            )

    last_end: dict[tuple[int, int], tuple[int, float]] = {}
    for i, e in enumerate(comp.events):
        key = (e.device_address, e.odor_channel)
        if key in last_end:
            prev_index, prev_end = last_end[key]
            gap = e.onset - prev_end
            if gap < 0:
                violations.append(
                    Violation(
                        rule="channel-overlap",
                        event_index=i,
                        measured=gap,
                        limit=0.0,
                        message=(
                            f"event {i} overlaps event {prev_index} on device "
                            f"{key[0]} channel {key[1]}"
                        ),
                    )
                )
            elif gap < policy.min_inter_stimulus:
                violations.append(
                    Violation(
                        rule="inter-stimulus-gap",
                        event_index=i,
                        measured=gap,
                        limit=policy.min_inter_stimulus,
                        message=f"event {i}: gap {gap:.4g}s after event {prev_index} too short",
                    )
                )
        if key not in last_end or e.end > last_end[key][1]:
            last_end[key] = (i, e.end)

    total = 0.0
    for i, e in enumerate(comp.events):
        total += e.duration
        if total > policy.max_cumulative_exposure:
            violations.append(
                Violation(
                    rule="cumulative-exposure",
                    event_index=i,
                    measured=sum(ev.duration for ev in comp.events),
                    limit=policy.max_cumulative_exposure,
                    message=f"cumulative exposure exceeds session budget at event {i}",
                )
            )
            break
    return violations


class SafetyViolationError(ValueError):
    """Raised when a composition fails validation on its way to dispatch."""

    def __init__(self, violations: list[Violation]):
        super().__init__(
            "; ".join(v.message for v in violations) or "composition rejected"
        )
        self.violations = violations


@dataclass(frozen=True)
class ValidatedComposition:
    """Pass token: proof that ``validate`` returned no violations.

    Only ``clear_for_dispatch`` constructs these; the sequencer refuses to
    compile anything else.
    """

    composition: OdorComposition
    policy: SafetyPolicy


def clear_for_dispatch(
    comp: OdorComposition,
    policy: SafetyPolicy,
    odorant_by_channel: Mapping[tuple[int, int], str],
) -> ValidatedComposition:
    """Validate and wrap; raises SafetyViolationError when anything fails."""
    violations = validate(comp, policy, odorant_by_channel)
    if violations:
        raise SafetyViolationError(violations)
    return ValidatedComposition(composition=comp, policy=policy)


class CueLookupError(KeyError):
    def __init__(self, label: str, available: list[str]):
        names = ", ".join(sorted(available)) or "<none>"
        super().__init__(f"unknown cue {label!r}; available cues: {names}")
        self.label = label
        self.available = sorted(available)


def cue(comp: OdorComposition, label: str) -> OdorComposition:
    """Extract a named cue as a sub-composition rebased to onset 0."""
    if label not in comp.cues:
        raise CueLookupError(label, list(comp.cues))
    picked = sorted(comp.cues[label])
    events = [comp.events[i] for i in picked]
    base = min(e.onset for e in events)
    rebased = [replace(e, onset=e.onset - base) for e in events]
    rebased.sort(key=lambda e: e.onset)
    return OdorComposition(
        name=f"{comp.name}:{label}",
        events=rebased,
        cues={label: list(range(len(rebased)))},
    )
