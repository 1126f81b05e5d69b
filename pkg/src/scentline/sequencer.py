"""Compile compositions into latency-compensated timelines and execute them.

The compiler subtracts each event's modeled delivery latency (chain hops plus
dead time plus rise lag) from its scored onset, so the simulated nose
concentration crosses 10% of target right when the composition says it
should. The runner is a deterministic event-aligned loop: identical inputs
and seed produce a byte-identical event log.

Live cues cannot be pre-compensated (the trigger is the earliest possible
issue time), so their log records carry the expected perceived latency
instead of pretending the error is zero.
"""

from __future__ import annotations

import heapq
import json
import threading
import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Iterable

from scentline.chain import ChainTopology, broadcast_all_off
from scentline.device import (
    Command,
    DeviceState,
    EXPOSURE_THRESHOLD,
    DeviceFaultError,
    ONSET_FRACTION,
    Status,
    actuate,
    modeled_latency,
    new_state,
    noise_spl,
    step,
)
from scentline.score import (
    CueLookupError,
    OdorComposition,
    SafetyPolicy,
    ValidatedComposition,
    cue as extract_cue,
)

_EPS = 1e-9


class CompileError(ValueError):
    pass


class SimClock:
    """Deterministic clock: sleeping just advances time."""

    def __init__(self, start: float = 0.0):
        self._now = start

    def now(self) -> float:
        return self._now

    def sleep_until(self, t: float) -> None:
        if t < self._now - _EPS:
            raise ValueError(f"clock cannot move backwards ({t} < {self._now})")
        self._now = max(self._now, t)


class WallClock:
    """Real time, relative to construction."""

    def __init__(self):
        self._origin = time.monotonic()

    def now(self) -> float:
        return time.monotonic() - self._origin

    def sleep_until(self, t: float) -> None:
        delay = t - self.now()
        if delay > 0:
            time.sleep(delay)


@dataclass(frozen=True)
class TimelineCommand:
    issue_t: float
    address: int
    action: str  # "set" | "stop"
    concentration: float
    intended_onset: float | None = None
    event_index: int | None = None
    label: str | None = None
    odor_channel: int | None = None
    duration: float | None = None  # on set commands, for exposure bookkeeping


@dataclass
class Timeline:
    commands: list[TimelineCommand] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        times = [c.issue_t for c in self.commands]
        if times != sorted(times):
            raise ValueError("commands must be sorted by issue time")
        if times and times[0] < 0:
            raise ValueError("issue times must be >= 0")


def compile_timeline(
    validated: ValidatedComposition,
    topo: ChainTopology,
    compensate: bool = True,
) -> Timeline:
    """Turn a validated composition into per-device set/stop commands.

    Delivery commands are issued early by (position * hop latency + device
    onset latency) so the perceived onset lands on the scored onset; stop
    commands compensate the hop latency only. Issue times that would land
    before zero are clamped with a warning. Only ``ValidatedComposition``
    is accepted: unvalidated compositions cannot be compiled at all.
    """
    if not isinstance(validated, ValidatedComposition):
        raise TypeError(
            "compile_timeline requires a ValidatedComposition from "
            "clear_for_dispatch; run validation first"
        )
    comp = validated.composition
    commands: list[TimelineCommand] = []
    warnings: list[str] = []
    for i, event in enumerate(comp.events):
        position = topo.position_of(event.device_address)
        if position is None:
            raise CompileError(
                f"event {i} ({event.label or 'unlabeled'}) addresses device "
                f"{event.device_address}, not present in the chain"
            )
        config = topo.config_of(event.device_address)
        if compensate:
            latency = position * topo.hop_latency + modeled_latency(
                config, event.concentration
            )
            issue = event.onset - latency
            stop_issue = event.end - position * topo.hop_latency
        else:
            issue = event.onset
            stop_issue = event.end
        if issue < 0:
            warnings.append(
                f"event {i}: compensation {event.onset - issue:.4g}s exceeds "
                f"onset {event.onset:.4g}s; issue clamped to 0"
            )
            issue = 0.0
        stop_issue = max(stop_issue, 0.0)
        commands.append(
            TimelineCommand(
                issue_t=issue,
                address=event.device_address,
                action="set",
                concentration=event.concentration,
                intended_onset=event.onset,
                event_index=i,
                label=event.label,
                odor_channel=event.odor_channel,
                duration=event.duration,
            )
        )
        commands.append(
            TimelineCommand(
                issue_t=stop_issue,
                address=event.device_address,
                action="stop",
                concentration=0.0,
                event_index=i,
                label=event.label,
                odor_channel=event.odor_channel,
            )
        )
    commands.sort(key=lambda c: c.issue_t)
    return Timeline(commands=commands, warnings=warnings)


@dataclass(frozen=True)
class ScenarioScript:
    """Timed cue triggers and log-only distractor markers."""

    name: str
    duration: float
    cues: tuple[tuple[float, str], ...] = ()
    markers: tuple[tuple[float, str], ...] = ()

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("scenario duration must be positive")
        for series in (self.cues, self.markers):
            times = [t for t, _ in series]
            if times != sorted(times):
                raise ValueError("script times must be non-decreasing")
            if times and times[0] < 0:
                raise ValueError("script times must be >= 0")


@dataclass
class _Arrival:
    t: float
    address: int
    command: Command
    action: str
    issue_t: float
    intended_onset: float | None
    event_index: int | None
    label: str | None
    expected_latency: float | None = None


@dataclass
class _OnsetWatch:
    address: int
    threshold: float
    intended: float | None
    label: str | None
    event_index: int | None
    expected_latency: float | None


class SessionRunner:
    """Owns the simulated chain and executes command schedules against it.

    Single-owner loop; cue triggers may be submitted from other threads via
    ``submit_cue`` and are processed at the next loop iteration. The event
    log is a list of plain dicts, one per dispatched or observed event.
    """

    def __init__(
        self,
        topo: ChainTopology,
        policy: SafetyPolicy,
        clock: SimClock | WallClock | None = None,
        sim_step: float | None = None,
        seed: int = 0,
        snapshots: bool = True,
    ):
        self.topo = topo
        self.policy = policy
        self.clock = clock if clock is not None else SimClock()
        if sim_step is None:
            sim_step = min(
                (config.sim_step for _, config in topo.devices), default=0.01
            )
        if sim_step <= 0:
            raise ValueError("sim_step must be positive")
        self.sim_step = sim_step
        self.seed = seed
        self.snapshots = snapshots
        self.devices: list[tuple[int, DeviceState]] = [
            (address, new_state(config)) for address, config in topo.devices
        ]
        self._by_address = {address: state for address, state in self.devices}
        self.log: list[dict] = []
        self.safety_rejections = 0
        self._arrivals: list[tuple[float, int, _Arrival]] = []
        self._arrival_seq = 0
        self._markers: list[tuple[float, int, str]] = []
        self._marker_seq = 0
        self._watches: list[_OnsetWatch] = []
        self._step_counts: dict[int, int] = {a: 0 for a, _ in self.devices}
        self._faults_logged: set[int] = set()
        self._cue_fragments: dict[str, OdorComposition] = {}
        self._cue_queue: deque[str] = deque()
        self._cue_lock = threading.Lock()
        self._last_event_end: dict[tuple[int, int], float] = {}
        self._scheduled_exposure = 0.0
        self._onset_errors: list[float] = []
        self._scheduled_duration: float | None = None

    # -- schedule building ---------------------------------------------------

    @property
    def t(self) -> float:
        return self.clock.now()

    def _push_arrival(self, arrival: _Arrival) -> None:
        heapq.heappush(self._arrivals, (arrival.t, self._arrival_seq, arrival))
        self._arrival_seq += 1

    def enqueue_timeline(self, timeline: Timeline) -> None:
        now = self.t
        for warning in timeline.warnings:
            self.log.append({"type": "warning", "t": now, "message": warning})
        for command in timeline.commands:
            position = self.topo.position_of(command.address)
            if position is None:
                raise CompileError(
                    f"timeline addresses device {command.address} not in chain"
                )
            issue = now + command.issue_t
            self._push_arrival(
                _Arrival(
                    t=issue + position * self.topo.hop_latency,
                    address=command.address,
                    command=Command(target=command.concentration),
                    action=command.action,
                    issue_t=issue,
                    intended_onset=(
                        None
                        if command.intended_onset is None
                        else now + command.intended_onset
                    ),
                    event_index=command.event_index,
                    label=command.label,
                )
            )
            if command.action == "set" and command.duration is not None:
                self._scheduled_exposure += command.duration
                if command.odor_channel is not None:
                    key = (command.address, command.odor_channel)
                    end = now + (command.intended_onset or 0.0) + command.duration
                    self._last_event_end[key] = max(
                        self._last_event_end.get(key, 0.0), end
                    )

    def add_marker(self, t: float, label: str) -> None:
        heapq.heappush(self._markers, (t, self._marker_seq, label))
        self._marker_seq += 1

    def set_cue_source(self, comp: OdorComposition) -> None:
        """Extract every named cue as a rebased fragment for live triggering."""
        self._cue_fragments = {label: extract_cue(comp, label) for label in comp.cues}

    def submit_cue(self, label: str) -> None:
        """Thread-safe entry point; processed at the next loop iteration."""
        with self._cue_lock:
            self._cue_queue.append(label)

    def trigger_cue(self, label: str) -> bool:
        """Dispatch a named cue right now; no pre-compensation is possible.

        Returns False (and logs the rejection) when the policy refuses the
        trigger: too soon after the previous stimulus on a channel, or over
        the session exposure budget. Raises CueLookupError for unknown
        labels.
        """
        if label not in self._cue_fragments:
            raise CueLookupError(label, list(self._cue_fragments))
        if not self.devices:
            self.log.append(
                {
                    "type": "warning",
                    "t": self.t,
                    "message": f"cue {label!r} triggered on an empty chain; no commands",
                }
            )
            return False
        fragment = self._cue_fragments[label]
        now = self.t

        for event in fragment.events:
            key = (event.device_address, event.odor_channel)
            last_end = self._last_event_end.get(key)
            onset = now + event.onset
            if last_end is not None and onset - last_end < self.policy.min_inter_stimulus:
                self._reject(
                    label,
                    "inter-stimulus-gap",
                    f"cue {label!r} rejected: {onset - last_end:.4g}s since last "
                    f"stimulus on device {key[0]} channel {key[1]}, policy "
                    f"requires {self.policy.min_inter_stimulus:.4g}s",
                )
                return False
            if event.duration > self.policy.max_single_exposure:
                self._reject(
                    label,
                    "over-duration",
                    f"cue {label!r} rejected: event duration over policy limit",
                )
                return False
            if event.concentration > self.policy.max_concentration:
                self._reject(
                    label,
                    "over-concentration",
                    f"cue {label!r} rejected: concentration over policy limit",
                )
                return False
        added = sum(e.duration for e in fragment.events)
        if self._scheduled_exposure + added > self.policy.max_cumulative_exposure:
            self._reject(
                label,
                "cumulative-exposure",
                f"cue {label!r} rejected: session exposure budget exhausted",
            )
            return False

        for event in fragment.events:
            position = self.topo.position_of(event.device_address)
            if position is None:
                self.log.append(
                    {
                        "type": "warning",
                        "t": now,
                        "message": f"cue event addresses device "
                        f"{event.device_address} not in chain; skipped",
                    }
                )
                continue
            config = self.topo.config_of(event.device_address)
            expected = position * self.topo.hop_latency + modeled_latency(
                config, event.concentration
            )
            issue = now + event.onset
            self._push_arrival(
                _Arrival(
                    t=issue + position * self.topo.hop_latency,
                    address=event.device_address,
                    command=Command(target=event.concentration),
                    action="set",
                    issue_t=issue,
                    intended_onset=issue,
                    event_index=None,
                    label=event.label or label,
                    expected_latency=expected,
                )
            )
            self._push_arrival(
                _Arrival(
                    t=issue + event.duration + position * self.topo.hop_latency,
                    address=event.device_address,
                    command=Command(target=0.0),
                    action="stop",
                    issue_t=issue + event.duration,
                    intended_onset=None,
                    event_index=None,
                    label=event.label or label,
                )
            )
            key = (event.device_address, event.odor_channel)
            self._last_event_end[key] = issue + event.duration
            self._scheduled_exposure += event.duration
        return True

    def _reject(self, label: str, rule: str, message: str) -> None:
        self.safety_rejections += 1
        self.log.append(
            {
                "type": "safety_rejection",
                "t": self.t,
                "label": label,
                "rule": rule,
                "message": message,
            }
        )

    def panic(self) -> None:
        """Broadcast all-off; stops bypass every transport queue on arrival."""
        now = self.t
        self.log.append({"type": "panic", "t": now})
        for dispatch in broadcast_all_off(self.topo):
            self._push_arrival(
                _Arrival(
                    t=now + dispatch.arrival,
                    address=dispatch.address,
                    command=dispatch.command,
                    action="panic-stop",
                    issue_t=now,
                    intended_onset=None,
                    event_index=None,
                    label=None,
                )
            )

    # -- the loop --------------------------------------------------------------

    def advance_until(self, end: float) -> None:
        """Run the event-aligned loop up to time ``end``.

        Device states advance in sim_step increments, subdivided so that
        command arrivals and transport releases land exactly on a step
        boundary; perceived-onset detection is therefore quantized by at
        most one sim step.
        """
        self._drain_cue_queue()
        self._process_due()
        while self.t < end - _EPS:
            t_next = min(self.t + self.sim_step, end)
            if self._arrivals:
                t_next = min(t_next, max(self._arrivals[0][0], self.t))
            for _, state in self.devices:
                release = state.next_release()
                if release is not None and release > self.t + _EPS:
                    t_next = min(t_next, release)
            if self._markers:
                t_next = min(t_next, max(self._markers[0][0], self.t))
            t_next = max(t_next, self.t)
            dt = t_next - self.t
            if dt > _EPS:
                for _, state in self.devices:
                    step(state, dt)
            self.clock.sleep_until(t_next)
            self._after_step()
            self._drain_cue_queue()
            self._process_due()

    def finish(self, cap: float = 3600.0) -> None:
        """Advance until the session is quiescent: queues drained, air clear."""
        hard_cap = self.t + cap
        while self.t < hard_cap:
            if (
                not self._arrivals
                and not self._markers
                and not self._watches
                and all(self._quiescent(state) for _, state in self.devices)
            ):
                break
            self.advance_until(min(self.t + 1.0, hard_cap))

    @staticmethod
    def _quiescent(state: DeviceState) -> bool:
        if state.dead_time_queue or state.target_concentration != 0.0:
            return False
        floor = state.config.residual_floor
        settled_at_floor = floor > 0 and abs(state.nose_concentration - floor) <= 1e-6
        return state.nose_concentration <= EXPOSURE_THRESHOLD or settled_at_floor

    def run(self, timeline: Timeline) -> list[dict]:
        """Convenience: enqueue a timeline and run it to quiescence."""
        self.enqueue_timeline(timeline)
        self.finish()
        return self.log

    def _drain_cue_queue(self) -> None:
        while True:
            with self._cue_lock:
                if not self._cue_queue:
                    return
                label = self._cue_queue.popleft()
            self.trigger_cue(label)

    def _process_due(self) -> None:
        now = self.t
        while self._markers and self._markers[0][0] <= now + _EPS:
            t, _, label = heapq.heappop(self._markers)
            self.log.append({"type": "marker", "t": t, "label": label})
        while self._arrivals and self._arrivals[0][0] <= now + _EPS:
            _, _, arrival = heapq.heappop(self._arrivals)
            self._deliver(arrival)

    def _deliver(self, arrival: _Arrival) -> None:
        state = self._by_address.get(arrival.address)
        record = {
            "type": "dispatch",
            "t": arrival.issue_t,
            "address": arrival.address,
            "action": arrival.action,
            "concentration": arrival.command.target,
            "arrival": arrival.t,
            "intended_onset": arrival.intended_onset,
            "event_index": arrival.event_index,
            "label": arrival.label,
        }
        if arrival.expected_latency is not None:
            record["expected_latency"] = arrival.expected_latency
        if state is None:
            record["error"] = "no such device"
            self.log.append(record)
            return
        try:
            actuate(state, arrival.command)
        except DeviceFaultError as exc:
            self.log.append(
                {
                    "type": "aborted",
                    "t": arrival.t,
                    "address": arrival.address,
                    "action": arrival.action,
                    "reason": str(exc),
                    "event_index": arrival.event_index,
                    "label": arrival.label,
                }
            )
            return
        self.log.append(record)
        if arrival.action == "set" and arrival.command.target > 0:
            self._watches.append(
                _OnsetWatch(
                    address=arrival.address,
                    threshold=ONSET_FRACTION * arrival.command.target,
                    intended=arrival.intended_onset,
                    label=arrival.label,
                    event_index=arrival.event_index,
                    expected_latency=arrival.expected_latency,
                )
            )
        self._check_crossings()

    def _after_step(self) -> None:
        self._check_crossings()
        now = self.t
        for address, state in self.devices:
            self._step_counts[address] += 1
            if state.status is Status.FAULT and address not in self._faults_logged:
                self._faults_logged.add(address)
                self.log.append(
                    {
                        "type": "fault",
                        "t": now,
                        "address": address,
                        "reason": state.fault_reason,
                    }
                )
            if (
                self.snapshots
                and self._step_counts[address] % state.config.snapshot_every == 0
            ):
                self.log.append(
                    {
                        "type": "snapshot",
                        "t": now,
                        "address": address,
                        "concentration": state.nose_concentration,
                        "pump_speed": state.pump_speed,
                        "battery_mah": state.battery_charge,
                        "exposure_s": state.cumulative_exposure,
                        "status": state.status.value,
                        "noise_db": noise_spl(state.config, state.pump_speed),
                    }
                )

    def _check_crossings(self) -> None:
        if not self._watches:
            return
        now = self.t
        still_open: list[_OnsetWatch] = []
        for watch in self._watches:
            state = self._by_address[watch.address]
            if state.nose_concentration >= watch.threshold - _EPS:
                record = {
                    "type": "perceived_onset",
                    "t": now,
                    "address": watch.address,
                    "event_index": watch.event_index,
                    "label": watch.label,
                    "intended": watch.intended,
                }
                if watch.intended is not None:
                    record["error"] = now - watch.intended
                    if watch.expected_latency is None:
                        self._onset_errors.append(now - watch.intended)
                if watch.expected_latency is not None and watch.intended is not None:
                    record["expected_latency"] = watch.expected_latency
                    record["observed_latency"] = now - watch.intended
                self.log.append(record)
            elif (
                state.target_concentration < watch.threshold
                and not any(e.target >= watch.threshold for e in state.dead_time_queue)
            ):
                # Target dropped before the crossing: the onset will never come.
                self.log.append(
                    {
                        "type": "onset_missed",
                        "t": now,
                        "address": watch.address,
                        "event_index": watch.event_index,
                        "label": watch.label,
                    }
                )
            else:
                still_open.append(watch)
        self._watches = still_open

    # -- reporting ---------------------------------------------------------------

    def set_scheduled_duration(self, duration: float) -> None:
        self._scheduled_duration = duration

    def summary(self) -> dict:
        onset_errors = self._onset_errors
        return {
            "scheduled_duration_s": self._scheduled_duration,
            "exposure_total_s": self._scheduled_exposure,
            "perceived_onset": {
                "count": len(onset_errors),
                "max_abs_error_s": max((abs(e) for e in onset_errors), default=None),
                "mean_error_s": (
                    sum(onset_errors) / len(onset_errors) if onset_errors else None
                ),
            },
            "devices": [
                {
                    "address": address,
                    "battery_remaining_mah": state.battery_charge,
                    "exposure_s": state.cumulative_exposure,
                    "status": state.status.value,
                }
                for address, state in self.devices
            ],
            "safety_rejections": self.safety_rejections,
        }


def run_scenario(
    runner: SessionRunner,
    script: ScenarioScript,
    cue_source: OdorComposition,
    compensate: bool = True,
) -> list[dict]:
    """Replay a scripted session: scheduled cues plus log-only markers.

    Scripted cue times are known in advance, so (unlike live triggers) they
    are compiled into a compensated timeline. The whole assembled
    composition is validated against the runner's policy before any command
    is enqueued.
    """
    from scentline.chain import odorant_by_channel
    from scentline.score import clear_for_dispatch

    runner.set_cue_source(cue_source)
    events = []
    for t, label in script.cues:
        fragment = extract_cue(cue_source, label)
        for event in fragment.events:
            events.append(
                replace(event, onset=t + event.onset, label=event.label or label)
            )
    events.sort(key=lambda e: e.onset)
    session = OdorComposition(name=script.name, events=events)
    validated = clear_for_dispatch(
        session, runner.policy, odorant_by_channel(runner.topo, session)
    )
    timeline = compile_timeline(validated, runner.topo, compensate=compensate)
    for t, label in script.markers:
        runner.add_marker(t, label)
    runner.set_scheduled_duration(script.duration)
    runner.enqueue_timeline(timeline)
    runner.advance_until(script.duration)
    runner.finish()
    return runner.log


def encode_log(records: Iterable[dict]) -> str:
    """JSON Lines, stable key order; byte-identical for identical runs."""
    return "".join(
        json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n"
        for record in records
    )
