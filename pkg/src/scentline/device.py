"""Single olfactory display unit: pump, transport tube, nose cone, battery.

The plant model is a dead time (tube volume over volumetric flow) followed by
a first-order lag toward the commanded concentration, which is the simplest
model that exhibits the synchronization problem the sequencer compensates
for. Parameters are config with documented defaults, not measurements.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Deque, Iterable, NamedTuple

from scentline.score import CADE, OdorantSpec

EXPOSURE_THRESHOLD = 0.05  # fraction of full scale counted as "odor present"
ONSET_FRACTION = 0.1  # perceived onset: concentration crossing 10% of target
_EPS = 1e-9  # tolerance for release-time comparisons against accumulated time


class DeviceFaultError(RuntimeError):
    """Command rejected because the device is latched in a fault."""


class Status(Enum):
    IDLE = "idle"
    DELIVERING = "delivering"
    PURGING = "purging"
    FAULT = "fault"


@dataclass(frozen=True)
class DeviceConfig:
    """Physical parameters of one unit. All quantities must be positive.

    Defaults describe the reference build: 5 mL of tubing fed at up to
    10 mL/s, one-second rise and two-second fall at the nose, a 2200 mAh
    pack, and a pump that stays under the 20 dB audibility budget at full
    speed. ``residual_floor`` models odor-absorbed contamination as a
    concentration the device cannot decay below once it has delivered.
    """

    pump_max_flow: float = 10.0  # mL/s at full speed
    head_count: int = 2  # dual-head pump, fixed by the hardware
    tube_volume: float = 5.0  # mL
    tau_rise: float = 1.0  # s
    tau_fall: float = 2.0  # s
    battery_capacity: float = 2200.0  # mAh
    idle_current: float = 25.0  # mA
    active_current: float = 180.0  # mA
    noise_coeff: float = 18.0  # dB at 1 m per unit pump speed
    audibility_threshold: float = 20.0  # dB at 1 m
    loaded_odorant: OdorantSpec = CADE
    sim_step: float = 0.01  # s
    residual_floor: float = 0.0  # contamination floor, fraction
    purge: bool = False  # active flush on stop (tau_fall / 4)
    calibration: tuple[tuple[float, float], ...] | None = None  # (speed, conc) points
    snapshot_every: int = 100  # JSONL snapshot decimation, in sim steps

    def __post_init__(self):
        for name in (
            "pump_max_flow",
            "tube_volume",
            "tau_rise",
            "tau_fall",
            "battery_capacity",
            "idle_current",
            "active_current",
            "noise_coeff",
            "audibility_threshold",
            "sim_step",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.head_count != 2:
            raise ValueError("head_count is fixed at 2 (dual-head pump)")
        if not 0.0 <= self.residual_floor < 1.0:
            raise ValueError("residual_floor must be in [0, 1)")
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be >= 1")
        if self.calibration is not None:
            if len(self.calibration) < 2:
                raise ValueError("calibration needs at least two points")
            speeds = [s for s, _ in self.calibration]
            concs = [c for _, c in self.calibration]
            if speeds != sorted(speeds) or concs != sorted(concs):
                raise ValueError("calibration points must be monotone increasing")
            if any(not 0 <= s <= 1 for s in speeds) or any(
                not 0 <= c <= 1 for c in concs
            ):
                raise ValueError("calibration points must lie in [0, 1]")


def check_config(config: DeviceConfig) -> list[str]:
    """Self-check a config; returns human-readable warnings."""
    warnings = []
    if noise_spl(config, 1.0) > config.audibility_threshold:
        warnings.append(
            f"pump at full speed emits {noise_spl(config, 1.0):.1f} dB, over the "
            f"{config.audibility_threshold:.1f} dB audibility threshold at 1 m"
        )
    return warnings


def speed_for_concentration(config: DeviceConfig, concentration: float) -> float:
    """Invert the calibration map; identity when no map is loaded."""
    if not 0.0 <= concentration <= 1.0:
        raise ValueError(f"concentration {concentration} outside [0, 1]")
    if config.calibration is None:
        return concentration
    points = config.calibration
    if concentration <= points[0][1]:
        return points[0][0]
    for (s0, c0), (s1, c1) in zip(points, points[1:]):
        if concentration <= c1:
            if c1 == c0:
                return s1
            frac = (concentration - c0) / (c1 - c0)
            return s0 + frac * (s1 - s0)
    return points[-1][0]


class QueuedTarget(NamedTuple):
    release_t: float
    target: float


@dataclass
class DeviceState:
    """Mutable state of one unit, advanced by a single owner."""

    config: DeviceConfig
    t: float = 0.0
    pump_speed: float = 0.0
    target_concentration: float = 0.0  # last released target the plant tracks
    nose_concentration: float = 0.0
    dead_time_queue: Deque[QueuedTarget] = field(default_factory=deque)
    battery_charge: float = 0.0
    cumulative_exposure: float = 0.0
    status: Status = Status.IDLE
    fault_reason: str | None = None

    def __post_init__(self):
        if self.battery_charge == 0.0 and self.status is not Status.FAULT:
            self.battery_charge = self.config.battery_capacity

    def next_release(self) -> float | None:
        """Earliest pending transport release, for event-aligned stepping."""
        if not self.dead_time_queue:
            return None
        return min(entry.release_t for entry in self.dead_time_queue)


def new_state(config: DeviceConfig) -> DeviceState:
    return DeviceState(config=config)


@dataclass(frozen=True)
class Command:
    """Set a delivery target (``target`` > 0) or stop (``target`` == 0).

    ``immediate`` is the panic path used by broadcast-all-off: it flushes
    the transport queue and applies the target without dead-time delay.
    """

    target: float
    immediate: bool = False

    def __post_init__(self):
        if not 0.0 <= self.target <= 1.0:
            raise ValueError(f"target {self.target} outside [0, 1]")


STOP = Command(target=0.0)
PANIC_STOP = Command(target=0.0, immediate=True)


def actuate(state: DeviceState, command: Command) -> DeviceState:
    """Apply a command: spin the pump and enqueue the target behind the tube.

    The dead time is tube volume over current volumetric flow; a stop rides
    out at whatever speed the pump was running (the tail still has to
    clear the tube). Faulted devices reject all commands.
    """
    if state.status is Status.FAULT:
        raise DeviceFaultError(state.fault_reason or "device is faulted")
    config = state.config
    if command.target > 0:
        transport_speed = speed_for_concentration(config, command.target)
        state.pump_speed = transport_speed
    else:
        transport_speed = state.pump_speed
        state.pump_speed = 0.0
    if command.immediate:
        state.dead_time_queue.clear()
        state.target_concentration = command.target
    else:
        if transport_speed > 0:
            dead_time = config.tube_volume / (transport_speed * config.pump_max_flow)
        else:
            dead_time = 0.0
        state.dead_time_queue.append(QueuedTarget(state.t + dead_time, command.target))
    _update_status(state)
    return state


def step(state: DeviceState, dt: float) -> DeviceState:
    """Advance the plant by dt seconds.

    Due targets leave the transport queue, the nose concentration relaxes
    toward the current target (rise or fall time constant as appropriate,
    quartered on falls when purge mode is on), the battery drains at the
    idle or active rate, and exposure accumulates while concentration is
    above the 0.05 presence threshold. An exhausted battery latches the
    fault status until ``reset_fault``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    config = state.config
    if state.dead_time_queue and any(
        entry.release_t <= state.t + _EPS for entry in state.dead_time_queue
    ):
        # Releases can be out of queue order when consecutive commands run the
        # pump at different speeds; apply all due targets in command order.
        remaining: Deque[QueuedTarget] = deque()
        for entry in state.dead_time_queue:
            if entry.release_t <= state.t + _EPS:
                state.target_concentration = entry.target
            else:
                remaining.append(entry)
        state.dead_time_queue = remaining

    target = state.target_concentration
    if state.cumulative_exposure > 0:
        target = max(target, config.residual_floor)
    c = state.nose_concentration
    if target > c:
        tau = config.tau_rise
    elif config.purge and state.target_concentration == 0.0:
        tau = config.tau_fall / 4.0
    else:
        tau = config.tau_fall
    alpha = min(dt / tau, 1.0)  # saturate so coarse steps cannot overshoot
    c += alpha * (target - c)
    state.nose_concentration = min(max(c, 0.0), 1.0)

    if state.status is not Status.FAULT:
        current = config.active_current if state.pump_speed > 0 else config.idle_current
        state.battery_charge -= current * dt / 3600.0
        if state.battery_charge <= 0.0:
            state.battery_charge = 0.0
            state.status = Status.FAULT
            state.fault_reason = "battery exhausted"
            state.pump_speed = 0.0
            state.target_concentration = 0.0
            state.dead_time_queue.clear()

    state.t += dt
    if state.nose_concentration > EXPOSURE_THRESHOLD:
        state.cumulative_exposure += dt
    if state.status is not Status.FAULT:
        _update_status(state)
    return state


def _update_status(state: DeviceState) -> None:
    if state.status is Status.FAULT:
        return
    if state.target_concentration > 0 or any(
        entry.target > 0 for entry in state.dead_time_queue
    ):
        state.status = Status.DELIVERING
    elif state.nose_concentration > EXPOSURE_THRESHOLD:
        state.status = Status.PURGING
    else:
        state.status = Status.IDLE


def reset_fault(state: DeviceState) -> DeviceState:
    """Clear a latched fault; battery charge is whatever remains."""
    if state.status is Status.FAULT:
        state.status = Status.IDLE
        state.fault_reason = None
        _update_status(state)
    return state


def modeled_latency(config: DeviceConfig, concentration: float) -> float:
    """Dead time plus first-order lag to the 10%-of-target crossing.

    Used by the sequencer for any deliverable concentration; callers who
    want the guarded public contract should use ``onset_latency``.
    """
    speed = speed_for_concentration(config, concentration)
    if speed <= 0:
        raise ValueError("calibrated pump speed is zero; cannot deliver")
    dead_time = config.tube_volume / (speed * config.pump_max_flow)
    return dead_time + config.tau_rise * math.log(1.0 / (1.0 - ONSET_FRACTION))


def onset_latency(config: DeviceConfig, concentration: float) -> float:
    """Modeled delay from command to perceived onset (10% of target).

    Dead time through the tube at the calibrated pump speed, plus the lag
    term tau_rise * ln(1 / (1 - 0.1)) = tau_rise * ln(10/9).
    """
    if concentration <= ONSET_FRACTION:
        raise ValueError(f"concentration must exceed {ONSET_FRACTION}")
    return modeled_latency(config, concentration)


def noise_spl(config: DeviceConfig, pump_speed: float) -> float:
    """Acoustic emission at 1 m for a given pump speed (linear model)."""
    if not 0.0 <= pump_speed <= 1.0:
        raise ValueError(f"pump_speed {pump_speed} outside [0, 1]")
    return config.noise_coeff * pump_speed


def endurance(
    config: DeviceConfig, session: Iterable[tuple[float, float]]
) -> tuple[bool, float]:
    """Integrate a (active seconds, idle seconds) profile against the battery.

    Returns (survives, charge remaining in mAh); survives means the charge
    never reached zero.
    """
    charge = config.battery_capacity
    for active_s, idle_s in session:
        if active_s < 0 or idle_s < 0:
            raise ValueError("session durations must be >= 0")
        charge -= active_s * config.active_current / 3600.0
        charge -= idle_s * config.idle_current / 3600.0
        if charge <= 0.0:
            return False, 0.0
    return True, charge


def exhibition_day_profile(
    hours: float = 8.0, deliveries: int = 50, delivery_s: float = 15.0
) -> list[tuple[float, float]]:
    """One demonstration day: idle-dominated with short deliveries."""
    total_idle = hours * 3600.0 - deliveries * delivery_s
    if total_idle < 0:
        raise ValueError("deliveries do not fit in the stated hours")
    gap = total_idle / deliveries if deliveries else total_idle
    if deliveries == 0:
        return [(0.0, total_idle)] if total_idle > 0 else []
    return [(delivery_s, gap)] * deliveries


def with_purge(config: DeviceConfig, purge: bool = True) -> DeviceConfig:
    return replace(config, purge=purge)
