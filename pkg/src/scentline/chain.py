"""Daisy-chain routing: an ordered line of up to 16 addressed devices.

Forwarding is store-and-forward, so a message reaches chain position i at
i * hop_latency. Devices filter on their MIDI channel address; at most one
device actuates per channel-voice message. Control change 120/123 are
reserved as the emergency all-stop.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

from scentline.device import Command, DeviceConfig, PANIC_STOP
from scentline.midi import MessageKind, MidiMessage
from scentline.score import OdorComposition

log = logging.getLogger(__name__)

MAX_CHAIN_LENGTH = 16
EMERGENCY_STOP_CCS = (120, 123)  # all sound off / all notes off


@dataclass(frozen=True)
class ChainTopology:
    """Ordered (address, config) pairs plus the per-hop forwarding latency."""

    devices: tuple[tuple[int, DeviceConfig], ...]
    hop_latency: float = 0.001  # s; placeholder default, see docs

    def __post_init__(self):
        if len(self.devices) > MAX_CHAIN_LENGTH:
            raise ValueError(
                f"chain supports at most {MAX_CHAIN_LENGTH} devices, "
                f"got {len(self.devices)}"
            )
        addresses = [a for a, _ in self.devices]
        if len(set(addresses)) != len(addresses):
            raise ValueError(f"duplicate device addresses: {sorted(addresses)}")
        for a in addresses:
            if not 0 <= a <= 15:
                raise ValueError(f"device address {a} out of range 0-15")
        if self.hop_latency < 0:
            raise ValueError("hop_latency must be >= 0")

    def position_of(self, address: int) -> int | None:
        for i, (a, _) in enumerate(self.devices):
            if a == address:
                return i
        return None

    def config_of(self, address: int) -> DeviceConfig | None:
        for a, config in self.devices:
            if a == address:
                return config
        return None

    @property
    def addresses(self) -> list[int]:
        return [a for a, _ in self.devices]


class RouteHop(NamedTuple):
    position: int
    address: int
    arrival: float
    actuated: bool


def route(msg: MidiMessage, topo: ChainTopology) -> list[RouteHop]:
    """Walk a message down the chain; exactly the addressed device actuates.

    A message for an absent address forwards through every device and
    raises a telemetry warning in the log rather than an error.
    """
    hops = [
        RouteHop(
            position=i,
            address=address,
            arrival=i * topo.hop_latency,
            actuated=(msg.channel == address),
        )
        for i, (address, _) in enumerate(topo.devices)
    ]
    if hops and not any(h.actuated for h in hops):
        log.warning(
            "message on channel %d matches no device address (chain: %s)",
            msg.channel,
            topo.addresses,
        )
    return hops


class StopDispatch(NamedTuple):
    position: int
    address: int
    arrival: float
    command: Command


def broadcast_all_off(topo: ChainTopology) -> list[StopDispatch]:
    """Emergency stop: every device gets an immediate stop at its hop arrival.

    The panic command bypasses the transport dead-time queue, so targets
    zero as soon as the stop reaches each device.
    """
    dispatches = [
        StopDispatch(
            position=i,
            address=address,
            arrival=i * topo.hop_latency,
            command=PANIC_STOP,
        )
        for i, (address, _) in enumerate(topo.devices)
    ]
    log.warning("broadcast all-off issued to %d device(s)", len(dispatches))
    return dispatches


def is_emergency_stop(msg: MidiMessage) -> bool:
    return msg.kind is MessageKind.CONTROL_CHANGE and msg.data1 in EMERGENCY_STOP_CCS


def odorant_by_channel(
    topo: ChainTopology, comp: OdorComposition
) -> dict[tuple[int, int], str]:
    """Loaded-odorant lookup for every (address, channel) the composition uses."""
    lookup: dict[tuple[int, int], str] = {}
    for event in comp.events:
        config = topo.config_of(event.device_address)
        if config is not None:
            lookup[(event.device_address, event.odor_channel)] = config.loaded_odorant.name
    return lookup
