"""scentline: MIDI-driven odor compositions on simulated olfactory displays.

The toolkit spans the whole desk-scale pipeline: decode MIDI (wire or SMF),
lift it into device-addressed odor events, validate against a safety policy,
compile a latency-compensated command timeline, and execute it against a
simulated daisy chain of scent delivery devices. Breath-signal detection and
questionnaire scoring round out the evaluation side.
"""

__version__ = "0.1.0"

from scentline.midi import (
    MessageKind,
    MidiMessage,
    SmfScore,
    decode_stream,
    encode_message,
    parse_smf,
    ticks_to_seconds,
    write_smf,
)
from scentline.score import (
    OdorComposition,
    OdorEvent,
    OdorantSpec,
    SafetyPolicy,
    ValidatedComposition,
    Violation,
    clear_for_dispatch,
    cue,
    from_midi,
    to_midi,
    validate,
)
from scentline.device import DeviceConfig, DeviceState, actuate, endurance, noise_spl, onset_latency, step
from scentline.chain import ChainTopology, broadcast_all_off, route
from scentline.sequencer import SimClock, Timeline, WallClock, compile_timeline, SessionRunner

__all__ = [
    "MessageKind",
    "MidiMessage",
    "SmfScore",
    "decode_stream",
    "encode_message",
    "parse_smf",
    "ticks_to_seconds",
    "write_smf",
    "OdorComposition",
    "OdorEvent",
    "OdorantSpec",
    "SafetyPolicy",
    "ValidatedComposition",
    "Violation",
    "clear_for_dispatch",
    "cue",
    "from_midi",
    "to_midi",
    "validate",
    "DeviceConfig",
    "DeviceState",
    "actuate",
    "endurance",
    "noise_spl",
    "onset_latency",
    "step",
    "ChainTopology",
    "broadcast_all_off",
    "route",
    "SimClock",
    "Timeline",
    "WallClock",
    "compile_timeline",
    "SessionRunner",
]
