"""MIDI 1.0 channel-voice codec and Standard MIDI File reader/writer.

Covers the subset an odor sequencer actually rides on: 3-byte (or 2-byte)
channel-voice messages with running status, and SMF formats 0/1 with
tick-accurate tempo handling. System-common/realtime and sysex traffic is
skipped with counters rather than rejected, so the decoder survives being
pointed at a real controller's output.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum

DEFAULT_TEMPO = 500_000  # microseconds per quarter note (120 bpm)

_STATUS_NIBBLES = {
    0x80: "note_off",
    0x90: "note_on",
    0xB0: "control_change",
}

# Number of data bytes per channel-voice status nibble.
_DATA_LEN = {0x80: 2, 0x90: 2, 0xA0: 2, 0xB0: 2, 0xC0: 1, 0xD0: 1, 0xE0: 2}


class MidiRangeError(ValueError):
    """A message field is outside its wire-format range."""


class MalformedStreamError(ValueError):
    """Byte stream cannot be parsed as channel-voice MIDI."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class SmfParseError(ValueError):
    """Standard MIDI File is structurally invalid."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class MessageKind(Enum):
    NOTE_ON = "note_on"
    NOTE_OFF = "note_off"
    CONTROL_CHANGE = "control_change"
    OTHER = "other"


@dataclass(frozen=True)
class MidiMessage:
    """One channel-voice message.

    ``kind=OTHER`` is a passthrough for the channel-voice statuses we do not
    interpret (poly pressure, program change, channel pressure, pitch bend);
    ``raw_status`` then holds the original status byte. Program change and
    channel pressure carry a single data byte on the wire, so ``data2`` must
    be 0 for those.

    NoteOn with velocity 0 is *not* folded to NoteOff here; that is a
    semantic decision made by the odor-score layer.
    """

    kind: MessageKind
    channel: int
    data1: int
    data2: int = 0
    raw_status: int | None = None

    def __post_init__(self):
        if not 0 <= self.channel <= 15:
            raise MidiRangeError(f"channel {self.channel} out of range 0-15")
        if not 0 <= self.data1 <= 127:
            raise MidiRangeError(f"data1 {self.data1} out of range 0-127")
        if not 0 <= self.data2 <= 127:
            raise MidiRangeError(f"data2 {self.data2} out of range 0-127")
        if self.kind is MessageKind.OTHER:
            if self.raw_status is None:
                raise MidiRangeError("raw_status required for OTHER messages")
            if not 0x80 <= self.raw_status <= 0xEF:
                raise MidiRangeError(
                    f"raw_status 0x{self.raw_status:02X} is not channel-voice"
                )
            if self.raw_status & 0xF0 in _STATUS_NIBBLES:
                raise MidiRangeError(
                    f"raw_status 0x{self.raw_status:02X} shadows a named kind"
                )
            if self.raw_status & 0x0F != self.channel:
                raise MidiRangeError(
                    f"raw_status channel nibble {self.raw_status & 0x0F} "
                    f"!= channel {self.channel}"
                )
            if _DATA_LEN[self.raw_status & 0xF0] == 1 and self.data2 != 0:
                raise MidiRangeError(
                    f"status 0x{self.raw_status & 0xF0:02X} carries one data "
                    "byte; data2 must be 0"
                )
        elif self.raw_status is not None:
            raise MidiRangeError("raw_status only valid for OTHER messages")

    @property
    def status(self) -> int:
        """Wire status byte (kind nibble | channel)."""
        if self.kind is MessageKind.OTHER:
            return self.raw_status  # type: ignore[return-value]
        nibble = {
            MessageKind.NOTE_ON: 0x90,
            MessageKind.NOTE_OFF: 0x80,
            MessageKind.CONTROL_CHANGE: 0xB0,
        }[self.kind]
        return nibble | self.channel


def note_on(channel: int, note: int, velocity: int) -> MidiMessage:
    return MidiMessage(MessageKind.NOTE_ON, channel, note, velocity)


def note_off(channel: int, note: int, velocity: int = 0) -> MidiMessage:
    return MidiMessage(MessageKind.NOTE_OFF, channel, note, velocity)


def control_change(channel: int, controller: int, value: int) -> MidiMessage:
    return MidiMessage(MessageKind.CONTROL_CHANGE, channel, controller, value)


def encode_message(msg: MidiMessage) -> bytes:
    """Encode one message to its wire bytes (status + 1 or 2 data bytes)."""
    status = msg.status
    if _DATA_LEN[status & 0xF0] == 1:
        return bytes([status, msg.data1])
    return bytes([status, msg.data1, msg.data2])


def _message_from_status(status: int, data1: int, data2: int) -> MidiMessage:
    name = _STATUS_NIBBLES.get(status & 0xF0)
    if name is not None:
        return MidiMessage(MessageKind(name), status & 0x0F, data1, data2)
    return MidiMessage(MessageKind.OTHER, status & 0x0F, data1, data2, raw_status=status)


class StreamDecoder:
    """Incremental channel-voice decoder with running-status support.

    Feed byte chunks in any split; completed messages come back from
    ``feed``. Running status, sysex swallowing, and realtime skipping
    persist across feeds. Skip counters are exposed for telemetry.
    """

    def __init__(self):
        self._status: int | None = None
        self._pending: list[int] = []
        self._in_sysex = False
        self._offset = 0  # absolute offset across feeds, for error messages
        self.open_message = False  # status seen or data pending, not yet complete
        self.skipped_realtime = 0
        self.skipped_system = 0

    def feed(self, data: bytes) -> list[MidiMessage]:
        out: list[MidiMessage] = []
        for byte in data:
            self._consume(byte, out)
            self._offset += 1
        return out

    def _consume(self, byte: int, out: list[MidiMessage]) -> None:
        if 0xF8 <= byte <= 0xFF:
            # Realtime: transparent, may interleave anywhere.
            self.skipped_realtime += 1
            return
        if byte == 0xF0:
            self._in_sysex = True
            self._status = None
            self._pending.clear()
            self.open_message = False
            self.skipped_system += 1
            return
        if 0xF1 <= byte <= 0xF7:
            # System common terminates sysex and cancels running status.
            self._in_sysex = False
            self._status = None
            self._pending.clear()
            self.open_message = False
            self.skipped_system += 1
            return
        if byte >= 0x80:
            # New channel-voice status implicitly ends any open sysex.
            self._in_sysex = False
            self._status = byte
            self._pending.clear()
            self.open_message = True
            return
        # Data byte.
        if self._in_sysex:
            self.skipped_system += 1
            return
        if self._status is None:
            raise MalformedStreamError("data byte with no prior status", self._offset)
        self._pending.append(byte)
        self.open_message = True
        need = _DATA_LEN[self._status & 0xF0]
        if len(self._pending) == need:
            d1 = self._pending[0]
            d2 = self._pending[1] if need == 2 else 0
            out.append(_message_from_status(self._status, d1, d2))
            self._pending.clear()  # status kept: running status
            self.open_message = False


def decode_stream(data: bytes) -> tuple[list[MidiMessage], bytes]:
    """Greedy one-shot decode.

    Returns the complete messages plus the unconsumed input suffix (a
    trailing partial message, including any system/realtime bytes
    interleaved after it started). A partial that relies on running status
    comes back without its status byte; use ``StreamDecoder`` when resuming
    such streams incrementally.
    """
    decoder = StreamDecoder()
    messages: list[MidiMessage] = []
    consumed = 0
    for i, byte in enumerate(data):
        decoder._consume(byte, messages)
        decoder._offset += 1
        if not decoder.open_message:
            consumed = i + 1
    return messages, bytes(data[consumed:])


# --- Standard MIDI File ----------------------------------------------------


@dataclass
class ParseReport:
    """What the SMF parser kept and what it dropped."""

    smf_format: int = 0
    n_tracks: int = 0
    n_events: int = 0
    dropped_meta: int = 0
    dropped_sysex: int = 0
    skipped_realtime: int = 0
    skipped_chunks: int = 0

    def summary(self) -> str:
        return (
            f"SMF format {self.smf_format}, {self.n_tracks} track(s), "
            f"{self.n_events} channel-voice event(s); dropped "
            f"{self.dropped_meta} meta, {self.dropped_sysex} sysex, "
            f"{self.skipped_realtime} realtime byte(s), "
            f"{self.skipped_chunks} alien chunk(s)"
        )


@dataclass
class SmfScore:
    """Tick-domain score: tempo map plus channel-voice events.

    ``tempo_map`` entries are (absolute_tick, microseconds_per_quarter) and
    always start at tick 0. ``events`` are (absolute_tick, message), sorted
    by tick with ties in file order.
    """

    ticks_per_quarter: int
    tempo_map: list[tuple[int, int]] = field(default_factory=list)
    events: list[tuple[int, MidiMessage]] = field(default_factory=list)
    report: ParseReport | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.ticks_per_quarter <= 0:
            raise ValueError("ticks_per_quarter must be positive")
        if not self.tempo_map:
            self.tempo_map = [(0, DEFAULT_TEMPO)]
        if self.tempo_map[0][0] != 0:
            self.tempo_map = [(0, DEFAULT_TEMPO)] + list(self.tempo_map)
        ticks = [t for t, _ in self.events]
        if any(t < 0 for t in ticks):
            raise ValueError("event ticks must be >= 0")
        if ticks != sorted(ticks):
            raise ValueError("events must be sorted by absolute tick")

    @property
    def end_tick(self) -> int:
        return self.events[-1][0] if self.events else 0


def read_vlq(data: bytes, offset: int) -> tuple[int, int]:
    """Read a variable-length quantity; returns (value, new offset)."""
    value = 0
    for i in range(4):
        if offset + i >= len(data):
            raise SmfParseError("truncated variable-length quantity", offset)
        byte = data[offset + i]
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, offset + i + 1
    raise SmfParseError("variable-length quantity longer than 4 bytes", offset)


def write_vlq(value: int) -> bytes:
    if not 0 <= value <= 0x0FFFFFFF:
        raise ValueError(f"VLQ value {value} out of range")
    chunks = [value & 0x7F]
    value >>= 7
    while value:
        chunks.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(chunks))


def _parse_track(
    data: bytes, start: int, end: int, report: ParseReport
) -> tuple[list[tuple[int, MidiMessage]], list[tuple[int, int]]]:
    events: list[tuple[int, MidiMessage]] = []
    tempos: list[tuple[int, int]] = []
    tick = 0
    running: int | None = None
    pos = start
    while pos < end:
        delta, pos = read_vlq(data, pos)
        tick += delta
        if pos >= end:
            raise SmfParseError("track ends after delta time", pos)
        byte = data[pos]
        if byte == 0xFF:  # meta
            running = None
            if pos + 1 >= end:
                raise SmfParseError("truncated meta event", pos)
            meta_type = data[pos + 1]
            length, pos = read_vlq(data, pos + 2)
            if pos + length > end:
                raise SmfParseError("meta event overruns track", pos)
            payload = data[pos : pos + length]
            pos += length
            if meta_type == 0x51:
                if length != 3:
                    raise SmfParseError("tempo meta must be 3 bytes", pos - length)
                tempos.append((tick, int.from_bytes(payload, "big")))
            elif meta_type == 0x2F:
                break
            else:
                report.dropped_meta += 1
        elif byte in (0xF0, 0xF7):  # sysex, length-prefixed in SMF
            running = None
            length, pos = read_vlq(data, pos + 1)
            if pos + length > end:
                raise SmfParseError("sysex event overruns track", pos)
            pos += length
            report.dropped_sysex += 1
        elif 0xF8 <= byte <= 0xFE:
            # Not legal in SMF, but tolerated the same way as on the wire.
            report.skipped_realtime += 1
            pos += 1
        else:
            if byte >= 0x80:
                running = byte
                pos += 1
            elif running is None:
                raise SmfParseError("data byte with no running status", pos)
            status = running
            need = _DATA_LEN[status & 0xF0]
            if pos + need > end:
                raise SmfParseError("truncated channel-voice event", pos)
            d1 = data[pos]
            d2 = data[pos + 1] if need == 2 else 0
            pos += need
            events.append((tick, _message_from_status(status, d1, d2)))
    return events, tempos


def parse_smf(data: bytes) -> SmfScore:
    """Parse an SMF (format 0 or 1) into a tick-domain score.

    Format-1 tracks are merged by absolute tick, ties stable in file order.
    Meta events other than tempo, and all sysex, are dropped with counters
    in ``score.report``. Raises ``SmfParseError`` on structural problems.
    """
    if len(data) < 14 or data[:4] != b"MThd":
        raise SmfParseError("bad header magic, expected MThd", 0)
    header_len = struct.unpack(">I", data[4:8])[0]
    if header_len < 6 or 8 + header_len > len(data):
        raise SmfParseError("bad header length", 4)
    smf_format, ntrks, division = struct.unpack(">HHH", data[8:14])
    if smf_format not in (0, 1):
        raise SmfParseError(f"unsupported SMF format {smf_format}", 8)
    if division & 0x8000:
        raise SmfParseError("SMPTE time division is not supported", 12)
    if division == 0:
        raise SmfParseError("ticks per quarter must be positive", 12)

    report = ParseReport(smf_format=smf_format, n_tracks=ntrks)
    pos = 8 + header_len
    track_events: list[list[tuple[int, MidiMessage]]] = []
    tempos: list[tuple[int, int]] = []
    while pos < len(data) and len(track_events) < ntrks:
        if pos + 8 > len(data):
            raise SmfParseError("truncated chunk header", pos)
        chunk_type = data[pos : pos + 4]
        chunk_len = struct.unpack(">I", data[pos + 4 : pos + 8])[0]
        body_start = pos + 8
        if body_start + chunk_len > len(data):
            raise SmfParseError("chunk overruns file", pos)
        if chunk_type == b"MTrk":
            events, track_tempos = _parse_track(
                data, body_start, body_start + chunk_len, report
            )
            track_events.append(events)
            tempos.extend(track_tempos)
        else:
            report.skipped_chunks += 1
        pos = body_start + chunk_len
    if len(track_events) != ntrks:
        raise SmfParseError(
            f"header promised {ntrks} tracks, found {len(track_events)}", pos
        )

    merged: list[tuple[int, MidiMessage]] = []
    for events in track_events:
        merged.extend(events)
    merged.sort(key=lambda pair: pair[0])  # stable: file order preserved on ties

    tempo_map: dict[int, int] = {0: DEFAULT_TEMPO}
    for tick, tempo in sorted(tempos, key=lambda pair: pair[0]):
        tempo_map[tick] = tempo  # same-tick duplicates: last one wins
    report.n_events = len(merged)
    return SmfScore(
        ticks_per_quarter=division,
        tempo_map=sorted(tempo_map.items()),
        events=merged,
        report=report,
    )


def write_smf(score: SmfScore) -> bytes:
    """Serialize a score as a format-0 SMF; inverse of ``parse_smf``."""
    records: list[tuple[int, int, bytes]] = []  # (tick, order, event bytes)
    for tick, tempo in score.tempo_map:
        records.append((tick, 0, bytes([0xFF, 0x51, 0x03]) + tempo.to_bytes(3, "big")))
    for i, (tick, msg) in enumerate(score.events):
        records.append((tick, 1 + i, encode_message(msg)))
    records.sort(key=lambda r: (r[0], r[1]))

    body = bytearray()
    previous_tick = 0
    for tick, _, payload in records:
        body += write_vlq(tick - previous_tick)
        body += payload
        previous_tick = tick
    body += write_vlq(0) + bytes([0xFF, 0x2F, 0x00])

    header = b"MThd" + struct.pack(">IHHH", 6, 0, 1, score.ticks_per_quarter)
    return header + b"MTrk" + struct.pack(">I", len(body)) + bytes(body)


def ticks_to_seconds(tick: int, score: SmfScore) -> float:
    """Convert an absolute tick to seconds across the score's tempo map."""
    if tick < 0:
        raise ValueError("tick must be >= 0")
    seconds = 0.0
    tpq = score.ticks_per_quarter
    for i, (seg_tick, tempo) in enumerate(score.tempo_map):
        if tick <= seg_tick:
            break
        next_tick = (
            score.tempo_map[i + 1][0] if i + 1 < len(score.tempo_map) else tick
        )
        span = min(tick, next_tick) - seg_tick
        if span > 0:
            seconds += span * tempo / (tpq * 1_000_000.0)
    return seconds
