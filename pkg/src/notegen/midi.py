"""Standard MIDI File reading/writing and conversion to musical note events.

Time inside a track is kept as delta ticks, exactly as stored in the file.
Musical time (onsets, durations) is expressed in quarter-lengths using
:class:`fractions.Fraction`, so tick arithmetic never loses precision.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction

from .errors import BadHeader, BadVlq, InvalidEvent, TruncatedFile, UnknownStatus

log = logging.getLogger(__name__)

#: onsets and durations snap to sixteenth notes
GRID = Fraction(1, 4)
#: onsets closer than this are one chord
CHORD_EPS = Fraction(1, 16)
DEFAULT_TEMPO = 500_000
DEFAULT_PPQ = 480
MAX_VLQ = 0x0FFFFFFF

NOTE_OFF = "note_off"
NOTE_ON = "note_on"
CHANNEL = "channel"
TEMPO = "tempo"
END_OF_TRACK = "end_of_track"
META = "meta"
SYSEX = "sysex"

_CHANNEL_DATA_LEN = {0x8: 2, 0x9: 2, 0xA: 2, 0xB: 2, 0xC: 1, 0xD: 1, 0xE: 2}


@dataclass(frozen=True)
class TrackEvent:
    """One event of an ``MTrk`` chunk.

    ``code`` disambiguates events sharing a ``kind``: the meta type byte for
    meta kinds (``tempo``, ``end_of_track``, ``meta``), the status high
    nibble for ``channel`` events, and ``0xF0``/``0xF7`` for sysex.
    ``data`` holds the channel data bytes or the meta/sysex payload.
    """

    delta_ticks: int
    kind: str
    channel: int = 0
    data: bytes = b""
    code: int = 0

    @property
    def pitch(self) -> int:
        return self.data[0]

    @property
    def velocity(self) -> int:
        return self.data[1]


@dataclass
class MidiFile:
    format: int = 0
    ppq: int = DEFAULT_PPQ
    tracks: list[list[TrackEvent]] = field(default_factory=list)


@dataclass(frozen=True)
class NoteEvent:
    """A chord, single note (one pitch) or rest (no pitches)."""

    pitches: tuple[int, ...]
    onset: Fraction
    duration: Fraction
    velocity: int = 0

    @property
    def is_rest(self) -> bool:
        return not self.pitches


class NoteSequence(list):
    """List of :class:`NoteEvent` with extraction metadata attached."""

    dangling_note_ons: int = 0


def note_on(delta: int, pitch: int, velocity: int, channel: int = 0) -> TrackEvent:
    return TrackEvent(delta, NOTE_ON, channel, bytes((pitch, velocity)), 0x9)


def note_off(delta: int, pitch: int, velocity: int = 0, channel: int = 0) -> TrackEvent:
    return TrackEvent(delta, NOTE_OFF, channel, bytes((pitch, velocity)), 0x8)


def tempo_event(delta: int, us_per_quarter: int) -> TrackEvent:
    return TrackEvent(delta, TEMPO, 0, us_per_quarter.to_bytes(3, "big"), 0x51)


def end_of_track(delta: int = 0) -> TrackEvent:
    return TrackEvent(delta, END_OF_TRACK, 0, b"", 0x2F)


# ---------------------------------------------------------------------------
# variable-length quantities


def encode_vlq(value: int) -> bytes:
    if value < 0 or value > MAX_VLQ:
        raise InvalidEvent(f"VLQ value out of range: {value}")
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(out))


def decode_vlq(buf: bytes, pos: int) -> tuple[int, int]:
    """Return ``(value, new_pos)``; at most four bytes are consumed."""
    value = 0
    for i in range(4):
        if pos + i >= len(buf):
            raise TruncatedFile("VLQ runs past end of chunk")
        byte = buf[pos + i]
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, pos + i + 1
    raise BadVlq(f"VLQ longer than 4 bytes at offset {pos}")


# ---------------------------------------------------------------------------
# parsing


def parse_smf(data: bytes) -> MidiFile:
    if len(data) < 8 or data[:4] != b"MThd":
        raise BadHeader("missing MThd chunk")
    (hlen,) = struct.unpack(">I", data[4:8])
    if hlen != 6:
        raise BadHeader(f"header length {hlen} != 6")
    if len(data) < 14:
        raise TruncatedFile("header chunk truncated")
    fmt, ntrks, division = struct.unpack(">HHH", data[8:14])
    if fmt > 2:
        raise BadHeader(f"unsupported format {fmt}")
    if division & 0x8000:
        raise BadHeader("SMPTE time division is not supported")
    if division == 0:
        raise BadHeader("ppq must be positive")

    tracks = []
    pos = 14
    while len(tracks) < ntrks:
        if pos + 8 > len(data):
            raise TruncatedFile(f"expected {ntrks} tracks, found {len(tracks)}")
        tag = data[pos:pos + 4]
        (clen,) = struct.unpack(">I", data[pos + 4:pos + 8])
        pos += 8
        if clen > len(data) - pos:
            raise TruncatedFile(f"chunk {tag!r} claims {clen} bytes, {len(data) - pos} left")
        body = data[pos:pos + clen]
        pos += clen
        if tag == b"MTrk":
            tracks.append(_parse_track(body))
        # alien chunks are skipped
    return MidiFile(fmt, division, tracks)


def _parse_track(buf: bytes) -> list[TrackEvent]:
    events: list[TrackEvent] = []
    pos = 0
    running = None
    while pos < len(buf):
        delta, pos = decode_vlq(buf, pos)
        if pos >= len(buf):
            raise TruncatedFile("event missing after delta time")
        status = buf[pos]
        if status & 0x80:
            pos += 1
        elif running is None:
            raise UnknownStatus(f"data byte 0x{status:02x} with no running status")
        else:
            status = running

        if status == 0xFF:
            if pos >= len(buf):
                raise TruncatedFile("meta event truncated")
            mtype = buf[pos]
            length, pos = decode_vlq(buf, pos + 1)
            payload = _take(buf, pos, length)
            pos += length
            if mtype == 0x2F:
                events.append(TrackEvent(delta, END_OF_TRACK, 0, payload, mtype))
                break
            kind = TEMPO if mtype == 0x51 and length == 3 else META
            events.append(TrackEvent(delta, kind, 0, payload, mtype))
        elif status in (0xF0, 0xF7):
            length, pos = decode_vlq(buf, pos)
            payload = _take(buf, pos, length)
            pos += length
            events.append(TrackEvent(delta, SYSEX, 0, payload, status))
        elif status >= 0xF0:
            raise UnknownStatus(f"system message 0x{status:02x} is not valid in a file")
        else:
            running = status
            hi, ch = status >> 4, status & 0x0F
            n = _CHANNEL_DATA_LEN[hi]
            payload = _take(buf, pos, n)
            pos += n
            if any(b & 0x80 for b in payload):
                raise UnknownStatus(f"status byte inside channel data at offset {pos - n}")
            kind = {0x8: NOTE_OFF, 0x9: NOTE_ON}.get(hi, CHANNEL)
            events.append(TrackEvent(delta, kind, ch, payload, hi))
    if not events or events[-1].kind != END_OF_TRACK:
        log.debug("track without end-of-track; appending one")
        events.append(end_of_track(0))
    return events


def _take(buf: bytes, pos: int, n: int) -> bytes:
    if pos + n > len(buf):
        raise TruncatedFile(f"event needs {n} bytes at offset {pos}")
    return bytes(buf[pos:pos + n])


# ---------------------------------------------------------------------------
# writing


def validate_event(ev: TrackEvent) -> None:
    if ev.delta_ticks < 0 or ev.delta_ticks > MAX_VLQ:
        raise InvalidEvent(f"delta ticks out of range: {ev.delta_ticks}")
    if ev.kind in (NOTE_ON, NOTE_OFF, CHANNEL):
        if not 0 <= ev.channel <= 15:
            raise InvalidEvent(f"channel out of range: {ev.channel}")
        hi = {NOTE_ON: 0x9, NOTE_OFF: 0x8}.get(ev.kind, ev.code)
        if hi not in _CHANNEL_DATA_LEN or (ev.kind == CHANNEL and hi in (0x8, 0x9)):
            raise InvalidEvent(f"bad channel event code {hi:#x} for kind {ev.kind}")
        if len(ev.data) != _CHANNEL_DATA_LEN[hi]:
            raise InvalidEvent(f"{ev.kind} needs {_CHANNEL_DATA_LEN[hi]} data bytes")
        if any(b > 127 for b in ev.data):
            raise InvalidEvent(f"data byte out of range in {ev}")
    elif ev.kind in (TEMPO, END_OF_TRACK, META):
        if not 0 <= ev.code <= 0x7F:
            raise InvalidEvent(f"bad meta type {ev.code}")
        if ev.kind == TEMPO and (ev.code != 0x51 or len(ev.data) != 3):
            raise InvalidEvent("tempo event must be meta 0x51 with 3 bytes")
        if ev.kind == END_OF_TRACK and ev.code != 0x2F:
            raise InvalidEvent("end-of-track must be meta 0x2F")
        if ev.kind == META and (ev.code == 0x2F or (ev.code == 0x51 and len(ev.data) == 3)):
            raise InvalidEvent("use the dedicated kind for tempo/end-of-track")
    elif ev.kind == SYSEX:
        if ev.code not in (0xF0, 0xF7):
            raise InvalidEvent(f"bad sysex status {ev.code:#x}")
    else:
        raise InvalidEvent(f"unknown event kind {ev.kind!r}")


def write_smf(f: MidiFile) -> bytes:
    """Serialize without running status and with minimal VLQs."""
    if f.format not in (0, 1, 2):
        raise InvalidEvent(f"bad format {f.format}")
    if not 0 < f.ppq < 0x8000:
        raise InvalidEvent(f"ppq out of range: {f.ppq}")
    out = bytearray(b"MThd" + struct.pack(">IHHH", 6, f.format, len(f.tracks), f.ppq))
    for track in f.tracks:
        if not track or track[-1].kind != END_OF_TRACK:
            raise InvalidEvent("every track must end with end-of-track")
        body = bytearray()
        for i, ev in enumerate(track):
            validate_event(ev)
            if ev.kind == END_OF_TRACK and i != len(track) - 1:
                raise InvalidEvent("end-of-track before the end of the track")
            body += encode_vlq(ev.delta_ticks)
            if ev.kind in (NOTE_ON, NOTE_OFF, CHANNEL):
                hi = {NOTE_ON: 0x9, NOTE_OFF: 0x8}.get(ev.kind, ev.code)
                body.append((hi << 4) | ev.channel)
                body += ev.data
            elif ev.kind == SYSEX:
                body.append(ev.code)
                body += encode_vlq(len(ev.data)) + ev.data
            else:
                body += bytes((0xFF, ev.code)) + encode_vlq(len(ev.data)) + ev.data
        out += b"MTrk" + struct.pack(">I", len(body)) + body
    return bytes(out)


def read_midi(path) -> MidiFile:
    with open(path, "rb") as fh:
        return parse_smf(fh.read())


def write_midi(f: MidiFile, path) -> None:
    data = write_smf(f)
    with open(path, "wb") as fh:
        fh.write(data)


# ---------------------------------------------------------------------------
# musical view


def snap(q: Fraction) -> Fraction:
    """Round to the nearest grid multiple, halves rounding up."""
    return math.floor(q / GRID + Fraction(1, 2)) * GRID


def track_length(track: list[TrackEvent]) -> int:
    return sum(ev.delta_ticks for ev in track)


def events_to_notes(f: MidiFile) -> NoteSequence:
    """Flatten every track into one grid-quantized stream of chords and rests.

    Notes whose onsets lie within ``CHORD_EPS`` of a chord's first note join
    that chord; the chord lasts as long as its longest member. Gaps of at
    least one grid step between the end of the sounding material and the next
    onset (or the end of the file) become rests. Note-ons never switched off
    are closed at the end of their track and counted in ``dangling_note_ons``.
    """
    raw = []  # (start_tick, end_tick, pitch, velocity)
    dangling = 0
    end_tick = 0
    for track in f.tracks:
        tick = 0
        pending: dict[tuple[int, int], list[tuple[int, int]]] = {}
        for ev in track:
            tick += ev.delta_ticks
            if ev.kind == NOTE_ON and ev.velocity > 0:
                pending.setdefault((ev.channel, ev.pitch), []).append((tick, ev.velocity))
            elif ev.kind in (NOTE_ON, NOTE_OFF):
                starts = pending.get((ev.channel, ev.pitch))
                if starts:
                    start, vel = starts.pop(0)
                    raw.append((start, tick, ev.pitch, vel))
        for (_, pitch), starts in pending.items():
            for start, vel in starts:
                dangling += 1
                raw.append((start, tick, pitch, vel))
        end_tick = max(end_tick, tick)
    if dangling:
        log.warning("%d note-on events had no matching note-off", dangling)

    raw.sort()
    groups: list[list] = []
    for start, stop, pitch, vel in raw:
        onset = Fraction(start, f.ppq)
        dur = Fraction(stop - start, f.ppq)
        if groups and onset - groups[-1][0] < CHORD_EPS:
            g = groups[-1]
            g[1].add(pitch)
            g[2] = max(g[2], dur)
            g[3] = max(g[3], vel)
        else:
            groups.append([onset, {pitch}, dur, vel])

    notes = NoteSequence()
    notes.dangling_note_ons = dangling
    cursor = Fraction(0)
    for onset, pitches, dur, vel in groups:
        onset = snap(onset)
        dur = max(snap(dur), GRID)
        if onset - cursor >= GRID:
            notes.append(NoteEvent((), cursor, onset - cursor, 0))
        notes.append(NoteEvent(tuple(sorted(pitches)), onset, dur, vel))
        cursor = max(cursor, onset + dur)
    end = snap(Fraction(end_tick, f.ppq))
    if end - cursor >= GRID:
        notes.append(NoteEvent((), cursor, end - cursor, 0))
    return notes


def notes_to_events(notes, ppq: int = DEFAULT_PPQ,
                    tempo_us_per_quarter: int = DEFAULT_TEMPO) -> MidiFile:
    """Render notes as a single-track format-0 file.

    Rests only advance time; the end-of-track event sits at the end of the
    last note or rest so trailing rests survive a round trip.
    """
    timed = []  # (tick, order, event-without-delta); offs sort before ons
    end = 0
    for n in notes:
        start = _ticks(n.onset, ppq)
        stop = _ticks(n.onset + n.duration, ppq)
        end = max(end, stop)
        for p in n.pitches:
            if not 0 <= p <= 127 or not 0 <= n.velocity <= 127:
                raise InvalidEvent(f"pitch/velocity out of range in {n}")
            timed.append((start, 1, p, note_on(0, p, n.velocity)))
            timed.append((stop, 0, p, note_off(0, p, 0)))
    timed.sort(key=lambda t: t[:3])

    track = [tempo_event(0, tempo_us_per_quarter)]
    last = 0
    for tick, _, _, ev in timed:
        track.append(TrackEvent(tick - last, ev.kind, ev.channel, ev.data, ev.code))
        last = tick
    track.append(end_of_track(end - last))
    return MidiFile(0, ppq, [track])


def _ticks(q: Fraction, ppq: int) -> int:
    t = q * ppq
    return math.floor(t + Fraction(1, 2))
