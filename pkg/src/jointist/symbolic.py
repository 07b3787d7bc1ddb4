"""Note events, piano rolls and MIDI I/O.

Rolls run at 100 frames per second over the 88 piano keys (MIDI 21-108).
``render_rolls`` and ``decode_notes`` are inverses for note lists whose
same-pitch notes are separated by at least two frames.
"""

from __future__ import annotations

import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels, taxonomy
from .errors import DomainError, MidiIOError

FRAMES_PER_SECOND = 100
MIN_PITCH = 21
MAX_PITCH = 108
N_PITCHES = MAX_PITCH - MIN_PITCH + 1


@dataclass(frozen=True, order=True)
class NoteEvent:
    onset_s: float
    pitch: int
    offset_s: float
    instrument: int = 0

    def __init__(self, pitch, onset_s, offset_s, instrument=0):
        # positional order (pitch, onset, offset) reads naturally; sort order is by onset
        object.__setattr__(self, "pitch", int(pitch))
        object.__setattr__(self, "onset_s", float(onset_s))
        object.__setattr__(self, "offset_s", float(offset_s))
        object.__setattr__(self, "instrument", int(instrument))
        if not MIN_PITCH <= self.pitch <= MAX_PITCH:
            raise DomainError(f"pitch {pitch} outside [{MIN_PITCH}, {MAX_PITCH}]")
        if self.onset_s < 0 or not self.offset_s > self.onset_s:
            raise DomainError(f"invalid note span [{onset_s}, {offset_s})")

    def __repr__(self):
        return (f"NoteEvent({self.pitch}, {self.onset_s:g}, {self.offset_s:g}, "
                f"{self.instrument})")


@dataclass
class PianoRoll:
    onset: np.ndarray
    frame: np.ndarray
    instrument: int = 0
    frame_rate: int = FRAMES_PER_SECOND

    def __post_init__(self):
        self.onset = np.clip(np.asarray(self.onset, dtype=np.float32), 0.0, 1.0)
        self.frame = np.clip(np.asarray(self.frame, dtype=np.float32), 0.0, 1.0)
        if self.onset.shape != self.frame.shape or self.onset.ndim != 2 \
                or self.onset.shape[1] != N_PITCHES:
            raise DomainError(
                f"onset {self.onset.shape} and frame {self.frame.shape} must both be (T, 88)")

    @property
    def n_frames(self):
        return self.onset.shape[0]

    @classmethod
    def zeros(cls, n_frames, instrument=0):
        z = np.zeros((n_frames, N_PITCHES), dtype=np.float32)
        return cls(z, z.copy(), instrument)


def to_frame(seconds):
    """Nearest frame index, ties to even."""
    return int(np.rint(seconds * FRAMES_PER_SECOND))


def _n_frames(duration_s):
    frames = float(duration_s) * FRAMES_PER_SECOND
    n = int(round(frames))
    if abs(frames - n) > 1e-6 or n <= 0:
        raise DomainError(f"duration {duration_s} s is not a multiple of 10 ms")
    return n


def note_frames(notes, n_frames=None):
    """``(column, on, off)`` rows for ``notes``; drums last one frame."""
    rows = []
    for note in notes:
        on = to_frame(note.onset_s)
        if taxonomy.is_unpitched(note.instrument):
            off = on + 1
        else:
            off = max(to_frame(note.offset_s), on + 1)
        if n_frames is not None and (on < 0 or off > n_frames):
            raise DomainError(f"{note!r} falls outside the {n_frames}-frame roll")
        rows.append((note.pitch - MIN_PITCH, on, off))
    return np.array(rows, dtype=np.int64).reshape(-1, 3)


def render_rolls(notes, duration_s, instrument=None):
    """Binary onset and frame rolls for ``notes`` over ``duration_s`` seconds."""
    n_frames = _n_frames(duration_s)
    notes = list(notes)
    for note in notes:
        if note.offset_s > duration_s + 1e-9:
            raise DomainError(f"{note!r} extends past {duration_s} s")
    onset, frame = kernels.render_notes(note_frames(notes, n_frames), n_frames, N_PITCHES)
    if instrument is None:
        instrument = notes[0].instrument if notes else 0
    return PianoRoll(onset, frame, instrument)


def decode_notes(roll, onset_threshold=0.5, frame_threshold=0.5):
    """Turn (posterior) rolls back into a sorted note list."""
    onset = np.asarray(roll.onset)
    frame = np.asarray(roll.frame)
    if onset.shape != frame.shape:
        raise DomainError(f"onset {onset.shape} and frame {frame.shape} shapes differ")
    for name, thr in (("onset_threshold", onset_threshold), ("frame_threshold", frame_threshold)):
        if not 0.0 < thr < 1.0:
            raise DomainError(f"{name} must lie in (0, 1), got {thr}")
    rows = kernels.decode_rolls(onset, frame, float(onset_threshold), float(frame_threshold))
    notes = [NoteEvent(col + MIN_PITCH, on / FRAMES_PER_SECOND, off / FRAMES_PER_SECOND,
                       roll.instrument)
             for col, on, off in rows.tolist()]
    return sorted(notes)


# ---------------------------------------------------------------------------
# binary array container: b"JRA1", uint32 ndim, uint32 dims..., float32 data (LE)

_MAGIC = b"JRA1"


def save_array(path, array):
    array = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape))
        fh.write(array.tobytes())


def load_array(path):
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise OSError(f"{path}: not an array container")
    (ndim,) = struct.unpack_from("<I", data, 4)
    shape = struct.unpack_from(f"<{ndim}I", data, 8)
    start = 8 + 4 * ndim
    return np.frombuffer(data, dtype="<f4", offset=start).reshape(shape).copy()


def save_roll(path, roll):
    save_array(path, np.stack([roll.onset, roll.frame]))


def load_roll(path, instrument=0):
    arr = load_array(path)
    if arr.ndim != 3 or arr.shape[0] != 2:
        raise DomainError(f"{path}: expected a (2, T, 88) roll, got {arr.shape}")
    return PianoRoll(arr[0], arr[1], instrument)


# ---------------------------------------------------------------------------
# Standard MIDI files

_TICKS_PER_BEAT = 500
_TEMPO = 500_000  # us per beat; 1 tick == 1 ms
_DRUM_CHANNEL = 9


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def fail(self, message):
        raise MidiIOError(message, self.pos)

    def take(self, n):
        if self.pos + n > len(self.data):
            self.fail("unexpected end of data")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def byte(self):
        return self.take(1)[0]

    def varlen(self):
        value = 0
        for _ in range(4):
            b = self.byte()
            value = (value << 7) | (b & 0x7F)
            if not b & 0x80:
                return value
        self.fail("variable-length quantity longer than 4 bytes")


def _parse_track(reader, end):
    """Yield ``(tick, kind, channel, a, b)`` events up to byte ``end``."""
    tick = 0
    status = None
    events = []
    while reader.pos < end:
        tick += reader.varlen()
        first = reader.byte()
        if first == 0xFF:
            meta = reader.byte()
            length = reader.varlen()
            payload = reader.take(length)
            if meta == 0x51:
                if length != 3:
                    reader.fail("malformed tempo event")
                events.append((tick, "tempo", 0, int.from_bytes(payload, "big"), 0))
            elif meta == 0x2F:
                break
            continue
        if first in (0xF0, 0xF7):
            reader.take(reader.varlen())
            continue
        if first & 0x80:
            status = first
            data1 = None
        else:
            if status is None:
                reader.fail("running status without a preceding status byte")
            data1 = first
        kind = status & 0xF0
        channel = status & 0x0F
        if kind in (0x80, 0x90, 0xA0, 0xB0, 0xE0):
            a = reader.byte() if data1 is None else data1
            b = reader.byte()
        elif kind in (0xC0, 0xD0):
            a = reader.byte() if data1 is None else data1
            b = 0
        else:
            reader.fail(f"unsupported status byte 0x{status:02X}")
        if kind == 0x90 and b > 0:
            events.append((tick, "on", channel, a, b))
        elif kind == 0x80 or kind == 0x90:
            events.append((tick, "off", channel, a, 0))
        elif kind == 0xC0:
            events.append((tick, "program", channel, a, 0))
    reader.pos = end
    return events


def _read_smf(data):
    reader = _Reader(data)
    if reader.take(4) != b"MThd":
        reader.pos = 0
        reader.fail("missing MThd header")
    (length,) = struct.unpack(">I", reader.take(4))
    if length < 6:
        reader.fail("header chunk too short")
    fmt, n_tracks, division = struct.unpack(">HHH", reader.take(6))
    reader.take(length - 6)
    if fmt not in (0, 1):
        reader.fail(f"unsupported MIDI format {fmt}")
    if division & 0x8000:
        reader.fail("SMPTE time division is not supported")
    tracks = []
    for _ in range(n_tracks):
        if reader.pos == len(data):
            break
        if reader.take(4) != b"MTrk":
            reader.pos -= 4
            reader.fail("missing MTrk chunk")
        (size,) = struct.unpack(">I", reader.take(4))
        end = reader.pos + size
        if end > len(data):
            reader.fail("track chunk runs past end of file")
        tracks.append(_parse_track(reader, end))
    return division, tracks


def _tick_to_seconds(tempo_events, division):
    """Return a function mapping ticks to seconds under a tempo map."""
    changes = sorted(tempo_events)
    points = [(0, 0.0, _TEMPO)]
    for tick, tempo in changes:
        t0, s0, tempo0 = points[-1]
        points.append((tick, s0 + (tick - t0) * tempo0 / (division * 1e6), tempo))
    ticks = [p[0] for p in points]

    def convert(tick):
        k = int(np.searchsorted(ticks, tick, side="right")) - 1
        t0, s0, tempo0 = points[k]
        return s0 + (tick - t0) * tempo0 / (division * 1e6)

    return convert


def load_midi(path, out_of_range="drop"):
    """Read a format 0/1 MIDI file into ``{instrument index: [NoteEvent]}``.

    Channel 10 (index 9) is read as drums. Notes outside the 88-key range
    are dropped, or clamped to it when ``out_of_range="clamp"``.
    """
    if out_of_range not in ("drop", "clamp"):
        raise DomainError(f"out_of_range must be 'drop' or 'clamp', got {out_of_range!r}")
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise MidiIOError(f"{path}: {exc.strerror or exc}") from exc
    try:
        division, tracks = _read_smf(data)
    except MidiIOError as exc:
        raise MidiIOError(f"{path}: {exc.reason}", exc.offset) from None
    tempo_events = [(ev[0], ev[3]) for tr in tracks for ev in tr if ev[1] == "tempo"]
    seconds = _tick_to_seconds(tempo_events, division)

    notes = defaultdict(list)
    for events in tracks:
        program = [0] * 16
        pending = defaultdict(list)  # (channel, key) -> [(tick, instrument)]
        for tick, kind, channel, a, _ in events:
            if kind == "program":
                program[channel] = a
            elif kind == "on":
                prog = taxonomy.DRUM_PROGRAM if channel == _DRUM_CHANNEL else program[channel]
                pending[channel, a].append((tick, taxonomy.map_program(prog)))
            elif kind == "off" and pending[channel, a]:
                start, inst = pending[channel, a].pop(0)
                _add_note(notes, a, seconds(start), seconds(tick), inst, out_of_range)
    for inst in notes:
        notes[inst].sort()
    return dict(sorted(notes.items()))


def _add_note(notes, key, onset, offset, inst, out_of_range):
    if not MIN_PITCH <= key <= MAX_PITCH:
        if out_of_range == "drop":
            return
        key = min(max(key, MIN_PITCH), MAX_PITCH)
    if offset <= onset:
        # zero-length notes (e.g. drum hits written back to back) get one frame
        offset = onset + 1.0 / FRAMES_PER_SECOND
    notes[inst].append(NoteEvent(key, onset, offset, inst))


def _varlen(value):
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(out))


def _track_chunk(events):
    """``events`` are ``(tick, raw bytes)``; returns an MTrk chunk."""
    body = bytearray()
    last = 0
    for tick, raw in sorted(events, key=lambda e: (e[0], e[1][0] & 0xF0 != 0x80)):
        body += _varlen(tick - last) + raw
        last = tick
    body += b"\x00\xFF\x2F\x00"
    return b"MTrk" + struct.pack(">I", len(body)) + bytes(body)


def _ticks(seconds):
    return int(round(seconds * 1e6 * _TICKS_PER_BEAT / _TEMPO))


def save_midi(notes_by_instrument, path):
    """Write ``{instrument index: notes}`` as a format-1 MIDI file.

    Each instrument gets its own track carrying the lowest program number of
    its class; drums go to channel 10. Times are stored at 1 ms resolution.
    """
    tempo = b"\xFF\x51\x03" + _TEMPO.to_bytes(3, "big")
    chunks = [_track_chunk([(0, tempo)])]
    melodic_channels = [c for c in range(16) if c != _DRUM_CHANNEL]
    for n, (inst, notes) in enumerate(sorted(notes_by_instrument.items())):
        inst = int(inst)
        if taxonomy.is_unpitched(inst):
            channel = _DRUM_CHANNEL
            events = []
        else:
            channel = melodic_channels[n % len(melodic_channels)]
            events = [(0, bytes([0xC0 | channel, taxonomy.representative_program(inst)]))]
        for note in notes:
            events.append((_ticks(note.onset_s), bytes([0x90 | channel, note.pitch, 100])))
            events.append((_ticks(note.offset_s), bytes([0x80 | channel, note.pitch, 0])))
        chunks.append(_track_chunk(events))
    header = b"MThd" + struct.pack(">IHHH", 6, 1, len(chunks), _TICKS_PER_BEAT)
    try:
        Path(path).write_bytes(header + b"".join(chunks))
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc
