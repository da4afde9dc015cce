import heapq
import io
import itertools
import logging
import math
import queue
import threading
import time
from collections import defaultdict, deque
from dataclasses import dataclass
from typing import Callable, Deque, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import mido

from .errors import ClockFaultError, MidiImportError, SinkUnavailableError
from .models import AccompanimentEvent, EventKind, InputWindow, MidiEvent, PerformedNote

logger = logging.getLogger(__name__)

WINDOW_SEC = 0.01
REGRESSION_TOLERANCE_SEC = 0.001
_EPS = 1e-9


def frame_index(timestamp: float, origin: float, hop: float = WINDOW_SEC) -> int:
    """Index of the hop-sized frame containing `timestamp` on the grid starting at `origin`."""
    return int(math.floor((timestamp - origin) / hop + _EPS))


def grid_origin(timestamp: float, hop: float = WINDOW_SEC) -> float:
    """`timestamp` rounded down to a hop boundary."""
    return math.floor(timestamp / hop + _EPS) * hop


class Windower:
    """
    Incremental front-end that cuts a MIDI event stream into contiguous, non-overlapping windows.
    The first event fixes the phase of the grid. Windows without note-ons are still emitted.
    """

    def __init__(self, width_sec: float = WINDOW_SEC):
        self.width_sec = width_sec
        self.origin: Optional[float] = None
        self.current_index = 0
        self.last_timestamp = -math.inf
        self._reset_buffers()

    def _reset_buffers(self):
        self._onsets: Dict[int, int] = {}
        self._onset_times: Dict[int, float] = {}
        self._releases: Dict[int, float] = {}

    def window_end(self, index: int) -> float:
        return self.origin + (index + 1) * self.width_sec

    def _close_until(self, index: int) -> List[InputWindow]:
        windows = []
        while self.current_index < index:
            windows.append(
                InputWindow(
                    window_end_sec=self.window_end(self.current_index),
                    frame_index=self.current_index,
                    onsets=self._onsets,
                    onset_times=self._onset_times,
                    releases=self._releases,
                    width_sec=self.width_sec,
                )
            )
            self._reset_buffers()
            self.current_index += 1
        return windows

    def push(self, event: MidiEvent) -> List[InputWindow]:
        """Add an event; returns the windows it closed."""
        timestamp = event.timestamp_sec
        if timestamp < self.last_timestamp - REGRESSION_TOLERANCE_SEC:
            raise ClockFaultError(f"timestamp went back from {self.last_timestamp:.6f}s to {timestamp:.6f}s")
        timestamp = max(timestamp, self.last_timestamp)
        self.last_timestamp = timestamp

        if self.origin is None:
            self.origin = grid_origin(timestamp, self.width_sec)
            self.current_index = 0

        closed = self._close_until(frame_index(timestamp, self.origin, self.width_sec))
        if event.is_note_on:
            self._onsets[event.pitch] = event.velocity
            self._onset_times[event.pitch] = event.timestamp_sec
        else:
            self._releases[event.pitch] = timestamp
        return closed

    def advance(self, now: float) -> List[InputWindow]:
        """Emit every window that ended at or before `now`."""
        if self.origin is None:
            return []
        return self._close_until(frame_index(now, self.origin, self.width_sec))

    def flush(self) -> List[InputWindow]:
        if self.origin is None:
            return []
        return self._close_until(self.current_index + 1)


def window_events(events: Iterable[MidiEvent], width_sec: float = WINDOW_SEC) -> Iterator[InputWindow]:
    windower = Windower(width_sec)
    for event in events:
        yield from windower.push(event)
    yield from windower.flush()


@dataclass
class TrackedNote:
    pitch: int
    onset_sec: float
    velocity: int
    window_end_sec: float
    offset_sec: Optional[float] = None
    score_onset_index: Optional[int] = None

    @property
    def duration_sec(self) -> Optional[float]:
        if self.offset_sec is None:
            return None
        return max(self.offset_sec - self.onset_sec, 0.0)


class NoteTracker:
    """Keeps velocity and duration of the soloist's notes; note-offs close the earliest open note of their pitch."""

    def __init__(self):
        self.open: Dict[int, Deque[TrackedNote]] = defaultdict(deque)
        self._completed: List[TrackedNote] = []

    def update(self, window: InputWindow) -> List[TrackedNote]:
        """Record the window's releases and onsets; returns the notes started in it."""
        # a release that precedes a same-window re-strike belongs to the earlier note
        for pitch, released_at in window.releases.items():
            onset_at = window.onset_times.get(pitch)
            if onset_at is None or onset_at > released_at:
                self._release(pitch, released_at)
        started = []
        for pitch, velocity in sorted(window.onsets.items()):
            note = TrackedNote(pitch, window.onset_times.get(pitch, window.window_end_sec), velocity, window.window_end_sec)
            self.open[pitch].append(note)
            started.append(note)
        for pitch, released_at in window.releases.items():
            onset_at = window.onset_times.get(pitch)
            if onset_at is not None and onset_at <= released_at:
                self._release(pitch, released_at)
        return started

    def _release(self, pitch: int, released_at: float):
        if self.open[pitch]:
            note = self.open[pitch].popleft()
            note.offset_sec = released_at
            self._completed.append(note)

    def drain_completed(self) -> List[TrackedNote]:
        completed, self._completed = self._completed, []
        return completed


def _open_performance(perf: Union[bytes, mido.MidiFile]) -> mido.MidiFile:
    if isinstance(perf, mido.MidiFile):
        return perf
    try:
        return mido.MidiFile(file=io.BytesIO(perf))
    except (OSError, EOFError, ValueError, KeyError, IndexError) as ex:
        raise MidiImportError(f"invalid standard MIDI file: {ex}")


def replay_performance(
    perf: Union[bytes, mido.MidiFile],
    speed: float = 1.0,
    clock: str = "virtual",
    sleep: Callable[[float], None] = time.sleep,
) -> Iterator[MidiEvent]:
    """
    Play back an SMF as MidiEvents at `speed` times the recorded tempo. The virtual clock yields
    immediately with file timestamps; the wall clock waits until each event is due.
    """
    if speed <= 0:
        raise ValueError(f"speed must be positive, got {speed}")
    if clock not in ("virtual", "wall"):
        raise ValueError(f"unknown clock {clock!r}")

    mid = _open_performance(perf)
    started = time.monotonic()
    now = 0.0
    for msg in mid:
        now += msg.time
        if msg.type not in ("note_on", "note_off"):
            continue
        timestamp = now / speed
        if clock == "wall":
            delay = started + timestamp - time.monotonic()
            if delay > 0:
                sleep(delay)
        kind = EventKind.NOTE_ON if msg.type == "note_on" else EventKind.NOTE_OFF
        yield MidiEvent(kind, msg.note, msg.velocity, timestamp)


def performance_events(notes: Sequence[PerformedNote], speed: float = 1.0) -> List[MidiEvent]:
    """Note-on/off events of already parsed notes, time-ordered (note-offs first on ties)."""
    events = []
    for note in notes:
        events.append((note.onset_sec / speed, 1, MidiEvent(EventKind.NOTE_ON, note.pitch, note.velocity, note.onset_sec / speed)))
        events.append((note.offset_sec / speed, 0, MidiEvent(EventKind.NOTE_OFF, note.pitch, 0, note.offset_sec / speed)))
    events.sort(key=lambda e: (e[0], e[1], e[2].pitch))
    return [event for _, _, event in events]


class SmfSink:
    """Collects emitted messages with their times and renders them as a type 0 SMF."""

    def __init__(self, ppq: int = 480, tempo: int = 500000):
        self.ppq = ppq
        self.tempo = tempo
        self.messages: List[Tuple[float, mido.Message]] = []

    def send(self, message: mido.Message, timestamp: float):
        self.messages.append((max(timestamp, 0.0), message))

    def close(self):
        pass

    def log_lines(self) -> List[str]:
        return [f"{t:.6f} {m.type} {m.note} {m.velocity}" for t, m in self.messages]

    def to_bytes(self) -> bytes:
        mid = mido.MidiFile(type=0, ticks_per_beat=self.ppq)
        track = mido.MidiTrack()
        track.append(mido.MetaMessage("set_tempo", tempo=self.tempo, time=0))
        last = 0
        for timestamp, message in sorted(self.messages, key=lambda m: m[0]):
            tick = round(mido.second2tick(timestamp, self.ppq, self.tempo))
            track.append(message.copy(time=tick - last))
            last = tick
        track.append(mido.MetaMessage("end_of_track", time=0))
        mid.tracks.append(track)
        buffer = io.BytesIO()
        mid.save(file=buffer)
        return buffer.getvalue()


class PortSink:
    """Sends messages straight to a hardware or virtual MIDI output port."""

    def __init__(self, port_name: Optional[str] = None):
        try:
            self.port = mido.open_output(port_name)
        except (OSError, IOError) as ex:
            raise SinkUnavailableError(f"cannot open MIDI output {port_name!r}: {ex}")
        self.name = self.port.name

    def send(self, message: mido.Message, timestamp: float):
        self.port.send(message)

    def close(self):
        self.port.reset()
        self.port.close()


class EventEmitter:
    """
    Turns AccompanimentEvents into note-on/note-off pairs on a sink. Late events fire at `now` and are
    counted. Re-striking a sounding pitch releases it first, so every note-on gets exactly one note-off.
    """

    def __init__(self, sink, latency_sec: float = 0.0):
        self.sink = sink
        self.latency_sec = latency_sec
        self.late_count = 0
        self._offs: List[Tuple[float, int, int]] = []
        self._sounding: Dict[int, int] = {}
        self._sequence = itertools.count()
        self._last_time = 0.0

    def release_due(self, now: float):
        while self._offs and self._offs[0][0] <= now + _EPS:
            at, token, pitch = heapq.heappop(self._offs)
            if self._sounding.get(pitch) != token:
                continue
            del self._sounding[pitch]
            self._send(mido.Message("note_off", note=pitch, velocity=0), at)

    def _send(self, message: mido.Message, at: float):
        self._last_time = max(self._last_time, at)
        self.sink.send(message, at)

    def emit(self, event: AccompanimentEvent, now: Optional[float] = None):
        at = event.onset_sec - self.latency_sec
        if now is not None and at < now - _EPS:
            self.late_count += 1
            logger.warning(f"late accompaniment note {event.pitch}: due {at:.3f}s, fired {now:.3f}s")
            at = now
        at = max(at, self._last_time)
        self.release_due(at)
        if event.pitch in self._sounding:
            del self._sounding[event.pitch]
            self._send(mido.Message("note_off", note=event.pitch, velocity=0), at)
        token = next(self._sequence)
        self._sounding[event.pitch] = token
        self._send(mido.Message("note_on", note=event.pitch, velocity=event.velocity), at)
        heapq.heappush(self._offs, (at + event.duration_sec, token, event.pitch))

    @property
    def next_release(self) -> Optional[float]:
        return self._offs[0][0] if self._offs else None

    def close(self, now: Optional[float] = None):
        """All notes off: pending releases fire at their own time, or at `now` if given."""
        while self._offs:
            at, token, pitch = heapq.heappop(self._offs)
            if self._sounding.get(pitch) != token:
                continue
            del self._sounding[pitch]
            self._send(mido.Message("note_off", note=pitch, velocity=0), at if now is None else max(now, self._last_time))
        self.sink.close()


def emit_events(events: Iterable[AccompanimentEvent], sink, now: Optional[float] = None, latency_sec: float = 0.0) -> EventEmitter:
    """Emit a time-ordered batch of events and release everything afterwards."""
    emitter = EventEmitter(sink, latency_sec)
    for event in events:
        emitter.emit(event, now)
    emitter.close()
    return emitter


class OutputStage(threading.Thread):
    """Owns an EventEmitter on a live port; events arrive through `submit` and fire when due."""

    LATE_TOLERANCE_SEC = 0.005

    def __init__(self, emitter: EventEmitter, clock: Callable[[], float]):
        super().__init__(name="accompanist-output", daemon=True)
        self.emitter = emitter
        self.clock = clock
        self.inbox: "queue.Queue[Optional[AccompanimentEvent]]" = queue.Queue()
        self._pending: List[Tuple[float, int, AccompanimentEvent]] = []
        self._sequence = itertools.count()

    def submit(self, event: AccompanimentEvent):
        self.inbox.put(event)

    def stop(self):
        self.inbox.put(None)
        self.join(timeout=2.0)

    def run(self):
        running = True
        while running or self._pending:
            due = [t for t in (self._pending[0][0] if self._pending else None, self.emitter.next_release) if t is not None]
            timeout = max(min(due) - self.clock(), 0.0) if due else 0.05
            try:
                item = self.inbox.get(timeout=min(timeout, 0.05))
                if item is None:
                    running = False
                    self._pending.clear()
                else:
                    heapq.heappush(self._pending, (item.onset_sec - self.emitter.latency_sec, next(self._sequence), item))
            except queue.Empty:
                pass
            now = self.clock()
            while self._pending and self._pending[0][0] <= now:
                at, _, event = heapq.heappop(self._pending)
                self.emitter.emit(event, now if now - at > self.LATE_TOLERANCE_SEC else None)
            self.emitter.release_due(now)
        self.emitter.close(self.clock())
