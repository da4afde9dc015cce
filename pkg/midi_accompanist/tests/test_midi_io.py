import io
import time
from unittest import TestCase

import mido

from midi_accompanist.errors import ClockFaultError, MidiImportError
from midi_accompanist.midi_io import (
    EventEmitter,
    NoteTracker,
    OutputStage,
    SmfSink,
    Windower,
    emit_events,
    frame_index,
    grid_origin,
    performance_events,
    replay_performance,
    window_events,
)
from midi_accompanist.models import AccompanimentEvent, EventKind, InputWindow, MidiEvent, PerformedNote
from midi_accompanist.utils import read_performance, write_performance


def on(pitch, t, velocity=64):
    return MidiEvent(EventKind.NOTE_ON, pitch, velocity, t)


def off(pitch, t):
    return MidiEvent(EventKind.NOTE_OFF, pitch, 0, t)


def note_messages(sink):
    return [(m.type, m.note, round(t, 6)) for t, m in sink.messages]


class GridTestCase(TestCase):
    def test_frame_index(self):
        self.assertEqual(grid_origin(1.003), 1.0)
        self.assertEqual(frame_index(1.0, 1.0), 0)
        self.assertEqual(frame_index(1.0099, 1.0), 0)
        self.assertEqual(frame_index(1.01, 1.0), 1)
        self.assertEqual(frame_index(1.5, 1.0), 50)


class WindowerTestCase(TestCase):
    def test_windows_are_contiguous(self):
        """Windows tile time from the first event on, empty ones included"""
        windows = list(window_events([on(60, 1.003), on(64, 1.005), off(60, 1.5)]))
        self.assertEqual(len(windows), 51)
        self.assertEqual([w.frame_index for w in windows], list(range(51)))
        self.assertEqual(windows[0].pitches, frozenset({60, 64}))
        self.assertEqual(windows[0].onset_times[64], 1.005)
        self.assertAlmostEqual(windows[0].window_end_sec, 1.01)
        self.assertTrue(all(w.is_empty for w in windows[1:]))
        self.assertEqual(windows[-1].releases, {60: 1.5})
        for a, b in zip(windows, windows[1:]):
            self.assertAlmostEqual(b.window_start_sec, a.window_end_sec)

    def test_onsets_share_the_window_end(self):
        windows = list(window_events([on(60, 0.021), on(62, 0.029), on(64, 0.031)]))
        self.assertEqual(windows[0].pitches, frozenset({60, 62}))
        self.assertEqual(windows[1].pitches, frozenset({64}))

    def test_clock_regression(self):
        windower = Windower()
        windower.push(on(60, 1.0))
        windower.push(on(62, 0.9995))
        with self.assertRaises(ClockFaultError):
            windower.push(on(64, 0.998))

    def test_advance(self):
        windower = Windower()
        self.assertEqual(windower.advance(5.0), [])
        windower.push(on(60, 1.0))
        windows = windower.advance(1.025)
        self.assertEqual(len(windows), 2)
        self.assertEqual(windows[0].pitches, frozenset({60}))
        self.assertEqual(len(windower.flush()), 1)


class NoteTrackerTestCase(TestCase):
    def test_duration_and_velocity(self):
        tracker = NoteTracker()
        started = tracker.update(InputWindow(1.01, 0, {60: 90}, {60: 1.004}))
        self.assertEqual([(n.pitch, n.velocity) for n in started], [(60, 90)])
        self.assertEqual(tracker.drain_completed(), [])
        tracker.update(InputWindow(1.51, 50, releases={60: 1.504}))
        completed = tracker.drain_completed()
        self.assertEqual(len(completed), 1)
        self.assertAlmostEqual(completed[0].duration_sec, 0.5)
        self.assertEqual(tracker.drain_completed(), [])

    def test_restrike_in_one_window(self):
        """A release before a re-strike in the same window closes the earlier note"""
        tracker = NoteTracker()
        tracker.update(InputWindow(1.01, 0, {60: 90}, {60: 1.0}))
        started = tracker.update(InputWindow(1.21, 20, {60: 70}, {60: 1.205}, {60: 1.202}))
        completed = tracker.drain_completed()
        self.assertEqual(len(completed), 1)
        self.assertEqual(completed[0].velocity, 90)
        self.assertEqual(started[0].velocity, 70)
        self.assertEqual(len(tracker.open[60]), 1)


class ReplayTestCase(TestCase):
    def setUp(self):
        self.smf = write_performance([PerformedNote(60, 0.5, 0.5, 80), PerformedNote(64, 1.0, 0.25, 70)])

    def test_virtual_clock(self):
        events = list(replay_performance(self.smf))
        self.assertEqual(
            [(e.kind, e.pitch) for e in events],
            [(EventKind.NOTE_ON, 60), (EventKind.NOTE_OFF, 60), (EventKind.NOTE_ON, 64), (EventKind.NOTE_OFF, 64)],
        )
        self.assertAlmostEqual(events[0].timestamp_sec, 0.5)
        self.assertAlmostEqual(events[3].timestamp_sec, 1.25)

    def test_speed(self):
        events = list(replay_performance(self.smf, speed=2.0))
        self.assertAlmostEqual(events[2].timestamp_sec, 0.5)
        with self.assertRaises(ValueError):
            list(replay_performance(self.smf, speed=0))

    def test_wall_clock_waits(self):
        sleeps = []
        list(replay_performance(self.smf, clock="wall", sleep=sleeps.append))
        self.assertTrue(sleeps)
        self.assertGreater(max(sleeps), 1.0)

    def test_invalid_file(self):
        with self.assertRaises(MidiImportError):
            list(replay_performance(b"not a midi file"))

    def test_performance_events(self):
        """Releases come before onsets at the same time"""
        events = performance_events([PerformedNote(60, 0.0, 0.5, 64), PerformedNote(62, 0.5, 0.5, 64)])
        self.assertEqual([(e.kind, e.pitch) for e in events[1:3]], [(EventKind.NOTE_OFF, 60), (EventKind.NOTE_ON, 62)])


class EmitterTestCase(TestCase):
    def test_every_note_on_is_released(self):
        sink = SmfSink()
        emit_events([AccompanimentEvent(60, 1.0, 0.5, 80), AccompanimentEvent(64, 1.0, 0.25, 70)], sink)
        self.assertEqual(
            note_messages(sink),
            [("note_on", 60, 1.0), ("note_on", 64, 1.0), ("note_off", 64, 1.25), ("note_off", 60, 1.5)],
        )
        notes = read_performance(sink.to_bytes())
        self.assertEqual([n.pitch for n in notes], [60, 64])
        self.assertAlmostEqual(notes[0].duration_sec, 0.5, delta=0.002)

    def test_restrike_releases_first(self):
        sink = SmfSink()
        emit_events([AccompanimentEvent(60, 1.0, 1.0, 80), AccompanimentEvent(60, 1.5, 0.2, 80)], sink)
        self.assertEqual(
            note_messages(sink),
            [("note_on", 60, 1.0), ("note_off", 60, 1.5), ("note_on", 60, 1.5), ("note_off", 60, 1.7)],
        )

    def test_late_and_latency(self):
        sink = SmfSink()
        emitter = EventEmitter(sink, latency_sec=0.05)
        emitter.emit(AccompanimentEvent(60, 1.0, 0.5, 80))
        emitter.emit(AccompanimentEvent(62, 1.0, 0.5, 80), now=1.2)
        emitter.close()
        self.assertEqual(emitter.late_count, 1)
        self.assertEqual(note_messages(sink)[:2], [("note_on", 60, 0.95), ("note_on", 62, 1.2)])

    def test_release_due(self):
        sink = SmfSink()
        emitter = EventEmitter(sink)
        emitter.emit(AccompanimentEvent(60, 1.0, 0.5, 80))
        self.assertEqual(emitter.next_release, 1.5)
        emitter.release_due(1.4)
        self.assertEqual(len(sink.messages), 1)
        emitter.release_due(1.5)
        self.assertEqual(note_messages(sink)[-1], ("note_off", 60, 1.5))
        self.assertIsNone(emitter.next_release)

    def test_close_at_now(self):
        sink = SmfSink()
        emitter = EventEmitter(sink)
        emitter.emit(AccompanimentEvent(60, 1.0, 5.0, 80))
        emitter.close(now=2.0)
        self.assertEqual(note_messages(sink)[-1], ("note_off", 60, 2.0))

    def test_smf_is_deterministic(self):
        def render():
            sink = SmfSink()
            emit_events([AccompanimentEvent(60, 0.5, 0.5, 80), AccompanimentEvent(67, 0.75, 0.5, 60)], sink)
            return sink.to_bytes()

        self.assertEqual(render(), render())
        mid = mido.MidiFile(file=io.BytesIO(render()))
        self.assertEqual(mid.type, 0)


class OutputStageTestCase(TestCase):
    def test_plays_and_releases(self):
        """Submitted events play when due and are released when the stage stops"""
        sink = SmfSink()
        started = time.monotonic()
        stage = OutputStage(EventEmitter(sink), lambda: time.monotonic() - started)
        stage.start()
        stage.submit(AccompanimentEvent(60, 0.0, 5.0, 80))
        time.sleep(0.2)
        stage.stop()
        self.assertEqual([m.type for _, m in sink.messages], ["note_on", "note_off"])
