import json
import os
import tempfile
from unittest import TestCase

import mido

from midi_accompanist.errors import AlignmentError, MidiImportError, ScoreFormatError
from midi_accompanist.models import Part, PerformedNote
from midi_accompanist.utils import (
    alignment_path_for,
    build_onset_grid,
    dump_alignment_csv,
    dump_score,
    export_midi_score,
    import_midi_score,
    load_reference,
    parse_alignment_csv,
    parse_part_map,
    parse_score,
    read_performance,
    read_reference_file,
    read_score_file,
    render_deadpan,
    write_performance,
)

DOCUMENT = {
    "version": 1,
    "time_signature": "3/4",
    "initial_bpm": "96",
    "notes": [
        {"id": "s1", "pitch": 60, "onset_beats": "0", "duration_beats": "1.5", "part": "solo"},
        {"id": "s2", "pitch": 64, "onset_beats": "1.5", "duration_beats": "0.5", "part": "solo"},
        {"id": "s3", "pitch": 67, "onset_beats": "1.5", "duration_beats": "1", "part": "solo"},
        {"id": "a1", "pitch": 48, "onset_beats": "0", "duration_beats": "3", "part": "accompaniment"},
    ],
}


def score_document(**changes):
    document = dict(DOCUMENT, **changes)
    return json.dumps(document).encode("utf-8")


class ScoreDocumentTestCase(TestCase):
    def test_parse(self):
        """Beats are exact fractions; the time signature and tempo are kept"""
        score = parse_score(score_document())
        self.assertEqual(score.beats_per_measure, 3)
        self.assertEqual(str(score.initial_bpm), "96")
        self.assertEqual(score.note_by_id("s2").onset_beats.denominator, 2)
        self.assertAlmostEqual(score.default_beat_period, 0.625)

    def test_dump_round_trip(self):
        score = parse_score(score_document())
        self.assertEqual(parse_score(dump_score(score)), score)

    def test_rejects_bad_documents(self):
        for document in (
            b"not json",
            score_document(version=2),
            score_document(notes=[]),
            score_document(time_signature="three"),
            score_document(notes=[dict(DOCUMENT["notes"][0], part="drums")]),
            score_document(notes=[dict(DOCUMENT["notes"][0], onset_beats=0.5)]),
            score_document(notes=[{"id": "x", "pitch": 60}]),
        ):
            with self.assertRaises(ScoreFormatError):
                parse_score(document)

    def test_duet_required(self):
        solo_only = score_document(notes=DOCUMENT["notes"][:3])
        with self.assertRaises(ScoreFormatError):
            parse_score(solo_only)
        self.assertEqual(len(parse_score(solo_only, duet=False).notes), 3)


class OnsetGridTestCase(TestCase):
    def test_chords_share_an_onset(self):
        grid = build_onset_grid(parse_score(score_document()))
        self.assertEqual(grid.onsets, (0.0, 1.5))
        self.assertEqual(grid.iois, (1.5,))
        self.assertEqual(grid.pitch_sets[1], frozenset({64, 67}))
        self.assertEqual(set(grid.note_ids[1]), {"s2", "s3"})


class MidiScoreTestCase(TestCase):
    def test_export_import(self):
        """A score survives export to a type 1 SMF and import with the default track map"""
        score = parse_score(score_document())
        imported = import_midi_score(export_midi_score(score), parse_part_map(None))
        self.assertEqual(imported.initial_bpm, score.initial_bpm)
        self.assertEqual((imported.beats_per_measure, imported.beat_unit), (3, 4))
        for part in Part:
            original = [(n.pitch, n.onset_beats, n.duration_beats) for n in score.part_notes(part)]
            read = [(n.pitch, n.onset_beats, n.duration_beats) for n in imported.part_notes(part)]
            self.assertEqual(read, original)

    def test_chord_onsets_snap(self):
        mid = mido.MidiFile(type=1, ticks_per_beat=480)
        track = mido.MidiTrack()
        track.append(mido.Message("note_on", note=60, velocity=64, time=0))
        track.append(mido.Message("note_on", note=64, velocity=64, time=1))
        track.append(mido.Message("note_off", note=60, velocity=0, time=479))
        track.append(mido.Message("note_off", note=64, velocity=0, time=0))
        mid.tracks.extend([mido.MidiTrack(), track])
        path = os.path.join(tempfile.mkdtemp(), "chord.mid")
        mid.save(path)
        with open(path, "rb") as f:
            score = import_midi_score(f.read(), {1: "solo"}, duet=False)
        self.assertEqual({n.onset_beats for n in score.notes}, {0})

    def test_unreleased_note(self):
        mid = mido.MidiFile(type=0, ticks_per_beat=480)
        track = mido.MidiTrack()
        track.append(mido.Message("note_on", note=60, velocity=64, time=0))
        mid.tracks.append(track)
        path = os.path.join(tempfile.mkdtemp(), "open.mid")
        mid.save(path)
        with open(path, "rb") as f:
            data = f.read()
        with self.assertRaises(MidiImportError):
            import_midi_score(data, {0: "solo"}, duet=False)

    def test_garbage(self):
        with self.assertRaises(MidiImportError):
            import_midi_score(b"not a midi file", {0: "solo"})

    def test_part_map(self):
        self.assertEqual(parse_part_map("0=accompaniment, 3=solo"), {0: Part.ACCOMPANIMENT, 3: Part.SOLO})

    def test_bad_part_map(self):
        for value in ("1=solo,2=drums", "one=solo", "1solo"):
            with self.assertRaises(ScoreFormatError) as caught:
                parse_part_map(value)
            self.assertIn("part map entry", str(caught.exception))


class PerformanceTestCase(TestCase):
    def test_write_read(self):
        """Performed notes come back in seconds within a tick"""
        notes = [PerformedNote(60, 0.5, 0.25, 70), PerformedNote(64, 0.5, 0.5, 60), PerformedNote(60, 1.0, 0.2, 80)]
        read = read_performance(write_performance(notes))
        self.assertEqual([(n.pitch, n.velocity) for n in read], [(60, 70), (64, 60), (60, 80)])
        for original, back in zip(notes, read):
            self.assertAlmostEqual(back.onset_sec, original.onset_sec, delta=0.002)
            self.assertAlmostEqual(back.duration_sec, original.duration_sec, delta=0.002)


class AlignmentTestCase(TestCase):
    def setUp(self):
        self.score = parse_score(score_document())

    def test_csv(self):
        alignment = [(0.0, 1.0), (1.5, 1.9375)]
        self.assertEqual(parse_alignment_csv(dump_alignment_csv(alignment)), alignment)
        with self.assertRaises(AlignmentError):
            parse_alignment_csv("a,b\n0,1\n")
        with self.assertRaises(AlignmentError):
            parse_alignment_csv("score_onset_beats,perf_onset_sec\nx,1\n")

    def test_load_reference(self):
        notes = [PerformedNote(60, 1.0, 0.5, 64)]
        ref = load_reference(notes, [(0.0, 1.0), (1.5, 2.0)], self.score)
        self.assertEqual(list(ref.score_onsets), [0.0, 1.5])

    def test_alignment_must_cover_the_part(self):
        notes = [PerformedNote(60, 1.0, 0.5, 64)]
        with self.assertRaises(AlignmentError):
            load_reference(notes, [(0.0, 1.0)], self.score)
        with self.assertRaises(AlignmentError):
            load_reference(notes, [(0.0, 1.0), (1.5, 2.0), (3.0, 3.0)], self.score)

    def test_reference_files(self):
        directory = tempfile.mkdtemp()
        perf_path = os.path.join(directory, "take1.mid")
        with open(perf_path, "wb") as f:
            f.write(write_performance([PerformedNote(60, 1.0, 0.5, 64), PerformedNote(64, 2.0, 0.3, 64)]))
        with self.assertRaises(AlignmentError):
            read_reference_file(perf_path, self.score)
        self.assertEqual(alignment_path_for(perf_path), os.path.join(directory, "take1.csv"))
        with open(alignment_path_for(perf_path), "wb") as f:
            f.write(dump_alignment_csv([(0.0, 1.0), (1.5, 2.0)]))
        ref = read_reference_file(perf_path, self.score)
        self.assertEqual(len(ref.notes), 2)

    def test_read_score_file(self):
        directory = tempfile.mkdtemp()
        json_path = os.path.join(directory, "score.json")
        midi_path = os.path.join(directory, "score.mid")
        with open(json_path, "wb") as f:
            f.write(score_document())
        with open(midi_path, "wb") as f:
            f.write(export_midi_score(self.score))
        self.assertEqual(read_score_file(json_path), self.score)
        self.assertEqual(len(read_score_file(midi_path).notes), len(self.score.notes))


class DeadpanTestCase(TestCase):
    def test_render(self):
        score = parse_score(score_document())
        ref = render_deadpan(score, beat_period=0.5)
        self.assertEqual(ref.alignment, ((0.0, 0.0), (1.5, 0.75)))
        self.assertEqual([n.pitch for n in ref.notes], [60, 64, 67])
        self.assertAlmostEqual(ref.notes[0].duration_sec, 0.75)
