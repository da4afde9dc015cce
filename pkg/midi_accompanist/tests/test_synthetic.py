from unittest import TestCase

import numpy as np

from midi_accompanist.models import Part
from midi_accompanist.synthetic import (
    CORPUS_VERSION,
    GRACE_BEATS,
    GRACE_NOTES,
    GRACE_SEC,
    TempoProfile,
    compose,
    default_corpus,
    expressive_piece,
    generate_piece,
    is_grace,
    piece_by_name,
)
from midi_accompanist.utils import build_onset_grid


class TempoProfileTestCase(TestCase):
    def test_time_is_integral_of_period(self):
        for profile in (
            TempoProfile("constant", 0.5),
            TempoProfile("ritardando", 0.45, 0.5, 200.0),
            TempoProfile("rubato", 0.5, 0.05, 32.0),
            TempoProfile("rubato", 0.5, 0.05, 8.0, start=12.0),
            TempoProfile("ritardando", 0.45, 0.5, 40.0, start=20.0),
        ):
            beats = np.linspace(0.0, 64.0, 6401)
            periods = np.array([profile.period_at(b) for b in beats])
            integral = np.concatenate(([0.0], np.cumsum((periods[1:] + periods[:-1]) / 2.0 * np.diff(beats))))
            np.testing.assert_allclose([profile.time_at(b) for b in beats], integral, atol=1e-5)

    def test_validation(self):
        with self.assertRaises(ValueError):
            TempoProfile("swing")
        with self.assertRaises(ValueError):
            TempoProfile("constant", 0.0)
        with self.assertRaises(ValueError):
            TempoProfile("rubato", 0.5, 0.05, 8.0, start=-1.0)

    def test_shape_starts_late(self):
        profile = TempoProfile("rubato", 0.5, 0.05, 8.0, start=12.0)
        self.assertEqual(profile.period_at(11.0), 0.5)
        self.assertAlmostEqual(profile.time_at(12.0), 6.0)
        self.assertGreater(profile.period_at(14.0), 0.5)


class ComposeTestCase(TestCase):
    def test_melody_over_chords(self):
        score = compose(30, seed=1)
        solo = score.part_notes(Part.SOLO)
        self.assertEqual(len(solo), 30)
        self.assertEqual(len(build_onset_grid(score)), 30)
        self.assertTrue(all(a.pitch != b.pitch for a, b in zip(solo, solo[1:])))
        self.assertTrue(all(b.onset_beats == a.offset_beats for a, b in zip(solo, solo[1:])))
        accompaniment = score.part_notes(Part.ACCOMPANIMENT)
        self.assertEqual(max(n.offset_beats for n in accompaniment), solo[-1].offset_beats)
        self.assertEqual(accompaniment[0].id, "a0-0")

    def test_ornaments(self):
        """Grace notes lead into every sixth melody note and shorten the note before them"""
        plain = compose(30, seed=1).part_notes(Part.SOLO)
        solo = compose(30, seed=1, ornament_every=6, ornament_from=12).part_notes(Part.SOLO)
        graces = [n for n in solo if is_grace(n)]
        mains = [n for n in solo if not is_grace(n)]
        self.assertEqual(len(graces), 3 * GRACE_NOTES)
        self.assertEqual([(n.pitch, n.onset_beats) for n in mains], [(n.pitch, n.onset_beats) for n in plain])
        self.assertTrue(all(b.onset_beats == a.offset_beats for a, b in zip(solo, solo[1:])))
        for i in (12, 18, 24):
            self.assertEqual(mains[i - 1].duration_beats, plain[i - 1].duration_beats - GRACE_NOTES * GRACE_BEATS)
            leading = [n for n in graces if n.id.startswith(f"g{i}-")]
            self.assertEqual(leading[0].onset_beats, mains[i].onset_beats - GRACE_NOTES * GRACE_BEATS)
            self.assertEqual([n.pitch - mains[i].pitch for n in leading], list(range(GRACE_NOTES, 0, -1)))
        self.assertEqual(mains[6].duration_beats, plain[6].duration_beats)

    def test_seeded(self):
        self.assertEqual(compose(20, seed=3), compose(20, seed=3))
        self.assertNotEqual(compose(20, seed=3), compose(20, seed=4))


class GeneratePieceTestCase(TestCase):
    def test_constant_piece(self):
        piece = generate_piece("constant", 16, TempoProfile("constant", 0.5), seed=2)
        self.assertEqual(piece.solo_alignment[0], (0.0, 1.0))
        for score_onset, perf_onset in piece.solo_alignment:
            self.assertAlmostEqual(perf_onset, 1.0 + 0.5 * score_onset)
        self.assertTrue(all(n.duration_sec > 0 and 1 <= n.velocity <= 127 for n in piece.solo + piece.accompaniment))
        self.assertEqual(len(piece.solo_reference().alignment), 16)
        self.assertEqual(piece.accompaniment_reference().alignment, piece.accompaniment_alignment)

    def test_jitter_keeps_order(self):
        piece = generate_piece("jitter", 100, TempoProfile("rubato", 0.5, 0.05, 32.0), jitter_sec=0.05, seed=9)
        onsets = [p for _, p in piece.solo_alignment]
        self.assertTrue(all(b >= a + 0.02 - 1e-9 for a, b in zip(onsets, onsets[1:])))
        clean = generate_piece("clean", 100, TempoProfile("rubato", 0.5, 0.05, 32.0), seed=9)
        self.assertEqual(piece.score, clean.score)
        self.assertNotEqual(piece.solo_alignment, clean.solo_alignment)

    def test_grace_notes_keep_their_speed(self):
        profile = TempoProfile("ritardando", 0.45, 0.5, 20.0)
        piece = generate_piece("ornamented", 30, profile, seed=1, ornament_every=6, ornament_from=12)
        performed = dict(piece.solo_alignment)
        for note in piece.score.part_notes(Part.SOLO):
            if is_grace(note):
                steps = GRACE_NOTES - int(note.id.rsplit("-", 1)[1])
                main = float(note.onset_beats + steps * GRACE_BEATS)
                self.assertAlmostEqual(performed[main] - performed[float(note.onset_beats)], steps * GRACE_SEC)
                self.assertAlmostEqual(performed[main], 1.0 + profile.time_at(main))
        onsets = [p for _, p in piece.solo_alignment]
        self.assertTrue(all(b > a for a, b in zip(onsets, onsets[1:])))

    def test_deterministic(self):
        self.assertEqual(default_corpus(20), default_corpus(20))


class CorpusTestCase(TestCase):
    def test_names(self):
        names = [p.name for p in default_corpus(10)]
        self.assertEqual(len(names), len(set(names)))
        self.assertTrue(all(name.endswith(f"-v{CORPUS_VERSION}") for name in names))
        self.assertEqual(piece_by_name(f"rubato-v{CORPUS_VERSION}", 10).name, f"rubato-v{CORPUS_VERSION}")
        self.assertIsNone(piece_by_name("no-such-piece", 10))

    def test_expressive_pair(self):
        test, reference = expressive_piece(n_onsets=24)
        self.assertEqual(test.score, reference.score)
        self.assertEqual([s for s, _ in test.solo_alignment], [s for s, _ in reference.solo_alignment])

    def test_expressive_piece_is_ornamented(self):
        test, reference = expressive_piece()
        solo = test.score.part_notes(Part.SOLO)
        self.assertEqual(sum(1 for n in solo if is_grace(n)), 12 * GRACE_NOTES)
        self.assertEqual(len(test.solo_alignment), 96 + 12 * GRACE_NOTES)
        self.assertEqual(reference.name, f"ornamented-v{CORPUS_VERSION}")
        self.assertNotEqual(test.solo_alignment, reference.solo_alignment)
