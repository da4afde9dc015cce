import statistics
from unittest import TestCase

import numpy as np

from midi_accompanist.errors import AlignmentError
from midi_accompanist.evaluation import (
    DEFAULT_GRIDS,
    AsynchronyReport,
    TempoErrorReport,
    asynchrony_metrics,
    follower_csv,
    format_follower_table,
    format_tempo_table,
    grid_search,
    grid_size,
    oracle_follower_report,
    perturb_performance,
    run_follower_experiment,
    run_tempo_experiment,
    search_variants,
    tempo_csv,
)
from midi_accompanist.models import Part, PerformedNote, ReferencePerformance
from midi_accompanist.synthetic import TempoProfile, expressive_piece, generate_piece, piece_by_name, rng_for
from midi_accompanist.tempo_models import TempoVariant, reference_tempo
from midi_accompanist.utils import dump_alignment_csv, load_reference, write_performance


def spaced_performance(n, spacing=2.0):
    notes = tuple(PerformedNote(60, 1.0 + spacing * k, 1.0, 64) for k in range(n))
    return ReferencePerformance(notes, tuple((float(k), 1.0 + spacing * k) for k in range(n)))


class MetricsTestCase(TestCase):
    def test_against_naive_recomputation(self):
        rng = rng_for(21)
        for _ in range(1000):
            n = int(rng.integers(1, 40))
            truth = [(float(k), float(t)) for k, t in enumerate(rng.uniform(0.0, 100.0, n))]
            estimated = [(s, t + float(rng.normal(0.0, 0.08))) for s, t in truth]
            report = asynchrony_metrics(estimated, truth)

            errors = [abs(e - t) * 1000.0 for (_, e), (_, t) in zip(estimated, truth)]
            self.assertAlmostEqual(report.median_abs_ms, statistics.median(errors), places=6)
            for threshold, pct in ((25, report.pct_le_25), (50, report.pct_le_50), (100, report.pct_le_100)):
                self.assertAlmostEqual(pct, 100.0 * sum(e <= threshold for e in errors) / n, places=6)
            self.assertTrue(0.0 <= report.pct_le_25 <= report.pct_le_50 <= report.pct_le_100 <= 100.0)

    def test_order_does_not_matter(self):
        truth = [(0.0, 1.0), (1.0, 1.5), (2.0, 2.0)]
        estimated = [(2.0, 2.03), (0.0, 1.0), (1.0, 1.51)]
        report = asynchrony_metrics(estimated, truth, label="X")
        np.testing.assert_allclose(report.asynchronies_ms, [0.0, 10.0, 30.0], atol=1e-9)
        self.assertAlmostEqual(report.median_abs_ms, 10.0)
        self.assertAlmostEqual(report.pct_le_25, 200.0 / 3)
        self.assertEqual(report.pct_le_50, 100.0)

    def test_mismatched_onsets(self):
        with self.assertRaises(AlignmentError):
            asynchrony_metrics([(0.0, 1.0)], [(0.0, 1.0), (1.0, 2.0)])
        with self.assertRaises(ValueError):
            AsynchronyReport.from_asynchronies([])

    def test_reports(self):
        reports = [AsynchronyReport.from_asynchronies([10.0, 20.0, 80.0], "OLTW")]
        self.assertIn("OLTW", format_follower_table(reports).splitlines()[1])
        self.assertEqual(follower_csv(reports).splitlines()[1], "OLTW,20.000,66.667,66.667,100.000")


class PerturbTestCase(TestCase):
    def test_onset_noise(self):
        ref = spaced_performance(10000)
        [perturbed] = perturb_performance(ref, sigma_ms=100.0, count=1, seed=3)
        deltas = np.array([p.onset_sec - n.onset_sec for p, n in zip(perturbed.notes, ref.notes)])
        self.assertAlmostEqual(float(np.std(deltas, ddof=1)), 0.1, delta=0.005)
        self.assertAlmostEqual(float(np.mean(deltas)), 0.0, delta=0.005)
        np.testing.assert_allclose(perturbed.perf_onsets - ref.perf_onsets, deltas)

    def test_seeded(self):
        ref = spaced_performance(50)
        self.assertEqual(perturb_performance(ref, count=3, seed=1), perturb_performance(ref, count=3, seed=1))
        first, second = perturb_performance(ref, count=2, seed=1)
        self.assertNotEqual(first, second)
        self.assertNotEqual(perturb_performance(ref, count=1, seed=2), perturb_performance(ref, count=1, seed=1))

    def test_stays_valid(self):
        piece = generate_piece("constant", 60, TempoProfile("constant", 0.3), seed=8)
        for perturbed in perturb_performance(piece.solo_reference(), sigma_ms=200.0, count=5):
            onsets = perturbed.perf_onsets
            self.assertTrue(np.all(np.diff(onsets) > 0))
            self.assertTrue(all(n.duration_sec >= 0.01 and n.onset_sec >= 0.0 for n in perturbed.notes))

    def test_chords_of_a_loaded_reference(self):
        """Chords are matched to their alignment rows after the MIDI and CSV round trip"""
        piece = generate_piece("rubato", 40, TempoProfile("rubato", 0.5, 0.05, 32.0), seed=13)
        loaded = load_reference(
            write_performance(piece.accompaniment),
            dump_alignment_csv(piece.accompaniment_alignment),
            piece.score,
            Part.ACCOMPANIMENT,
        )
        for perturbed in perturb_performance(loaded, sigma_ms=100.0, count=3, seed=4):
            perturbed_onsets = [n.onset_sec for n in perturbed.notes]
            for (_, original), (_, onset) in zip(loaded.alignment, perturbed.alignment):
                self.assertGreater(abs(onset - original), 1e-6)
                self.assertTrue(any(abs(onset - o) < 1e-9 for o in perturbed_onsets))

    def test_zero_sigma(self):
        ref = spaced_performance(5)
        self.assertEqual(perturb_performance(ref, sigma_ms=0.0, count=2), [ref, ref])
        with self.assertRaises(ValueError):
            perturb_performance(ref, sigma_ms=-1.0)


class FollowerExperimentTestCase(TestCase):
    piece = generate_piece("constant", 60, TempoProfile("constant", 0.5), seed=11)

    def test_oltw_close_to_offline_bound(self):
        test = self.piece.solo_reference()
        references = perturb_performance(test, sigma_ms=100.0, count=5, seed=0)
        online = run_follower_experiment(self.piece.score, test, references, "oltw")
        offline = oracle_follower_report(self.piece.score, test, references)
        self.assertEqual(len(online.asynchronies_ms), 60)
        self.assertEqual(offline.label, "DTW")
        self.assertLessEqual(online.median_abs_ms, offline.median_abs_ms + 20.0)

    def test_hmm(self):
        report = run_follower_experiment(self.piece.score, self.piece.solo_reference(), [], "hmm")
        self.assertEqual(report.label, "HMM")
        self.assertLessEqual(report.median_abs_ms, 10.0)

    def test_exact_reference_oracle(self):
        test = self.piece.solo_reference()
        self.assertEqual(oracle_follower_report(self.piece.score, test, [test]).median_abs_ms, 0.0)


class RobustnessTestCase(TestCase):
    def test_oltw_on_long_rubato_piece(self):
        """Five references perturbed by 100 ms keep OLTW within 20 ms of the offline bound"""
        piece = piece_by_name("rubato-v1")
        test = piece.solo_reference()
        references = perturb_performance(test, sigma_ms=100.0, count=5, seed=0)
        online = run_follower_experiment(piece.score, test, references, "oltw")
        offline = oracle_follower_report(piece.score, test, references)
        self.assertEqual(len(online.asynchronies_ms), 200)
        self.assertLessEqual(online.median_abs_ms, offline.median_abs_ms + 20.0)


class TempoExperimentTestCase(TestCase):
    def test_grid_size(self):
        self.assertEqual(grid_size(), 726)
        self.assertTrue(700 <= grid_size() <= 900)
        for variant, grid in DEFAULT_GRIDS.items():
            self.assertEqual(len({tuple(sorted(p.items())) for p in grid}), len(grid), variant)

    def test_tie_break(self):
        def experiment(params):
            return TempoErrorReport(TempoVariant.MA, 5.0 if params["eta"] > 0.2 else 7.0, 0.0, params)

        best = grid_search(experiment, [{"eta": 0.9}, {"eta": 0.4}, {"eta": 0.1}, {"eta": 0.6}])
        self.assertEqual(best.params, {"eta": 0.4})
        with self.assertRaises(ValueError):
            grid_search(experiment, [])

    def test_exact_expectation(self):
        _, reference = expressive_piece()
        ref = reference.solo_reference()
        report = run_tempo_experiment(ref.perf_onsets, ref.score_onsets, TempoVariant.LTE, tau_0=0.5, phi=reference_tempo([ref]))
        self.assertLess(report.mean_abs_onset_error_ms, 1.0)

    def test_constant_tempo(self):
        ref = generate_piece("constant", 40, TempoProfile("constant", 0.5), seed=2).solo_reference()
        for variant in TempoVariant:
            report = run_tempo_experiment(ref.perf_onsets, ref.score_onsets, variant, tau_0=0.5)
            self.assertLess(report.mean_abs_onset_error_ms, 1e-6, variant)

    def test_mismatched_input(self):
        with self.assertRaises(ValueError):
            run_tempo_experiment([1.0, 2.0], [0.0], TempoVariant.R)

    def test_ordering_on_expressive_piece(self):
        """The reference expectation beats plain linear correction, and the reactive and moving-average models are the two worst"""
        test, reference = expressive_piece()
        perf = test.solo_reference()
        phi = reference_tempo([reference.solo_reference()])
        best = search_variants(perf.perf_onsets, perf.score_onsets, 0.5, phi)
        errors = {v: r.mean_abs_onset_error_ms for v, r in best.items()}
        self.assertEqual(set(errors), set(TempoVariant))
        self.assertLess(errors[TempoVariant.LTE], errors[TempoVariant.L])
        self.assertEqual(set(sorted(errors, key=errors.get)[-2:]), {TempoVariant.R, TempoVariant.MA})

        table = format_tempo_table(best.values()).splitlines()
        self.assertEqual(len(table), 7)
        self.assertTrue(tempo_csv(best.values()).startswith("variant,onset_error_ms"))
