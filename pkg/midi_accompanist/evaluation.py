"""
Experiments: follower asynchrony against ground truth and tempo-model prediction errors with
grid search. Every random draw goes through a seeded PCG64 generator.
"""
import csv
import io
import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import AlignmentError
from .followers import create_follower
from .followers.dtw import full_dtw
from .followers.hmm import HmmConfig
from .followers.oltw import InputFramer, featurize_reference
from .midi_io import WINDOW_SEC, frame_index, grid_origin, performance_events, window_events
from .models import ONSET_TOLERANCE, PerformedNote, ReferencePerformance, Score
from .synthetic import rng_for
from .tempo_models import TempoObservation, TempoVariant, init_tempo_state, step
from .utils import build_onset_grid

logger = logging.getLogger(__name__)

THRESHOLDS_MS = (25, 50, 100)
MIN_DURATION_SEC = 0.01
MIN_ALIGNMENT_GAP_SEC = 0.001
# covers MIDI tick rounding and the microsecond precision of alignment files
CHORD_MATCH_SEC = 0.002


def _chord_members(notes: Sequence[PerformedNote], alignment: Sequence[Tuple[float, float]]) -> List[List[int]]:
    """Indices of the notes sounding each alignment row: the notes whose onset lies nearest to it, within CHORD_MATCH_SEC."""
    times = np.array([perf_onset for _, perf_onset in alignment], dtype=float)
    members: List[List[int]] = [[] for _ in alignment]
    if not len(times):
        return members
    for k, note in enumerate(notes):
        i = int(np.searchsorted(times, note.onset_sec))
        candidates = [j for j in (i - 1, i) if 0 <= j < len(times)]
        j = min(candidates, key=lambda j: abs(times[j] - note.onset_sec))
        if abs(times[j] - note.onset_sec) <= CHORD_MATCH_SEC:
            members[j].append(k)
    return members


def perturb_performance(perf: ReferencePerformance, sigma_ms: float = 100.0, count: int = 5, seed: int = 0) -> List[ReferencePerformance]:
    """
    `count` copies of `perf` with independent Gaussian noise on every onset and offset. The
    alignment follows each chord's earliest perturbed onset and stays strictly increasing.
    """
    if sigma_ms < 0:
        raise ValueError(f"sigma_ms must not be negative, got {sigma_ms}")
    if sigma_ms == 0:
        return [perf for _ in range(count)]

    sigma = sigma_ms / 1000.0
    rng = rng_for(seed)
    notes = list(perf.notes)
    chords = _chord_members(notes, perf.alignment)
    results = []
    for _ in range(count):
        onset_noise = rng.normal(0.0, sigma, len(notes))
        offset_noise = rng.normal(0.0, sigma, len(notes))
        perturbed = []
        chord_onsets: Dict[int, float] = {}
        for k, (note, e_on, e_off) in enumerate(zip(notes, onset_noise, offset_noise)):
            onset = max(note.onset_sec + e_on, 0.0)
            duration = max(note.offset_sec + e_off - onset, MIN_DURATION_SEC)
            perturbed.append(PerformedNote(note.pitch, onset, duration, note.velocity))
            chord_onsets[k] = onset

        alignment = []
        previous = -np.inf
        for (score_onset, perf_onset), indices in zip(perf.alignment, chords):
            members = [chord_onsets[k] for k in indices]
            onset = min(members) if members else perf_onset
            onset = max(onset, previous + MIN_ALIGNMENT_GAP_SEC)
            alignment.append((score_onset, onset))
            previous = onset
        perturbed.sort(key=lambda n: (n.onset_sec, n.pitch))
        results.append(ReferencePerformance(tuple(perturbed), tuple(alignment)))
    return results


@dataclass(frozen=True)
class AsynchronyReport:
    asynchronies_ms: Tuple[float, ...]
    median_abs_ms: float
    pct_le_25: float
    pct_le_50: float
    pct_le_100: float
    label: str = ""

    @classmethod
    def from_asynchronies(cls, asynchronies_ms: Sequence[float], label: str = "") -> "AsynchronyReport":
        values = np.abs(np.asarray(asynchronies_ms, dtype=float))
        if not len(values):
            raise ValueError("no asynchronies to report")
        pct = [float(100.0 * np.count_nonzero(values <= t + 1e-9) / len(values)) for t in THRESHOLDS_MS]
        return cls(tuple(float(v) for v in values), float(np.median(values)), *pct, label=label)

    def row(self) -> str:
        return f"{self.label:<10}{self.median_abs_ms:>8.1f}{self.pct_le_25:>8.1f}{self.pct_le_50:>8.1f}{self.pct_le_100:>9.1f}"


def asynchrony_metrics(estimated: Sequence[Tuple[float, float]], truth: Sequence[Tuple[float, float]], label: str = "") -> AsynchronyReport:
    """Per score onset |estimated - true| in ms; both sides must name the same onsets."""
    truth_by_onset = {round(s, 9): t for s, t in truth}
    estimated_by_onset = {round(s, 9): t for s, t in estimated}
    if truth_by_onset.keys() != estimated_by_onset.keys():
        missing = sorted(truth_by_onset.keys() ^ estimated_by_onset.keys())
        raise AlignmentError(f"estimated and true onsets differ at score onsets {missing[:5]}")
    keys = sorted(truth_by_onset)
    return AsynchronyReport.from_asynchronies([1000.0 * abs(estimated_by_onset[k] - truth_by_onset[k]) for k in keys], label)


def format_follower_table(reports: Iterable[AsynchronyReport]) -> str:
    lines = [f"{'SF':<10}{'Async':>8}{'<=25ms':>8}{'<=50ms':>8}{'<=100ms':>9}"]
    lines.extend(r.row() for r in reports)
    return "\n".join(lines)


def follower_csv(reports: Iterable[AsynchronyReport]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["follower", "median_abs_ms", "pct_le_25", "pct_le_50", "pct_le_100"])
    for r in reports:
        writer.writerow([r.label, f"{r.median_abs_ms:.3f}", f"{r.pct_le_25:.3f}", f"{r.pct_le_50:.3f}", f"{r.pct_le_100:.3f}"])
    return buffer.getvalue()


def _truth(test_perf: ReferencePerformance, score_onsets: Sequence[float], origin: float) -> List[Tuple[float, float]]:
    truth = []
    for s in score_onsets:
        perf_onset = test_perf.perf_time_at(s)
        truth.append((s, origin + (frame_index(perf_onset, origin) + 1) * WINDOW_SEC))
    return truth


def _first_reaching(trace: Sequence[Tuple[float, float]], score_onsets: Sequence[float]) -> List[Tuple[float, float]]:
    """For each score onset the end of the first window whose position reached it."""
    estimated = []
    k = 0
    for s in score_onsets:
        while k < len(trace) and trace[k][1] < s - ONSET_TOLERANCE:
            k += 1
        estimated.append((s, trace[k][0] if k < len(trace) else trace[-1][0]))
    return estimated


def run_follower_experiment(
    score: Score,
    test_perf: ReferencePerformance,
    references: Sequence[ReferencePerformance],
    kind: str,
    hmm_config: Optional[HmmConfig] = None,
    window_sec: float = 2.0,
    step_sec: float = 0.1,
) -> AsynchronyReport:
    """Replays `test_perf` through windowing and a follower and compares against its own alignment."""
    grid = build_onset_grid(score)
    initial_bpm = 60.0 / score.default_beat_period
    follower = create_follower(kind, grid, references, initial_bpm, hmm_config, window_sec, step_sec)

    events = performance_events(test_perf.notes)
    origin = grid_origin(events[0].timestamp_sec)
    trace = [(w.window_end_sec, follower.step(w).score_onset_beats) for w in window_events(events)]

    estimated = _first_reaching(trace, grid.onsets)
    report = asynchrony_metrics(estimated, _truth(test_perf, grid.onsets, origin), label=kind.upper())
    logger.info(f"{kind} follower: median {report.median_abs_ms:.1f} ms over {len(grid)} onsets")
    return report


def oracle_follower_report(score: Score, test_perf: ReferencePerformance, references: Sequence[ReferencePerformance]) -> AsynchronyReport:
    """The follower experiment with each reference aligned offline by full DTW, averaged like the ensemble."""
    grid = build_onset_grid(score)
    events = performance_events(test_perf.notes)
    origin = grid_origin(events[0].timestamp_sec)
    windows = list(window_events(events))
    framer = InputFramer()
    query = np.array([framer.frame(w) for w in windows])

    per_reference = []
    for ref in references:
        sequence = featurize_reference(ref)
        positions = full_dtw(query, sequence.frames).positions()
        per_reference.append([sequence.frame_to_score(j) for j in positions])
    mean_positions = np.maximum.accumulate(np.mean(per_reference, axis=0))

    trace = [(w.window_end_sec, float(p)) for w, p in zip(windows, mean_positions)]
    estimated = _first_reaching(trace, grid.onsets)
    return asynchrony_metrics(estimated, _truth(test_perf, grid.onsets, origin), label="DTW")


@dataclass(frozen=True)
class TempoErrorReport:
    variant: TempoVariant
    mean_abs_onset_error_ms: float
    mean_abs_tempo_error_ms_per_beat: float
    params: Mapping[str, float] = field(default_factory=dict)

    @property
    def selection_key(self) -> Tuple[float, Tuple[Tuple[str, float], ...]]:
        return self.mean_abs_onset_error_ms, tuple(sorted(self.params.items()))


def run_tempo_experiment(
    perf_onsets: Sequence[float],
    score_onsets: Sequence[float],
    variant: TempoVariant,
    params: Optional[Mapping[str, float]] = None,
    tau_0: float = 0.5,
    phi: Optional[Callable[[float], float]] = None,
) -> TempoErrorReport:
    """
    Feeds each performed onset to the model and scores its prediction of the next one:
    |ô(n+1) - o(n+1)| and |b(n+1) - τ(n+1)| with τ(n+1) the beat period of the IOI it predicts.
    """
    if len(perf_onsets) != len(score_onsets) or len(perf_onsets) < 2:
        raise ValueError("need matching performed and score onsets, at least two")
    state = init_tempo_state(variant, tau_0, params, phi if variant == TempoVariant.LTE else None, score_onsets[0])

    onset_errors, tempo_errors = [], []
    for n in range(len(perf_onsets) - 1):
        obs = TempoObservation(
            o_n=perf_onsets[n],
            delta_score_n=score_onsets[n + 1] - score_onsets[n],
            delta_perf_n=perf_onsets[n] - perf_onsets[n - 1] if n else None,
            delta_score_prev=score_onsets[n] - score_onsets[n - 1] if n else None,
            score_onset_next=score_onsets[n + 1],
        )
        state = step(state, obs)
        tau_next = (perf_onsets[n + 1] - perf_onsets[n]) / (score_onsets[n + 1] - score_onsets[n])
        onset_errors.append(abs(state.o_hat - perf_onsets[n + 1]))
        tempo_errors.append(abs(state.b - tau_next))

    return TempoErrorReport(
        variant=variant,
        mean_abs_onset_error_ms=1000.0 * float(np.mean(onset_errors)),
        mean_abs_tempo_error_ms_per_beat=1000.0 * float(np.mean(tempo_errors)),
        params=dict(state.params),
    )


def _grid(**axes: Sequence[float]) -> List[Dict[str, float]]:
    names = sorted(axes)
    return [dict(zip(names, values)) for values in itertools.product(*(axes[n] for n in names))]


_TENTHS = [round(0.1 * k, 1) for k in range(1, 11)]
_FIFTHS = [round(0.2 * k, 1) for k in range(0, 6)]

DEFAULT_GRIDS: Dict[TempoVariant, List[Dict[str, float]]] = {
    TempoVariant.R: [{}],
    # eta=1 never updates the beat period
    TempoVariant.MA: _grid(eta=_TENTHS[:-1]),
    TempoVariant.L: _grid(eta_o=_TENTHS, eta_b=_TENTHS),
    TempoVariant.LTE: _grid(eta_o=_TENTHS, eta_b=_TENTHS),
    TempoVariant.JADAM: _grid(eta_o=_FIFTHS, eta_b=_FIFTHS, eta_a=_FIFTHS),
    TempoVariant.KT: _grid(
        alpha=[0.95, 1.0, 1.05],
        gamma=[0.9, 0.95, 1.0, 1.05],
        beta=[1e-4, 1e-3, 1e-2, 1e-1, 1.0],
        lam=[1e-3, 1e-2, 1e-1, 1.0, 10.0],
    ),
}


def grid_size(grids: Mapping[TempoVariant, Sequence[Mapping[str, float]]] = DEFAULT_GRIDS) -> int:
    return sum(len(g) for g in grids.values())


def grid_search(experiment: Callable[[Mapping[str, float]], TempoErrorReport], grid: Sequence[Mapping[str, float]]) -> TempoErrorReport:
    """Exhaustive search; lowest onset error wins, ties go to the lexicographically smaller parameters."""
    if not grid:
        raise ValueError("empty parameter grid")
    return min((experiment(params) for params in grid), key=lambda r: r.selection_key)


def search_variants(
    perf_onsets: Sequence[float],
    score_onsets: Sequence[float],
    tau_0: float,
    phi: Optional[Callable[[float], float]] = None,
    variants: Sequence[TempoVariant] = tuple(TempoVariant),
    grids: Mapping[TempoVariant, Sequence[Mapping[str, float]]] = DEFAULT_GRIDS,
) -> Dict[TempoVariant, TempoErrorReport]:
    best = {}
    for variant in variants:

        def experiment(params, variant=variant):
            return run_tempo_experiment(perf_onsets, score_onsets, variant, params, tau_0, phi)

        best[variant] = grid_search(experiment, grids[variant])
        logger.info(f"{variant.value}: best {dict(best[variant].params)} onset {best[variant].mean_abs_onset_error_ms:.1f} ms")
    return best


def format_tempo_table(reports: Iterable[TempoErrorReport]) -> str:
    lines = [f"{'Method':<8}{'Onset':>12}{'Tempo':>12}"]
    for r in reports:
        lines.append(f"{r.variant.name:<8}{r.mean_abs_onset_error_ms:>12,.1f}{r.mean_abs_tempo_error_ms_per_beat:>12,.1f}")
    return "\n".join(lines)


def tempo_csv(reports: Iterable[TempoErrorReport]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["variant", "onset_error_ms", "tempo_error_ms_per_beat", "params"])
    for r in reports:
        params = ";".join(f"{k}={v:g}" for k, v in sorted(r.params.items()))
        writer.writerow([r.variant.value, f"{r.mean_abs_onset_error_ms:.3f}", f"{r.mean_abs_tempo_error_ms_per_beat:.3f}", params])
    return buffer.getvalue()
